use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Vector,
    Image(ImageShape),
}

impl Modality {
    fn name(&self) -> &'static str {
        match self {
            Modality::Vector => "vector",
            Modality::Image(_) => "image",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Light,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyModality {
    #[default]
    Vector,
    Image,
}

/// Parameterised augmentation. Vector policies use scale, rotation and
/// feature dropout; image policies use crop, flip, colour jitter and pixel
/// dropout. Both add Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    #[serde(default)]
    pub modality: PolicyModality,
    #[serde(default)]
    pub noise_std: f64,
    /// Multiplicative scale drawn uniformly from `[lo, hi]`.
    #[serde(default = "unit_range")]
    pub scale_range: [f64; 2],
    /// Maximum rotation angle (radians) in a random coordinate plane.
    #[serde(default)]
    pub rotation_max: f64,
    /// Probability of zeroing each feature (or pixel).
    #[serde(default)]
    pub feature_dropout: f64,
    /// Maximum translation in pixels, zero-filled.
    #[serde(default)]
    pub crop_pad: usize,
    #[serde(default)]
    pub flip: bool,
    /// Brightness / contrast jitter amplitude.
    #[serde(default)]
    pub jitter: f64,
}

fn unit_range() -> [f64; 2] {
    [1.0, 1.0]
}

impl AugmentPolicy {
    pub fn identity(kind: AugmentKind) -> Self {
        Self {
            kind,
            modality: PolicyModality::Vector,
            noise_std: 0.0,
            scale_range: unit_range(),
            rotation_max: 0.0,
            feature_dropout: 0.0,
            crop_pad: 0,
            flip: false,
            jitter: 0.0,
        }
    }

    pub fn light_vector() -> Self {
        Self {
            noise_std: 0.05,
            ..Self::identity(AugmentKind::Light)
        }
    }

    pub fn hard_vector() -> Self {
        Self {
            noise_std: 0.15,
            scale_range: [0.85, 1.15],
            rotation_max: 0.2,
            feature_dropout: 0.0,
            ..Self::identity(AugmentKind::Hard)
        }
    }

    pub fn light_image() -> Self {
        Self {
            modality: PolicyModality::Image,
            noise_std: 0.02,
            crop_pad: 2,
            flip: true,
            ..Self::identity(AugmentKind::Light)
        }
    }

    pub fn hard_image() -> Self {
        Self {
            modality: PolicyModality::Image,
            noise_std: 0.08,
            scale_range: [0.8, 1.2],
            feature_dropout: 0.1,
            crop_pad: 4,
            flip: true,
            jitter: 0.3,
            ..Self::identity(AugmentKind::Hard)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        let [lo, hi] = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return bad(format!("scale range [{lo}, {hi}] must satisfy 0 < lo <= hi"));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.rotation_max) {
            return bad(format!("rotation_max {} outside [0, pi]", self.rotation_max));
        }
        if !(0.0..1.0).contains(&self.feature_dropout) {
            return bad(format!("feature_dropout {} outside [0, 1)", self.feature_dropout));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        match self.modality {
            PolicyModality::Vector if self.crop_pad > 0 || self.flip || self.jitter > 0.0 => {
                bad("crop, flip and jitter only apply to image policies".into())
            }
            PolicyModality::Image if self.rotation_max > 0.0 => {
                bad("rotation only applies to vector policies".into())
            }
            _ => Ok(()),
        }
    }
}

/// Deterministic augmentation of one sample for a given `seed`.
pub fn augment(x: &[f64], modality: Modality, policy: &AugmentPolicy, seed: u64) -> Result<Vec<f64>> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match (modality, policy.modality) {
        (Modality::Vector, PolicyModality::Vector) => Ok(augment_vector(x, policy, &mut rng)),
        (Modality::Image(shape), PolicyModality::Image) => {
            if shape.len() != x.len() {
                return Err(Error::Shape(format!(
                    "image shape {}x{}x{} for {} values",
                    shape.height,
                    shape.width,
                    shape.channels,
                    x.len()
                )));
            }
            Ok(augment_image(x, shape, policy, &mut rng))
        }
        (m, p) => Err(Error::ModalityMismatch {
            policy: match p {
                PolicyModality::Vector => "vector",
                PolicyModality::Image => "image",
            },
            sample: m.name(),
        }),
    }
}

fn add_noise(out: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("validated std");
        for v in out.iter_mut() {
            *v += n.sample(rng);
        }
    }
}

fn drop_features(out: &mut [f64], rate: f64, rng: &mut ChaCha8Rng) {
    if rate > 0.0 {
        for v in out.iter_mut() {
            if rng.random::<f64>() < rate {
                *v = 0.0;
            }
        }
    }
}

fn draw_scale(range: [f64; 2], rng: &mut ChaCha8Rng) -> Option<f64> {
    let [lo, hi] = range;
    if lo == 1.0 && hi == 1.0 {
        None
    } else if lo == hi {
        Some(lo)
    } else {
        Some(rng.random_range(lo..=hi))
    }
}

fn augment_vector(x: &[f64], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    if let Some(s) = draw_scale(policy.scale_range, rng) {
        out.iter_mut().for_each(|v| *v *= s);
    }
    if policy.rotation_max > 0.0 && out.len() >= 2 {
        let i = rng.random_range(0..out.len());
        let mut j = rng.random_range(0..out.len() - 1);
        if j >= i {
            j += 1;
        }
        let angle = rng.random_range(-policy.rotation_max..=policy.rotation_max);
        let (s, c) = angle.sin_cos();
        let (a, b) = (out[i], out[j]);
        out[i] = c * a - s * b;
        out[j] = s * a + c * b;
    }
    add_noise(&mut out, policy.noise_std, rng);
    drop_features(&mut out, policy.feature_dropout, rng);
    out
}

fn augment_image(x: &[f64], shape: ImageShape, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let mut out = x.to_vec();
    if policy.crop_pad > 0 || policy.flip {
        let pad = policy.crop_pad as i64;
        let (dy, dx) = if pad > 0 {
            (rng.random_range(-pad..=pad), rng.random_range(-pad..=pad))
        } else {
            (0, 0)
        };
        let flip = policy.flip && rng.random::<bool>();
        for y in 0..h {
            for xx in 0..w {
                let sy = y as i64 + dy;
                let sx0 = xx as i64 + dx;
                let sx = if flip { w as i64 - 1 - sx0 } else { sx0 };
                for c in 0..ch {
                    out[(y * w + xx) * ch + c] = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                        x[((sy as usize) * w + sx as usize) * ch + c]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    if let Some(s) = draw_scale(policy.scale_range, rng) {
        out.iter_mut().for_each(|v| *v *= s);
    }
    if policy.jitter > 0.0 {
        let contrast = 1.0 + rng.random_range(-policy.jitter..=policy.jitter);
        let brightness = rng.random_range(-policy.jitter..=policy.jitter);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut()
            .for_each(|v| *v = (*v - mean) * contrast + mean + brightness);
    }
    add_noise(&mut out, policy.noise_std, rng);
    drop_features(&mut out, policy.feature_dropout, rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_policy_is_identity() {
        let x = sample_vec(1, 5);
        for kind in [AugmentKind::Light, AugmentKind::Hard] {
            let p = AugmentPolicy::identity(kind);
            assert_eq!(augment(&x, Modality::Vector, &p, 7).unwrap(), x);
        }
        let shape = ImageShape {
            height: 3,
            width: 4,
            channels: 2,
        };
        let img = sample_vec(2, shape.len());
        let p = AugmentPolicy {
            modality: PolicyModality::Image,
            ..AugmentPolicy::identity(AugmentKind::Hard)
        };
        assert_eq!(augment(&img, Modality::Image(shape), &p, 3).unwrap(), img);
    }

    #[test]
    fn deterministic_per_seed_and_shape_preserving() {
        let x = sample_vec(3, 6);
        let p = AugmentPolicy::hard_vector();
        let a = augment(&x, Modality::Vector, &p, 11).unwrap();
        assert_eq!(a, augment(&x, Modality::Vector, &p, 11).unwrap());
        assert_ne!(a, augment(&x, Modality::Vector, &p, 12).unwrap());
        assert_eq!(a.len(), x.len());

        let shape = ImageShape {
            height: 5,
            width: 5,
            channels: 1,
        };
        let img = sample_vec(4, 25);
        let p = AugmentPolicy::hard_image();
        let a = augment(&img, Modality::Image(shape), &p, 1).unwrap();
        assert_eq!(a, augment(&img, Modality::Image(shape), &p, 1).unwrap());
        assert_eq!(a.len(), 25);
    }

    #[test]
    fn hard_perturbs_more_than_light() {
        let x = vec![1.0, -0.5, 0.25, 2.0];
        let mean_dev = |p: &AugmentPolicy| {
            (0..1000u64)
                .map(|s| {
                    let y = augment(&x, Modality::Vector, p, s).unwrap();
                    x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                })
                .sum::<f64>()
                / 1000.0
        };
        let light = mean_dev(&AugmentPolicy::light_vector());
        let hard = mean_dev(&AugmentPolicy::hard_vector());
        assert!(hard > light, "hard {hard} <= light {light}");
    }

    #[test]
    fn modality_mismatch() {
        let x = vec![0.0; 4];
        let shape = ImageShape {
            height: 2,
            width: 2,
            channels: 1,
        };
        assert!(matches!(
            augment(&x, Modality::Image(shape), &AugmentPolicy::light_vector(), 0),
            Err(Error::ModalityMismatch { .. })
        ));
        assert!(matches!(
            augment(&x, Modality::Vector, &AugmentPolicy::light_image(), 0),
            Err(Error::ModalityMismatch { .. })
        ));
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::light_vector();
        p.flip = true;
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::hard_vector();
        p.scale_range = [1.2, 0.8];
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::hard_image();
        p.rotation_max = 0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn flip_mirrors_columns() {
        let shape = ImageShape {
            height: 1,
            width: 3,
            channels: 1,
        };
        let p = AugmentPolicy {
            modality: PolicyModality::Image,
            flip: true,
            ..AugmentPolicy::identity(AugmentKind::Light)
        };
        let x = vec![1.0, 2.0, 3.0];
        let outs: Vec<Vec<f64>> = (0..20)
            .map(|s| augment(&x, Modality::Image(shape), &p, s).unwrap())
            .collect();
        assert!(outs.iter().all(|o| o == &x || o == &vec![3.0, 2.0, 1.0]));
        assert!(outs.iter().any(|o| o != &x));
    }
}
