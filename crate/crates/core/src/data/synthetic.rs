//! Synthetic datasets: Gaussian blobs, two moons and blobs-of-blobs.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Blobs,
    Moons,
    HierarchicalBlobs,
}

/// Radius of the circle carrying blob (and subclass offset) centres.
pub const BLOB_RADIUS: f64 = 1.0;
/// Radius of the circle carrying superclass centres.
pub const SUPER_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Class count for blobs (default 4). Moons always have 2 and
    /// hierarchical blobs `superclasses * subclasses`; a value given for
    /// those kinds must agree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub samples: usize,
    /// Standard deviation of the isotropic Gaussian noise.
    #[serde(default)]
    pub noise: f64,
    /// Feature count. Dimensions beyond the first two carry pure noise.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_superclasses")]
    pub superclasses: usize,
    #[serde(default = "default_subclasses")]
    pub subclasses: usize,
}

fn default_dim() -> usize {
    2
}

fn default_superclasses() -> usize {
    4
}

fn default_subclasses() -> usize {
    2
}

impl SyntheticSpec {
    pub fn blobs(classes: usize, samples: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Blobs,
            classes: Some(classes),
            samples,
            noise,
            dim: 2,
            seed,
            superclasses: default_superclasses(),
            subclasses: default_subclasses(),
        }
    }

    pub fn moons(samples: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Moons,
            classes: None,
            ..Self::blobs(2, samples, noise, seed)
        }
    }

    pub fn hierarchical(superclasses: usize, subclasses: usize, samples: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::HierarchicalBlobs,
            classes: None,
            superclasses,
            subclasses,
            ..Self::blobs(2, samples, noise, seed)
        }
    }

    /// Number of classes generated.
    pub fn class_count(&self) -> usize {
        match self.kind {
            SyntheticKind::Blobs => self.classes.unwrap_or(4),
            SyntheticKind::Moons => 2,
            SyntheticKind::HierarchicalBlobs => self.superclasses * self.subclasses,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.class_count();
        if let Some(given) = self.classes.filter(|&c| c != classes) {
            return Err(Error::Config(match self.kind {
                SyntheticKind::Moons => format!("moons has exactly 2 classes, got {given}"),
                _ => format!(
                    "hierarchical blobs: {} x {} subclasses does not match {given} classes",
                    self.superclasses, self.subclasses
                ),
            }));
        }
        if classes < 2 {
            return Err(Error::Config(format!("synthetic data needs >= 2 classes, got {classes}")));
        }
        if self.samples < classes {
            return Err(Error::Config(format!("{} samples cannot cover {classes} classes", self.samples)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("synthetic data needs dim >= 2, got {}", self.dim)));
        }
        Ok(())
    }

    /// Noise-free centre of class `c` (first two coordinates) for the blob
    /// kinds.
    pub fn centre(&self, c: usize) -> [f64; 2] {
        match self.kind {
            SyntheticKind::HierarchicalBlobs => {
                let s = c / self.subclasses;
                let j = c % self.subclasses;
                let sa = 2.0 * PI * s as f64 / self.superclasses as f64;
                let ja = sa + 2.0 * PI * j as f64 / self.subclasses as f64;
                [
                    SUPER_RADIUS * sa.cos() + BLOB_RADIUS * ja.cos(),
                    SUPER_RADIUS * sa.sin() + BLOB_RADIUS * ja.sin(),
                ]
            }
            _ => {
                let a = 2.0 * PI * c as f64 / self.class_count() as f64;
                [BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin()]
            }
        }
    }
}

/// Class counts are `samples / classes`, with the remainder going to the
/// lowest classes; the sample order is shuffled.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let classes = spec.class_count();
    let base = spec.samples / classes;
    let extra = spec.samples % classes;
    let mut labels: Vec<usize> = (0..classes)
        .flat_map(|c| std::iter::repeat_n(c, base + usize::from(c < extra)))
        .collect();
    labels.shuffle(&mut rng);

    let angle = Uniform::new(0.0, PI).expect("valid range");
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    for &y in &labels {
        let [cx, cy] = match spec.kind {
            SyntheticKind::Moons => {
                let t = angle.sample(&mut rng);
                if y == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
            _ => spec.centre(y),
        };
        let start = features.len();
        features.push(cx);
        features.push(cy);
        features.resize(start + spec.dim, 0.0);
        for v in &mut features[start..] {
            *v += spec.noise * normal.sample(&mut rng);
        }
    }
    let ds = Dataset::new(features, spec.dim, labels, classes)?;
    match spec.kind {
        SyntheticKind::HierarchicalBlobs => {
            let map = (0..classes).map(|c| c / spec.subclasses).collect();
            ds.with_superclasses(map)
        }
        _ => Ok(ds),
    }
}
