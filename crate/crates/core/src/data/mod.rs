//! Datasets, labelled/unlabelled splits, batch composition and augmentation.

mod augment;
mod io;
mod synthetic;

pub use augment::{augment, AugmentKind, AugmentPolicy, Modality, PolicyModality};
pub use io::{load_dataset, write_csv, write_idx, DataFormat};
pub use synthetic::{make_synthetic, SyntheticKind, SyntheticSpec, BLOB_RADIUS, SUPER_RADIUS};

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageShape;
use crate::numcore::Tensor;

/// Feature matrix with class labels. Image samples are stored flattened in
/// HWC order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    image: Option<ImageShape>,
    superclass_map: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("features must be finite".into()));
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            image: None,
            superclass_map: None,
        })
    }

    pub fn with_image_shape(mut self, image: ImageShape) -> Result<Self> {
        if image.len() != self.dim {
            return Err(Error::Shape(format!(
                "image {}x{}x{} for dim {}",
                image.height, image.width, image.channels, self.dim
            )));
        }
        self.image = Some(image);
        Ok(self)
    }

    /// `map[subclass] = superclass`; must cover every class.
    pub fn with_superclasses(mut self, map: Vec<usize>) -> Result<Self> {
        if map.len() != self.classes {
            return Err(Error::InvalidValue(format!(
                "superclass map covers {} of {} classes",
                map.len(),
                self.classes
            )));
        }
        self.superclass_map = Some(map);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn image(&self) -> Option<ImageShape> {
        self.image
    }

    pub fn modality(&self) -> Modality {
        match self.image {
            Some(shape) => Modality::Image(shape),
            None => Modality::Vector,
        }
    }

    pub fn superclass_map(&self) -> Option<&[usize]> {
        self.superclass_map.as_deref()
    }

    pub fn superclass_count(&self) -> Option<usize> {
        self.superclass_map
            .as_ref()
            .map(|m| m.iter().max().map_or(0, |&s| s + 1))
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices` stacked into an `n x dim` tensor.
    pub fn rows_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        Ok(Tensor::matrix(indices.len(), self.dim, values)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Self {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image: self.image,
            superclass_map: self.superclass_map.clone(),
        }
    }

    /// Same samples relabelled by superclass; the hierarchy is dropped.
    pub fn to_superclass_targets(&self) -> Result<Self> {
        let map = self.superclass_map.as_ref().ok_or(Error::MissingHierarchy)?;
        Ok(Self {
            features: self.features.clone(),
            dim: self.dim,
            labels: self.labels.iter().map(|&y| map[y]).collect(),
            classes: self.superclass_count().unwrap_or(0),
            image: self.image,
            superclass_map: None,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Stratified split: `round(test_fraction * n_c)` samples of each class
    /// go to the test set. Returns `(train, test)`.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            members.shuffle(&mut rng);
            let k = (test_fraction * members.len() as f64).round() as usize;
            test.extend_from_slice(&members[..k]);
            train.extend_from_slice(&members[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Labelled and unlabelled index sets over one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled.binary_search(&i).is_ok()
    }
}

/// Draws exactly `per_class` labelled samples from each class, uniformly
/// and without replacement; everything else is unlabelled.
pub fn split_labeled(ds: &Dataset, per_class: usize, seed: u64) -> Result<SplitPlan> {
    split_labeled_excluding(ds, per_class, seed, &BTreeSet::new())
}

/// [`split_labeled`] where samples of `excluded` classes never receive a
/// label (they stay in the unlabelled pool).
pub fn split_labeled_excluding(
    ds: &Dataset,
    per_class: usize,
    seed: u64,
    excluded: &BTreeSet<usize>,
) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    for c in 0..ds.classes {
        if excluded.contains(&c) {
            continue;
        }
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        if per_class > members.len() {
            return Err(Error::InsufficientPool(format!(
                "class {c} has {} samples, quota is {per_class}",
                members.len()
            )));
        }
        labeled.extend(sample(&mut rng, members.len(), per_class).into_iter().map(|k| members[k]));
    }
    labeled.sort_unstable();
    let unlabeled = (0..ds.len())
        .filter(|i| labeled.binary_search(i).is_err())
        .collect();
    Ok(SplitPlan {
        labeled,
        unlabeled,
        seed,
    })
}

/// One subclass per superclass whose labels are withheld entirely.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequestration {
    pub unlabeled_classes: BTreeSet<usize>,
    /// Set when every subclass is sequestered, leaving nothing to label.
    pub degenerate: bool,
}

impl Sequestration {
    pub fn split(&self, ds: &Dataset, per_class: usize, seed: u64) -> Result<SplitPlan> {
        split_labeled_excluding(ds, per_class, seed, &self.unlabeled_classes)
    }

    /// Class-type index per subclass: 0 = labelled class, 1 = unlabelled class.
    pub fn class_types(&self, classes: usize) -> Vec<usize> {
        (0..classes)
            .map(|c| usize::from(self.unlabeled_classes.contains(&c)))
            .collect()
    }
}

pub const CLASS_TYPE_NAMES: [&str; 2] = ["labeled-class", "unlabeled-class"];

pub fn sequester_classes(ds: &Dataset, seed: u64) -> Result<Sequestration> {
    let map = ds.superclass_map().ok_or(Error::MissingHierarchy)?;
    let supers = ds.superclass_count().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unlabeled_classes = BTreeSet::new();
    for s in 0..supers {
        let subs: Vec<usize> = (0..map.len()).filter(|&c| map[c] == s).collect();
        if subs.is_empty() {
            continue;
        }
        unlabeled_classes.insert(subs[rng.random_range(0..subs.len())]);
    }
    let degenerate = unlabeled_classes.len() == ds.classes();
    Ok(Sequestration {
        unlabeled_classes,
        degenerate,
    })
}

/// One training batch: `I` unlabelled rows followed by `J` labelled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedBatch {
    /// Dataset indices, unlabelled first.
    pub indices: Vec<usize>,
    pub unlabeled_count: usize,
    pub labeled_count: usize,
    /// Labels of the `J` labelled rows, in order.
    pub labels: Vec<usize>,
    pub base: Tensor,
    pub light: Option<Tensor>,
    pub hard: Vec<Tensor>,
}

impl ComposedBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(row, label)` for the labelled rows.
    pub fn labeled_rows(&self) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .map(|(j, &y)| (self.unlabeled_count + j, y))
            .collect()
    }

    /// Adds the light view of every row.
    pub fn with_light_view(
        mut self,
        modality: Modality,
        policy: &AugmentPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        self.light = Some(augment_rows(&self.base, modality, policy, rng)?);
        Ok(self)
    }
}

/// Unlabelled count for ratio `r`, rounding half up.
pub fn unlabeled_count(r: f64, labeled: usize) -> usize {
    (r * labeled as f64 + 0.5).floor() as usize
}

pub fn compose_batch(
    ds: &Dataset,
    plan: &SplitPlan,
    r: f64,
    labeled: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ComposedBatch> {
    if !(r.is_finite() && r >= 0.0) {
        return Err(Error::Config(format!("batch ratio must be >= 0, got {r}")));
    }
    if labeled == 0 {
        return Err(Error::Config("batch needs at least one labelled row".into()));
    }
    let unlabeled = unlabeled_count(r, labeled);
    if labeled > plan.labeled.len() {
        return Err(Error::InsufficientPool(format!(
            "{labeled} labelled rows requested from a pool of {}",
            plan.labeled.len()
        )));
    }
    if unlabeled > plan.unlabeled.len() {
        return Err(Error::InsufficientPool(format!(
            "{unlabeled} unlabelled rows requested from a pool of {}",
            plan.unlabeled.len()
        )));
    }
    let mut indices: Vec<usize> = sample(rng, plan.unlabeled.len(), unlabeled)
        .into_iter()
        .map(|k| plan.unlabeled[k])
        .collect();
    let lab: Vec<usize> = sample(rng, plan.labeled.len(), labeled)
        .into_iter()
        .map(|k| plan.labeled[k])
        .collect();
    let labels = lab.iter().map(|&i| ds.labels[i]).collect();
    indices.extend(lab);
    Ok(ComposedBatch {
        base: ds.rows_tensor(&indices)?,
        indices,
        unlabeled_count: unlabeled,
        labeled_count: labeled,
        labels,
        light: None,
        hard: Vec::new(),
    })
}

/// Augments every row of `base` with a fresh seed drawn from `rng`.
pub fn augment_rows(
    base: &Tensor,
    modality: Modality,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(base.len());
    for r in 0..base.rows() {
        let seed = rng.random::<u64>();
        out.extend(augment(base.row(r), modality, policy, seed)?);
    }
    Ok(Tensor::matrix(base.rows(), base.cols(), out)?)
}

/// Adds `k` hard views per row, each aligned to the row's light view.
pub fn expand_hard_replicas(
    mut batch: ComposedBatch,
    k: usize,
    modality: Modality,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ComposedBatch> {
    if k == 0 {
        return Err(Error::Config("need at least one hard replica".into()));
    }
    for _ in 0..k {
        let view = augment_rows(&batch.base, modality, policy, rng)?;
        batch.hard.push(view);
    }
    Ok(batch)
}
