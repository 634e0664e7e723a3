//! Experiment configuration: a strict TOML schema plus dotted-path
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::FixMatchNormalization;
use crate::model::ConvFrontend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Supervised,
    Muscle,
    MuscleMt,
    MuscleMtLp,
    FixMatch,
    MuscleFixMatch,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Supervised,
        Method::Muscle,
        Method::MuscleMt,
        Method::MuscleMtLp,
        Method::FixMatch,
        Method::MuscleFixMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Muscle => "muscle",
            Method::MuscleMt => "muscle-mt",
            Method::MuscleMtLp => "muscle-mt-lp",
            Method::FixMatch => "fix-match",
            Method::MuscleFixMatch => "muscle-fix-match",
        }
    }

    pub fn uses_mi(self) -> bool {
        matches!(
            self,
            Method::Muscle | Method::MuscleMt | Method::MuscleMtLp | Method::MuscleFixMatch
        )
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, Method::MuscleMt | Method::MuscleMtLp)
    }

    pub fn uses_label_propagation(self) -> bool {
        self == Method::MuscleMtLp
    }

    pub fn uses_fixmatch(self) -> bool {
        matches!(self, Method::FixMatch | Method::MuscleFixMatch)
    }

    /// Hard views are needed by the MI and FixMatch terms.
    pub fn uses_hard_views(self) -> bool {
        self.uses_mi() || self.uses_fixmatch()
    }
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    /// Half-cosine reaching zero at `horizon` (default `ceil(epochs * 7 / 6)`,
    /// the 180/210 proportion).
    Cosine { horizon: Option<usize> },
    /// `lr0 * cos(fraction * pi * epoch / epochs)`.
    Cycle { fraction: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Cosine { horizon: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Labelled rows per batch (`J`).
    pub labeled_batch: usize,
    /// Unlabelled-to-labelled ratio `r`.
    pub ratio: f64,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batches_per_epoch: 20,
            labeled_batch: 8,
            ratio: 8.0,
            lr: 0.05,
            schedule: Schedule::default(),
            momentum: 0.9,
            max_grad_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn horizon(&self) -> usize {
        match self.schedule {
            Schedule::Cosine { horizon: Some(h) } => h,
            Schedule::Cosine { horizon: None } => (self.epochs * 7).div_ceil(6),
            Schedule::Cycle { .. } => self.epochs,
        }
    }
}

/// Which batch rows enter the MI term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiRows {
    #[default]
    All,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    /// Consistency weight; only used by teacher-student methods.
    pub beta: f64,
    /// Linear warm-up of `alpha` over this many epochs (0 = constant).
    pub alpha_warmup: usize,
    pub mi_rows: MiRows,
    pub fixmatch_threshold: f64,
    pub fixmatch_normalization: FixMatchNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            alpha_warmup: 0,
            mi_rows: MiRows::All,
            fixmatch_threshold: 0.95,
            fixmatch_normalization: FixMatchNormalization::AllRows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_layers: Vec<usize>,
    pub dropout_rate: f64,
    pub use_dropout: bool,
    pub conv_frontend: Option<ConvFrontend>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64],
            dropout_rate: 0.5,
            use_dropout: false,
            conv_frontend: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Defaults to the light preset for the data modality.
    pub light: Option<AugmentPolicy>,
    /// Defaults to the hard preset for the data modality.
    pub hard: Option<AugmentPolicy>,
    pub hard_replicas: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            light: None,
            hard: None,
            hard_replicas: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mu: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { mu: 0.99 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpConfig {
    pub k: usize,
    pub kappa: f64,
    /// Share of the epochs trained before pseudo labels switch on.
    pub warmup_fraction: f64,
    pub top_k: Option<usize>,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Write the affinity graph and diffusion scores of each refresh.
    pub dump: bool,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            k: 10,
            kappa: 0.99,
            warmup_fraction: 0.5,
            top_k: None,
            tolerance: 1e-9,
            max_iterations: 2000,
            dump: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `k` of the top-k accuracy (capped at the class count).
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { top_k: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: Option<SyntheticSpec>,
    /// CSV file, or IDX image file.
    pub path: Option<PathBuf>,
    /// IDX label file.
    pub labels_path: Option<PathBuf>,
    pub test_fraction: f64,
    /// Seed of the train/test split; fixed across run seeds.
    pub split_seed: u64,
    pub labels_per_class: usize,
    /// Withhold all labels of one subclass per superclass and train on
    /// superclass targets.
    pub sequester: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: Some(SyntheticSpec::blobs(4, 2000, 0.5, 0)),
            path: None,
            labels_path: None,
            test_fraction: 0.5,
            split_seed: 0,
            labels_per_class: 2,
            sequester: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory; the CLI falls back to `$MUSCLE_OUT` or `runs/`.
    pub dir: Option<PathBuf>,
}

/// Everything one training run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub teacher: TeacherConfig,
    pub lp: LpConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            teacher: TeacherConfig::default(),
            lp: LpConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        let o = &self.optim;
        if o.batches_per_epoch == 0 {
            return fail("optim.batches_per_epoch", "must be >= 1".into());
        }
        if o.labeled_batch == 0 {
            return fail("optim.labeled_batch", "must be >= 1".into());
        }
        if !(o.ratio.is_finite() && o.ratio >= 0.0) {
            return fail("optim.ratio", format!("must be finite and >= 0, got {}", o.ratio));
        }
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return fail("optim.lr", format!("must be > 0, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return fail("optim.momentum", format!("must lie in [0, 1), got {}", o.momentum));
        }
        if let Some(m) = o.max_grad_norm {
            if !(m.is_finite() && m > 0.0) {
                return fail("optim.max_grad_norm", format!("must be > 0, got {m}"));
            }
        }
        match o.schedule {
            Schedule::Cosine { horizon: Some(h) } if h < o.epochs || h == 0 => {
                return fail(
                    "optim.schedule.horizon",
                    format!("horizon {h} must be >= epochs ({}) and > 0", o.epochs),
                );
            }
            Schedule::Cycle { fraction } if !(fraction > 0.0 && fraction < 0.5) => {
                return fail(
                    "optim.schedule.fraction",
                    format!("must lie in (0, 0.5) so the rate stays positive, got {fraction}"),
                );
            }
            _ => {}
        }
        let l = &self.loss;
        for (field, v) in [("loss.alpha", l.alpha), ("loss.beta", l.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(field, format!("must be finite and >= 0, got {v}"));
            }
        }
        if !(l.fixmatch_threshold > 0.0 && l.fixmatch_threshold < 1.0) {
            return fail(
                "loss.fixmatch_threshold",
                format!("must lie in (0, 1), got {}", l.fixmatch_threshold),
            );
        }
        let m = &self.model;
        if m.hidden_layers.contains(&0) {
            return fail("model.hidden_layers", "widths must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout_rate) {
            return fail("model.dropout_rate", format!("must lie in [0, 1), got {}", m.dropout_rate));
        }
        if self.augment.hard_replicas == 0 {
            return fail("augment.hard_replicas", "must be >= 1".into());
        }
        for (field, p) in [("augment.light", &self.augment.light), ("augment.hard", &self.augment.hard)] {
            if let Some(p) = p {
                p.validate().map_err(|e| Error::Config(format!("{field}: {e}")))?;
            }
        }
        if !(0.0..=1.0).contains(&self.teacher.mu) {
            return fail("teacher.mu", format!("must lie in [0, 1], got {}", self.teacher.mu));
        }
        let lp = &self.lp;
        if lp.k == 0 {
            return fail("lp.k", "must be >= 1".into());
        }
        if !(lp.kappa > 0.0 && lp.kappa < 1.0) {
            return fail("lp.kappa", format!("must lie in (0, 1), got {}", lp.kappa));
        }
        if !(0.0..=1.0).contains(&lp.warmup_fraction) {
            return fail("lp.warmup_fraction", format!("must lie in [0, 1], got {}", lp.warmup_fraction));
        }
        if !(lp.tolerance > 0.0 && lp.tolerance <= 1e-6) {
            return fail("lp.tolerance", format!("must lie in (0, 1e-6], got {}", lp.tolerance));
        }
        if lp.max_iterations == 0 {
            return fail("lp.max_iterations", "must be >= 1".into());
        }
        if self.eval.top_k == 0 {
            return fail("eval.top_k", "must be >= 1".into());
        }
        Ok(())
    }

    /// Epoch index from which pseudo labels are active.
    pub fn lp_start_epoch(&self) -> usize {
        (self.lp.warmup_fraction * self.optim.epochs as f64).round() as usize
    }
}

/// Top-level experiment document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub lp: LpConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        Self {
            name: None,
            method,
            seeds: default_seeds(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            teacher: TeacherConfig::default(),
            lp: LpConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method,
            seed,
            optim: self.optim.clone(),
            loss: self.loss.clone(),
            model: self.model.clone(),
            augment: self.augment.clone(),
            teacher: self.teacher.clone(),
            lp: self.lp.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        self.train_config(self.seeds[0]).validate()?;
        let d = &self.data;
        if !(0.0..1.0).contains(&d.test_fraction) || d.test_fraction == 0.0 {
            return Err(Error::Config(format!(
                "data.test_fraction: must lie in (0, 1), got {}",
                d.test_fraction
            )));
        }
        if d.labels_per_class == 0 {
            return Err(Error::Config("data.labels_per_class: must be >= 1".into()));
        }
        match d.source {
            DataSource::Synthetic => {
                let spec = d
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.synthetic: required for synthetic data".into()))?;
                spec.validate().map_err(|e| Error::Config(format!("data.synthetic: {e}")))?;
                if d.sequester && spec.kind != crate::data::SyntheticKind::HierarchicalBlobs {
                    return Err(Error::Config(
                        "data.sequester: needs a hierarchical dataset (kind = \"hierarchical-blobs\")".into(),
                    ));
                }
            }
            DataSource::Csv => {
                if d.path.is_none() {
                    return Err(Error::Config("data.path: required for CSV data".into()));
                }
                if d.sequester {
                    return Err(Error::Config("data.sequester: CSV data carries no hierarchy".into()));
                }
            }
            DataSource::Idx => {
                if d.path.is_none() || d.labels_path.is_none() {
                    return Err(Error::Config("data.path and data.labels_path: required for IDX data".into()));
                }
                if d.sequester {
                    return Err(Error::Config("data.sequester: IDX data carries no hierarchy".into()));
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a TOML document after applying `key=value`
    /// overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        if !overrides.is_empty() {
            let defaults = match toml::Value::try_from(Self::new(Method::Muscle)) {
                Ok(toml::Value::Table(t)) => t,
                _ => toml::Table::new(),
            };
            for o in overrides {
                override_with_defaults(&mut doc, Some(&defaults), o)?;
            }
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Parses an override value: TOML scalar or array syntax, `on`/`off` as
/// booleans, anything else as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match raw.trim() {
        "on" => return toml::Value::Boolean(true),
        "off" => return toml::Value::Boolean(false),
        _ => {}
    }
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    }
}

/// Sets `a.b.c=value`, creating intermediate tables as needed. The schema
/// check happens when the document is deserialised.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    override_with_defaults(doc, None, assignment)
}

/// As [`apply_override`]; a table missing from `doc` along the path is
/// seeded from `defaults` so tagged sections keep their discriminant.
fn override_with_defaults(doc: &mut toml::Table, defaults: Option<&toml::Table>, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    let mut fallback = defaults;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let seed = fallback.and_then(|d| d.get(*part)).and_then(|v| v.as_table());
        fallback = seed;
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(seed.cloned().unwrap_or_default()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override `{key}`: `{}` is not a table", parts[..=i].join(".")))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}
