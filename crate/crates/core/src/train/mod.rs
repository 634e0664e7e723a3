//! Optimisation loop: schedules, SGD, per-variant loss assembly, and the
//! experiment runner.

mod config;
mod experiment;
mod metrics;

pub use config::{
    apply_override, AugmentConfig, DataConfig, DataSource, EvalConfig, ExperimentConfig, LossConfig, LpConfig,
    Method, MiRows, ModelConfig, OptimConfig, OutputConfig, Schedule, TeacherConfig, TrainConfig,
};
pub use experiment::{
    load_source, prepare_data, render_report, report, run_experiment, run_seeds, sequester, summarize, sweep,
    write_report_csv, PreparedData, ReportRow, RunOutput, SequesterRow, SUMMARY_COLUMNS,
};
pub use metrics::{
    evaluate, mean_std, read_csv_rows, CsvRow, EpochLosses, EvalMetrics, MetricsRecord, MetricsWriter,
    TypeMetrics, METRICS_COLUMNS,
};

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    augment_rows, compose_batch, expand_hard_replicas, AugmentPolicy, ComposedBatch, Dataset, Modality, SplitPlan,
};
use crate::error::{Error, Result};
use crate::labelprop::{
    assign_pseudo_labels, build_knn_graph, diffuse, extract_embeddings, PseudoLabelSet, SolverConfig,
};
use crate::losses::{nodes, FixMatchConfig};
use crate::model::{
    build_forward, init_params, predict, ClassifierConfig, DropoutMasks, EmaTeacher, Mode, ParamNodes, ParamSet,
};
use crate::numcore::{Bindings, Graph, NodeId};

/// Learning rate for `epoch` (0-based).
pub fn cosine_lr(epoch: usize, optim: &OptimConfig) -> Result<f64> {
    let horizon = optim.horizon();
    if epoch > horizon {
        return Err(Error::BeyondHorizon { epoch, horizon });
    }
    Ok(match optim.schedule {
        Schedule::Cosine { .. } => {
            if horizon == 0 {
                optim.lr
            } else {
                optim.lr * 0.5 * (1.0 + (PI * epoch as f64 / horizon as f64).cos())
            }
        }
        Schedule::Cycle { fraction } => {
            if optim.epochs == 0 {
                optim.lr
            } else {
                optim.lr * (fraction * PI * epoch as f64 / optim.epochs as f64).cos()
            }
        }
    })
}

/// `v <- m v + g; theta <- theta - lr v`.
pub fn sgd_step(theta: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if theta.len() != grads.len() || theta.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd: {} parameters, {} gradients, {} velocities",
            theta.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("index {i}")));
    }
    for ((t, g), v) in theta.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a [`ParamSet`], with optional max-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64, max_grad_norm: Option<f64>) -> Self {
        Self {
            momentum,
            max_grad_norm,
            velocity: vec![0.0; len],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &ParamSet, grads: &[f64], lr: f64) -> Result<ParamSet> {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = params
                .layout()
                .iter()
                .find(|s| s.range().contains(&i))
                .map_or("?", |s| s.name.as_str());
            return Err(Error::NonFiniteGradient(format!("{name} (flat index {i})")));
        }
        let mut g = grads.to_vec();
        if let Some(max) = self.max_grad_norm {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > max {
                g.iter_mut().for_each(|x| *x *= max / norm);
            }
        }
        let mut theta = params.values().to_vec();
        sgd_step(&mut theta, &g, lr, self.momentum, &mut self.velocity)?;
        params.with_values(theta)
    }
}

/// Independent RNG streams, keyed by purpose and position in the run, so
/// that one variant drawing extra randomness never shifts another's.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Init = 1,
    Compose = 2,
    Light = 3,
    Hard = 4,
    TeacherView = 5,
    Dropout = 6,
}

fn stream_rng(seed: u64, stream: Stream, epoch: usize, batch: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((stream as u64) << 56)
        | ((epoch as u64 & 0x0FFF_FFFF) << 28)
        | ((batch as u64 & 0x000F_FFFF) << 8)
        | (k as u64 & 0xFF);
    rng.set_stream(id);
    rng
}

fn stream_seed(seed: u64, stream: Stream, epoch: usize, batch: usize, k: usize) -> u64 {
    stream_rng(seed, stream, epoch, batch, k).random()
}

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l_s: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub l_fixmatch: f64,
    pub l_pseudo: f64,
}

/// Mutable training state: student, optimiser, teacher and pseudo labels.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub sgd: Sgd,
    pub teacher: Option<EmaTeacher>,
    /// Indexed by training-set sample.
    pub pseudo: Option<PseudoLabelSet>,
}

/// Owns the state of one run over a fixed training set and split.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Dataset,
    pub plan: SplitPlan,
    pub modality: Modality,
    pub light: AugmentPolicy,
    pub hard: AugmentPolicy,
    pub state: TrainState,
}

/// Classifier shape for `data` under `model`.
pub fn classifier_for(data: &Dataset, cfg: &TrainConfig) -> Result<ClassifierConfig> {
    let c = ClassifierConfig {
        input_dim: data.dim(),
        hidden_layers: cfg.model.hidden_layers.clone(),
        classes: data.classes(),
        dropout_rate: cfg.model.dropout_rate,
        use_dropout: cfg.model.use_dropout,
        conv_frontend: cfg.model.conv_frontend,
        image: data.image(),
    };
    c.validate()?;
    Ok(c)
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset, plan: SplitPlan) -> Result<Self> {
        cfg.validate()?;
        let model = classifier_for(data, &cfg)?;
        let params = init_params(&model, stream_seed(cfg.seed, Stream::Init, 0, 0, 0))?;
        let modality = data.modality();
        let (light, hard) = match modality {
            Modality::Vector => (AugmentPolicy::light_vector(), AugmentPolicy::hard_vector()),
            Modality::Image(_) => (AugmentPolicy::light_image(), AugmentPolicy::hard_image()),
        };
        let light = cfg.augment.light.clone().unwrap_or(light);
        let hard = cfg.augment.hard.clone().unwrap_or(hard);
        let teacher = if cfg.method.uses_teacher() {
            Some(EmaTeacher::new(params.clone(), cfg.teacher.mu)?)
        } else {
            None
        };
        let sgd = Sgd::new(params.len(), cfg.optim.momentum, cfg.optim.max_grad_norm);
        Ok(Self {
            cfg,
            data,
            plan,
            modality,
            light,
            hard,
            state: TrainState {
                params,
                sgd,
                teacher,
                pseudo: None,
            },
        })
    }

    /// `alpha` for `epoch`, including the optional linear warm-up.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        let w = self.cfg.loss.alpha_warmup;
        if w == 0 {
            self.cfg.loss.alpha
        } else {
            self.cfg.loss.alpha * ((epoch + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// Labelled rows per batch: the configured size, capped by the pool.
    pub fn labeled_batch(&self) -> usize {
        self.cfg.optim.labeled_batch.min(self.plan.labeled.len())
    }

    /// Draws the batch for `(epoch, batch)` with its light view, and hard
    /// views when the method needs them.
    pub fn compose(&self, epoch: usize, batch: usize) -> Result<ComposedBatch> {
        let seed = self.cfg.seed;
        let mut rng = stream_rng(seed, Stream::Compose, epoch, batch, 0);
        let b = compose_batch(
            self.data,
            &self.plan,
            self.cfg.optim.ratio,
            self.labeled_batch(),
            &mut rng,
        )?;
        let mut rng = stream_rng(seed, Stream::Light, epoch, batch, 0);
        let b = b.with_light_view(self.modality, &self.light, &mut rng)?;
        if self.cfg.method.uses_hard_views() {
            let mut rng = stream_rng(seed, Stream::Hard, epoch, batch, 0);
            expand_hard_replicas(b, self.cfg.augment.hard_replicas, self.modality, &self.hard, &mut rng)
        } else {
            Ok(b)
        }
    }

    /// Rebuilds pseudo labels from the current student by label
    /// propagation. Optionally dumps the graph and scores into `dump`.
    pub fn refresh_pseudo_labels(&mut self, dump: Option<&Path>) -> Result<()> {
        let emb = extract_embeddings(&self.state.params, self.data)?;
        let k = self.cfg.lp.k.min(self.data.len().saturating_sub(1));
        let graph = build_knn_graph(&emb, k, self.cfg.lp.kappa)?;
        let mut seeds = vec![None; self.data.len()];
        for &i in &self.plan.labeled {
            seeds[i] = Some(self.data.labels()[i]);
        }
        let solver = SolverConfig {
            tolerance: self.cfg.lp.tolerance,
            max_iterations: self.cfg.lp.max_iterations,
        };
        let z = diffuse(&graph, &seeds, self.data.classes(), &solver)?;
        if let Some(dir) = dump {
            graph.write_triplets(&dir.join("affinity.txt"))?;
            z.write_csv(&dir.join("diffusion.csv"))?;
        }
        self.state.pseudo = Some(assign_pseudo_labels(&z, &self.plan, self.data.labels(), self.cfg.lp.top_k)?);
        Ok(())
    }

    /// Accuracy of the active pseudo labels on unlabelled samples.
    pub fn pseudo_accuracy(&self) -> Option<f64> {
        let p = self.state.pseudo.as_ref()?;
        let active: Vec<usize> = self.plan.unlabeled.iter().copied().filter(|&i| p.weights[i] > 0.0).collect();
        if active.is_empty() {
            return Some(0.0);
        }
        let hits = active.iter().filter(|&&i| p.classes[i] == self.data.labels()[i]).count();
        Some(hits as f64 / active.len() as f64)
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, batch: &ComposedBatch, epoch: usize, index: usize, lr: f64) -> Result<StepLosses> {
        let method = self.cfg.method;
        let seed = self.cfg.seed;
        let params = &self.state.params;
        let model = params.config().clone();
        let rows = batch.len();
        let classes = model.classes;
        let light = batch
            .light
            .as_ref()
            .ok_or_else(|| Error::InvalidValue("batch has no light view".into()))?;

        let mut g = Graph::new();
        let pn = ParamNodes::declare(&mut g, params, "s.");
        let mut bind = Bindings::new();
        params.bind("s.", &mut bind);

        let x_light = g.input("x.light");
        bind.insert("x.light".into(), light.clone());
        let light_seed = stream_seed(seed, Stream::Dropout, epoch, index, 0);
        let mut masks = DropoutMasks::new(light_seed, model.dropout_rate);
        let student = build_forward(&mut g, &model, &pn, x_light, rows, model.use_dropout.then_some(&mut masks));

        let l_s = nodes::supervised_ce(&mut g, student.probs, rows, classes, &batch.labeled_rows())?;
        let mut terms: Vec<(NodeId, f64)> = vec![(l_s, 1.0)];
        let mut probes = vec![l_s];
        let mut slots = [None; 4];

        let mut hard_probs = Vec::new();
        for (k, view) in batch.hard.iter().enumerate() {
            let name = format!("x.hard{k}");
            let x = g.input(&name);
            bind.insert(name, view.clone());
            let mut masks = DropoutMasks::new(stream_seed(seed, Stream::Dropout, epoch, index, k + 1), model.dropout_rate);
            let f = build_forward(&mut g, &model, &pn, x, rows, model.use_dropout.then_some(&mut masks));
            hard_probs.push(f.probs);
        }

        if method.uses_mi() {
            let mask: Option<Vec<bool>> = match self.cfg.loss.mi_rows {
                MiRows::All => None,
                MiRows::Unlabeled => Some((0..rows).map(|r| r < batch.unlabeled_count).collect()),
            };
            if mask.as_ref().is_none_or(|m| m.iter().any(|&b| b)) {
                let mut mis = Vec::new();
                for &hp in &hard_probs {
                    let mi = nodes::mi_between(&mut g, student.probs, hp, rows, classes, mask.as_deref())?;
                    mis.push((mi, 1.0 / hard_probs.len() as f64));
                }
                let l_u = nodes::linear_combination(&mut g, &mis);
                terms.push((l_u, -self.alpha_at(epoch)));
                slots[0] = Some(probes.len());
                probes.push(l_u);
            }
        }

        if let Some(teacher) = &self.state.teacher {
            let mut rng = stream_rng(seed, Stream::TeacherView, epoch, index, 0);
            let view = augment_rows(&batch.base, self.modality, &self.light, &mut rng)?;
            let t_seed = stream_seed(seed, Stream::Dropout, epoch, index, 255);
            let target = predict(teacher.params(), &view, Mode::Train, t_seed)?;
            let t = g.constant(target.to_tensor());
            let l_c = nodes::consistency_mse(&mut g, t, student.probs, rows);
            terms.push((l_c, self.cfg.loss.beta));
            slots[1] = Some(probes.len());
            probes.push(l_c);
        }

        if method.uses_fixmatch() {
            // the same dropout seed reproduces the student's light pass
            let weak = predict(params, light, Mode::Train, light_seed)?;
            let fm_cfg = FixMatchConfig {
                threshold: self.cfg.loss.fixmatch_threshold,
                normalization: self.cfg.loss.fixmatch_normalization,
            };
            let mut fms = Vec::new();
            for &hp in &hard_probs {
                let fm = nodes::fixmatch(&mut g, &weak, hp, &fm_cfg)?;
                fms.push((fm, 1.0 / hard_probs.len() as f64));
            }
            let l_fm = nodes::linear_combination(&mut g, &fms);
            terms.push((l_fm, 1.0));
            slots[2] = Some(probes.len());
            probes.push(l_fm);
        }

        if let Some(pseudo) = &self.state.pseudo {
            let entries: Vec<(usize, usize, f64)> = (0..batch.unlabeled_count)
                .filter_map(|r| {
                    let i = batch.indices[r];
                    (pseudo.weights[i] > 0.0).then(|| (r, pseudo.classes[i], pseudo.weights[i]))
                })
                .collect();
            if !entries.is_empty() {
                let l_p = nodes::weighted_pseudo_ce(&mut g, student.probs, rows, classes, &entries)?;
                terms.push((l_p, 1.0));
                slots[3] = Some(probes.len());
                probes.push(l_p);
            }
        }

        let total = nodes::linear_combination(&mut g, &terms);
        g.set_output(total);
        let names = params.input_names("s.");
        let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
        let (value, probed, grads) = g.probe_and_gradients(&bind, &wrt, &probes)?;
        let flat = params.flatten_grads("s.", &grads)?;
        let next = self.state.sgd.step(params, &flat, lr)?;
        self.state.params = next;
        if let Some(t) = self.state.teacher.as_mut() {
            t.update(&self.state.params)?;
        }
        let read = |slot: Option<usize>| slot.map_or(0.0, |i| probed[i].item().unwrap_or(0.0));
        Ok(StepLosses {
            total: value,
            l_s: probed[0].item().unwrap_or(0.0),
            l_u: read(slots[0]),
            l_c: read(slots[1]),
            l_fixmatch: read(slots[2]),
            l_pseudo: read(slots[3]),
        })
    }

    /// Runs all batches of `epoch` (0-based) and returns mean losses.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochLosses> {
        let lr = cosine_lr(epoch, &self.cfg.optim)?;
        let n = self.cfg.optim.batches_per_epoch;
        let mut acc = EpochLosses::default();
        for b in 0..n {
            let batch = self.compose(epoch, b)?;
            let s = self.step(&batch, epoch, b, lr)?;
            acc.total += s.total;
            acc.l_s += s.l_s;
            acc.l_u += s.l_u;
            acc.l_c += s.l_c;
            acc.l_fixmatch += s.l_fixmatch;
            acc.l_pseudo += s.l_pseudo;
        }
        let nf = n as f64;
        Ok(EpochLosses {
            total: acc.total / nf,
            l_s: acc.l_s / nf,
            l_u: acc.l_u / nf,
            l_c: acc.l_c / nf,
            l_fixmatch: acc.l_fixmatch / nf,
            l_pseudo: acc.l_pseudo / nf,
        })
    }
}
