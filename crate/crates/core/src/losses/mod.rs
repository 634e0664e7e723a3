//! Training objectives.
//!
//! Every loss exists twice: as a direct `f64` computation over
//! [`LikelihoodBatch`] values (used for reporting and as a reference), and as
//! a graph builder in [`nodes`] that the training loop differentiates.

pub mod nodes;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelprop::PseudoLabelSet;
use crate::numcore::{Tensor, LOG_FLOOR};

/// Joint-matrix entries at or below this are treated as `0 ln 0 = 0`.
pub const MI_EPS: f64 = 1e-12;

/// `N x C` matrix of per-sample class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodBatch {
    rows: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl LikelihoodBatch {
    pub fn new(rows: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if rows * classes != probs.len() || classes == 0 {
            return Err(Error::Shape(format!(
                "{rows}x{classes} likelihood batch with {} values",
                probs.len()
            )));
        }
        for (i, row) in probs.chunks(classes).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidValue(format!("row {i} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidValue(format!("row {i} sums to {total}")));
            }
        }
        Ok(Self {
            rows,
            classes,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("ragged likelihood rows".into()));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("expected a matrix, got {:?}", t.shape())));
        }
        Self::new(t.shape()[0], t.shape()[1], t.values().to_vec())
    }

    /// Every row equal to `row`.
    pub fn repeated(row: &[f64], rows: usize) -> Result<Self> {
        Self::new(rows, row.len(), row.repeat(rows))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn values(&self) -> &[f64] {
        &self.probs
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.classes, self.probs.clone()).expect("validated on construction")
    }

    /// Most probable class of row `i`; the lowest index wins ties.
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Batch-averaged prediction.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        for r in self.probs.chunks(self.classes) {
            for (o, p) in out.iter_mut().zip(r) {
                *o += p;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.rows as f64);
        out
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of a distribution, `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > MI_EPS)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Symmetrised `C x C` class co-occurrence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct JointMatrix {
    classes: usize,
    p: Vec<f64>,
}

impl JointMatrix {
    pub fn new(classes: usize, p: Vec<f64>) -> Result<Self> {
        if classes * classes != p.len() || classes == 0 {
            return Err(Error::Shape(format!("{classes}x{classes} joint with {} values", p.len())));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidValue("joint matrix entries must be finite and >= 0".into()));
        }
        for i in 0..classes {
            for j in 0..i {
                if (p[i * classes + j] - p[j * classes + i]).abs() > 1e-12 {
                    return Err(Error::InvalidValue(format!("joint matrix not symmetric at ({i},{j})")));
                }
            }
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!("joint matrix sums to {total}")));
        }
        Ok(Self { classes, p })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, c: usize, c2: usize) -> f64 {
        self.p[c * self.classes + c2]
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    /// Row sums `P_c`.
    pub fn row_marginal(&self) -> Vec<f64> {
        self.p.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    /// Column sums `P_c'`.
    pub fn col_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        for r in self.p.chunks(self.classes) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.0 }
    }
}

/// How the FixMatch sum is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixMatchNormalization {
    /// Divide by the full batch size; closed gates dilute the signal.
    #[default]
    AllRows,
    /// Divide by the number of rows whose gate is open.
    ConfidentRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixMatchConfig {
    pub threshold: f64,
    #[serde(default)]
    pub normalization: FixMatchNormalization,
}

impl FixMatchConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        let cfg = Self {
            threshold,
            normalization: FixMatchNormalization::AllRows,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "fixmatch threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for FixMatchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            normalization: FixMatchNormalization::AllRows,
        }
    }
}

fn check_same_shape(a: &LikelihoodBatch, b: &LikelihoodBatch) -> Result<()> {
    if a.rows != b.rows || a.classes != b.classes {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows, a.classes, b.rows, b.classes
        )));
    }
    Ok(())
}

/// `P = (Q + Q^T) / 2` with `Q = (1/N) sum_i z_a,i z_b,i^T`.
pub fn joint_matrix(za: &LikelihoodBatch, zb: &LikelihoodBatch) -> Result<JointMatrix> {
    joint_matrix_masked(za, zb, None)
}

/// [`joint_matrix`] over the rows selected by `mask`; `N` becomes the number
/// of selected rows.
pub fn joint_matrix_masked(
    za: &LikelihoodBatch,
    zb: &LikelihoodBatch,
    mask: Option<&[bool]>,
) -> Result<JointMatrix> {
    check_same_shape(za, zb)?;
    if let Some(m) = mask {
        if m.len() != za.rows {
            return Err(Error::Shape(format!("mask of {} rows for {} rows", m.len(), za.rows)));
        }
    }
    let selected: Vec<usize> = (0..za.rows)
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidValue("joint matrix needs at least one row pair".into()));
    }
    let c = za.classes;
    let mut q = vec![0.0; c * c];
    for &i in &selected {
        let (a, b) = (za.row(i), zb.row(i));
        for x in 0..c {
            for y in 0..c {
                q[x * c + y] += a[x] * b[y];
            }
        }
    }
    let n = selected.len() as f64;
    let mut p = vec![0.0; c * c];
    for x in 0..c {
        for y in 0..c {
            p[x * c + y] = (q[x * c + y] / n + q[y * c + x] / n) / 2.0;
        }
    }
    JointMatrix::new(c, p)
}

/// `sum P_cc' ln(P_cc' / (P_c P_c'))`.
pub fn mutual_information(p: &JointMatrix) -> f64 {
    let rows = p.row_marginal();
    let cols = p.col_marginal();
    let c = p.classes;
    let mut total = 0.0;
    for x in 0..c {
        for y in 0..c {
            let v = p.get(x, y);
            if v > MI_EPS {
                total += v * (v / (rows[x] * cols[y])).ln();
            }
        }
    }
    // rounding can leave a tiny negative value for independent joints
    total.max(0.0)
}

/// `(H(z), H(z|z'))`; their difference is the mutual information.
pub fn entropy_terms(p: &JointMatrix) -> (f64, f64) {
    let rows = p.row_marginal();
    let cols = p.col_marginal();
    let h_z = entropy(&rows);
    let c = p.classes;
    let mut h_cond = 0.0;
    for x in 0..c {
        for y in 0..c {
            let v = p.get(x, y);
            if v > MI_EPS {
                h_cond -= v * (v / cols[y]).ln();
            }
        }
    }
    (h_z, h_cond)
}

pub fn supervised_ce(z: &LikelihoodBatch, labels: &[usize]) -> Result<f64> {
    if labels.len() != z.rows {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), z.rows)));
    }
    if z.rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= z.classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: z.classes,
            });
        }
        total -= z.row(i)[y].max(LOG_FLOOR).ln();
    }
    Ok(total / z.rows as f64)
}

/// Confidence-weighted mean cross-entropy against pseudo labels. Returns 0
/// when every weight is zero.
pub fn weighted_pseudo_ce(z: &LikelihoodBatch, pseudo: &PseudoLabelSet) -> Result<f64> {
    if pseudo.len() != z.rows {
        return Err(Error::Shape(format!("{} pseudo labels for {} rows", pseudo.len(), z.rows)));
    }
    pseudo.validate(z.classes)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..z.rows {
        let w = pseudo.weights[i];
        if w == 0.0 {
            continue;
        }
        num -= w * z.row(i)[pseudo.classes[i]].max(LOG_FLOOR).ln();
        den += w;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// `(1/N) sum_i ||z_t,i - z_s,i||^2`.
pub fn consistency_mse(teacher: &LikelihoodBatch, student: &LikelihoodBatch) -> Result<f64> {
    check_same_shape(teacher, student)?;
    let sq: f64 = teacher
        .probs
        .iter()
        .zip(&student.probs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / teacher.rows as f64)
}

/// Euclidean distance between two distributions.
pub fn consistency_l2(z: &[f64], z2: &[f64]) -> Result<f64> {
    if z.len() != z2.len() {
        return Err(Error::Shape(format!("{} vs {} entries", z.len(), z2.len())));
    }
    Ok(z.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Rows whose weak maximum exceeds the threshold, with their hard pseudo
/// label.
pub fn fixmatch_targets(weak: &LikelihoodBatch, cfg: &FixMatchConfig) -> Vec<Option<usize>> {
    (0..weak.rows)
        .map(|i| {
            let k = weak.argmax(i);
            (weak.row(i)[k] > cfg.threshold).then_some(k)
        })
        .collect()
}

pub fn fixmatch_loss(
    weak: &LikelihoodBatch,
    strong: &LikelihoodBatch,
    cfg: &FixMatchConfig,
) -> Result<f64> {
    check_same_shape(weak, strong)?;
    let targets = fixmatch_targets(weak, cfg);
    let open = targets.iter().flatten().count();
    let total: f64 = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|k| -strong.row(i)[k].max(LOG_FLOOR).ln()))
        .sum();
    let denom = match cfg.normalization {
        FixMatchNormalization::AllRows => weak.rows,
        FixMatchNormalization::ConfidentRows => open,
    };
    Ok(if denom == 0 { 0.0 } else { total / denom as f64 })
}

/// `l_s - alpha * I(P(z_a, z_b))`.
pub fn muscle_loss(
    l_s: f64,
    za: &LikelihoodBatch,
    zb: &LikelihoodBatch,
    w: &LossWeights,
) -> Result<f64> {
    let mi = mutual_information(&joint_matrix(za, zb)?);
    Ok(l_s - w.alpha * mi)
}

/// `l_s - alpha * l_u + beta * l_c`.
pub fn total_loss(l_s: f64, l_u: f64, l_c: f64, w: &LossWeights) -> f64 {
    l_s - w.alpha * l_u + w.beta * l_c
}
