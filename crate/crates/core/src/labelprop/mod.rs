//! Graph-based pseudo-labelling: embeddings, k-NN affinity graph, diffusion
//! and confidence-weighted label assignment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::{argmax, entropy};
use crate::model::{penultimate, ParamSet};

/// Row-normalised embeddings, one row per dataset sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
    degenerate: bool,
}

impl EmbeddingMatrix {
    /// L2-normalises each row. A zero row has no direction; it is replaced
    /// by the constant unit vector and the matrix is flagged degenerate.
    pub fn normalized(rows: usize, dim: usize, mut values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != rows * dim {
            return Err(Error::Shape(format!("{} values for {rows} x {dim} embeddings", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("embeddings must be finite".into()));
        }
        let mut degenerate = false;
        let fill = 1.0 / (dim as f64).sqrt();
        for row in values.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                degenerate = true;
                row.iter_mut().for_each(|v| *v = fill);
            }
        }
        Ok(Self {
            rows,
            dim,
            values,
            degenerate,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// True when at least one row had zero norm before normalisation.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum()
    }
}

/// Eval-mode penultimate activations of every sample.
pub fn extract_embeddings(params: &ParamSet, ds: &Dataset) -> Result<EmbeddingMatrix> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let h = penultimate(params, &ds.rows_tensor(&all)?)?;
    EmbeddingMatrix::normalized(h.rows(), h.cols(), h.into_values())
}

/// Sparse symmetric affinity matrix. Neighbour lists are sorted by index
/// and may hold explicit zero weights (a neighbour at a non-positive inner
/// product).
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    neighbors: Vec<Vec<(usize, f64)>>,
    k: usize,
    kappa: f64,
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("diffusion coefficient must lie in (0, 1), got {kappa}")))
    }
}

impl AffinityGraph {
    /// Builds a graph from `(i, j, w)` triplets, symmetrising by maximum.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        let mut dense: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
        for &(i, j, w) in triplets {
            if i >= n || j >= n {
                return Err(Error::Shape(format!("edge ({i}, {j}) in a graph of {n} nodes")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidValue(format!("edge weight {w} must be finite and >= 0")));
            }
            if i == j {
                continue;
            }
            for (a, b) in [(i, j), (j, i)] {
                let e = dense[a].entry(b).or_insert(0.0);
                *e = e.max(w);
            }
        }
        let neighbors = dense.into_iter().map(|m| m.into_iter().collect()).collect();
        Ok(Self {
            neighbors,
            k: 0,
            kappa,
        })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .binary_search_by_key(&j, |e| e.0)
            .map_or(0.0, |p| self.neighbors[i][p].1)
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.neighbors[i].iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut w = vec![0.0; n * n];
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, v) in row {
                w[i * n + j] = v;
            }
        }
        w
    }

    /// `i j w` per line, both orientations, zero weights omitted.
    pub fn to_triplet_text(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row.iter().filter(|e| e.1 > 0.0) {
                let _ = writeln!(out, "{i} {j} {w:?}");
            }
        }
        out
    }

    pub fn write_triplets(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_triplet_text()).map_err(|e| Error::io(path, e))
    }

    /// `y = (I - kappa D^-1/2 W D^-1/2) x`. Isolated nodes keep `y = x`.
    fn apply(&self, inv_sqrt_deg: &[f64], x: &[f64], y: &mut [f64]) {
        for (i, row) in self.neighbors.iter().enumerate() {
            let s: f64 = row.iter().map(|&(j, w)| w * inv_sqrt_deg[j] * x[j]).sum();
            y[i] = x[i] - self.kappa * inv_sqrt_deg[i] * s;
        }
    }
}

/// The `k` largest inner products for each row, ties to the lower index.
pub fn knn_neighbors(emb: &EmbeddingMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = emb.rows();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k must satisfy 1 <= k < {n}, got {k}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scored.clear();
        scored.extend((0..n).filter(|&j| j != i).map(|j| (emb.dot(i, j), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        scored.select_nth_unstable_by(k - 1, cmp);
        let mut top: Vec<(f64, usize)> = scored[..k].to_vec();
        top.sort_by(cmp);
        out.push(top.into_iter().map(|e| e.1).collect());
    }
    Ok(out)
}

/// `W_ij = max(0, <e_i, e_j>)^3` over each row's `k` nearest neighbours,
/// then `W <- max(W, W^T)`.
pub fn build_knn_graph(emb: &EmbeddingMatrix, k: usize, kappa: f64) -> Result<AffinityGraph> {
    check_kappa(kappa)?;
    let nn = knn_neighbors(emb, k)?;
    let mut triplets = Vec::with_capacity(emb.rows() * k);
    for (i, row) in nn.iter().enumerate() {
        for &j in row {
            triplets.push((i, j, emb.dot(i, j).max(0.0).powi(3)));
        }
    }
    let mut g = AffinityGraph::from_triplets(emb.rows(), &triplets, kappa)?;
    g.k = k;
    Ok(g)
}

/// Conjugate-gradient settings for the diffusion solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Absolute bound on the Euclidean residual norm of each class column.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 2000,
        }
    }
}

/// Diffusion scores, `N x C` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        let header: Vec<String> = (0..self.classes).map(|c| format!("class{c}")).collect();
        w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
        for i in 0..self.rows {
            w.write_record(self.row(i).iter().map(|v| format!("{v:?}")))
                .map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Solves `(I - kappa D^-1/2 W D^-1/2) Z = Y` column by column, where `Y`
/// one-hot encodes `seeds` (`None` rows are zero), then clips `Z` at zero.
pub fn diffuse(
    graph: &AffinityGraph,
    seeds: &[Option<usize>],
    classes: usize,
    solver: &SolverConfig,
) -> Result<ScoreMatrix> {
    let n = graph.len();
    if seeds.len() != n {
        return Err(Error::Shape(format!("{} seed rows for a graph of {n} nodes", seeds.len())));
    }
    if let Some(&bad) = seeds.iter().flatten().find(|&&c| c >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    if seeds.iter().all(Option::is_none) {
        return Err(Error::InvalidValue("diffusion needs at least one labelled node".into()));
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d = graph.degree(i);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut values = vec![0.0; n * classes];
    for c in 0..classes {
        let b: Vec<f64> = seeds.iter().map(|s| if *s == Some(c) { 1.0 } else { 0.0 }).collect();
        let x = conjugate_gradient(graph, &inv_sqrt_deg, &b, solver)?;
        for (i, v) in x.into_iter().enumerate() {
            values[i * classes + c] = v.max(0.0);
        }
    }
    Ok(ScoreMatrix {
        rows: n,
        classes,
        values,
    })
}

fn conjugate_gradient(
    graph: &AffinityGraph,
    inv_sqrt_deg: &[f64],
    b: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for _ in 0..solver.max_iterations {
        if rr.sqrt() < solver.tolerance {
            return Ok(x);
        }
        graph.apply(inv_sqrt_deg, &p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let next = dot(&r, &r);
        let beta = next / rr;
        rr = next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() < solver.tolerance {
        return Ok(x);
    }
    Err(Error::NoConvergence {
        iterations: solver.max_iterations,
        residual: rr.sqrt(),
    })
}

/// Per-sample class assignments with confidence weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub classes: Vec<usize>,
    pub weights: Vec<f64>,
    /// Samples that received a label. Unmasked samples have weight 0.
    pub mask: Vec<bool>,
}

impl PseudoLabelSet {
    pub fn new(classes: Vec<usize>, weights: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if classes.len() != weights.len() || classes.len() != mask.len() {
            return Err(Error::Shape(format!(
                "pseudo labels: {} classes, {} weights, {} mask entries",
                classes.len(),
                weights.len(),
                mask.len()
            )));
        }
        let set = Self {
            classes,
            weights,
            mask,
        };
        set.check_weights()?;
        Ok(set)
    }

    fn check_weights(&self) -> Result<()> {
        if let Some(w) = self.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidValue(format!("confidence weight {w} outside [0, 1]")));
        }
        if let Some(i) = (0..self.len()).find(|&i| !self.mask[i] && self.weights[i] != 0.0) {
            return Err(Error::InvalidValue(format!("unmasked sample {i} has nonzero weight")));
        }
        Ok(())
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_weights()?;
        for i in 0..self.len() {
            if self.mask[i] && self.classes[i] >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: self.classes[i],
                    classes: num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Share of positively weighted samples whose class matches `truth`.
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        let active: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect();
        if active.is_empty() {
            return 0.0;
        }
        active.iter().filter(|&&i| self.classes[i] == truth[i]).count() as f64 / active.len() as f64
    }
}

/// `1 - H(p) / ln C` for the row rescaled to a distribution; 0 for a zero
/// row.
pub fn confidence_weight(row: &[f64]) -> f64 {
    let total: f64 = row.iter().sum();
    if total <= 0.0 || row.len() < 2 {
        return 0.0;
    }
    let p: Vec<f64> = row.iter().map(|v| v / total).collect();
    (1.0 - entropy(&p) / (row.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Labelled samples keep `truth` at weight 1; unlabelled samples take the
/// argmax of their diffusion row with entropy-based confidence. With
/// `top_k`, only the `k` most confident unlabelled samples keep a weight
/// (ties to the lower index).
pub fn assign_pseudo_labels(
    z: &ScoreMatrix,
    plan: &SplitPlan,
    truth: &[usize],
    top_k: Option<usize>,
) -> Result<PseudoLabelSet> {
    if truth.len() != z.rows {
        return Err(Error::Shape(format!("{} labels for {} score rows", truth.len(), z.rows)));
    }
    if z.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("diffusion scores must be finite".into()));
    }
    let mut classes = vec![0; z.rows];
    let mut weights = vec![0.0; z.rows];
    let mut mask = vec![false; z.rows];
    for &i in &plan.labeled {
        classes[i] = truth[i];
        weights[i] = 1.0;
        mask[i] = true;
    }
    for &i in &plan.unlabeled {
        let row = z.row(i);
        if row.iter().sum::<f64>() > 0.0 {
            classes[i] = argmax(row);
            weights[i] = confidence_weight(row);
            mask[i] = true;
        }
    }
    if let Some(k) = top_k {
        let mut ranked: Vec<usize> = plan.unlabeled.iter().copied().filter(|&i| mask[i]).collect();
        ranked.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        for &i in ranked.iter().skip(k) {
            weights[i] = 0.0;
            mask[i] = false;
        }
    }
    PseudoLabelSet::new(classes, weights, mask)
}
