//! Graph builders for the losses, so the training loop can differentiate
//! them. Row and class counts are passed in because constants (targets,
//! masks) are sized at construction time.

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor, LOG_FLOOR};

use super::{fixmatch_targets, FixMatchConfig, FixMatchNormalization, LikelihoodBatch};

/// `P = (Z_a^T Z_b + Z_b^T Z_a) / (2n)`. With `mask`, unselected rows are
/// zeroed and `n` is the number of selected rows.
pub fn joint_matrix(
    g: &mut Graph,
    za: NodeId,
    zb: NodeId,
    rows: usize,
    classes: usize,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let (za, n) = match mask {
        None => (za, rows),
        Some(m) => {
            if m.len() != rows {
                return Err(Error::Shape(format!("mask of {} rows for {rows} rows", m.len())));
            }
            let n = m.iter().filter(|&&b| b).count();
            let values = m
                .iter()
                .flat_map(|&b| std::iter::repeat_n(if b { 1.0 } else { 0.0 }, classes))
                .collect();
            let mask = g.constant(Tensor::matrix(rows, classes, values)?);
            (g.mul(za, mask), n)
        }
    };
    if n == 0 {
        return Err(Error::InvalidValue("joint matrix needs at least one row pair".into()));
    }
    let at = g.transpose(za);
    let q = g.matmul(at, zb);
    let qt = g.transpose(q);
    let s = g.add(q, qt);
    Ok(g.scale(s, 0.5 / n as f64))
}

/// `sum P ln P - sum_c P_c ln P_c - sum_c' P_c' ln P_c'`, which equals
/// `sum P_cc' ln(P_cc' / (P_c P_c'))`.
pub fn mutual_information(g: &mut Graph, p: NodeId) -> NodeId {
    let plogp = |g: &mut Graph, x: NodeId| {
        let c = g.clamp_min(x, LOG_FLOOR);
        let l = g.log(c);
        let m = g.mul(x, l);
        g.sum(m)
    };
    let joint = plogp(g, p);
    let rows = g.sum_axis(p, 1);
    let cols = g.sum_axis(p, 0);
    let hr = plogp(g, rows);
    let hc = plogp(g, cols);
    let a = g.sub(joint, hr);
    g.sub(a, hc)
}

/// Mutual information between two row-aligned likelihood nodes.
pub fn mi_between(
    g: &mut Graph,
    za: NodeId,
    zb: NodeId,
    rows: usize,
    classes: usize,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let p = joint_matrix(g, za, zb, rows, classes, mask)?;
    Ok(mutual_information(g, p))
}

/// `-sum_(row, class, w) w * ln(max(z[row, class], floor))`.
pub fn cross_entropy(
    g: &mut Graph,
    z: NodeId,
    rows: usize,
    classes: usize,
    entries: &[(usize, usize, f64)],
) -> Result<NodeId> {
    let mut t = vec![0.0; rows * classes];
    for &(r, c, w) in entries {
        if r >= rows {
            return Err(Error::Shape(format!("target row {r} of {rows}")));
        }
        if c >= classes {
            return Err(Error::LabelOutOfRange { label: c, classes });
        }
        t[r * classes + c] += w;
    }
    let targets = g.constant(Tensor::matrix(rows, classes, t)?);
    let clamped = g.clamp_min(z, LOG_FLOOR);
    let logs = g.log(clamped);
    let weighted = g.mul(logs, targets);
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0))
}

/// Mean cross-entropy over the given `(row, label)` pairs.
pub fn supervised_ce(
    g: &mut Graph,
    z: NodeId,
    rows: usize,
    classes: usize,
    labelled: &[(usize, usize)],
) -> Result<NodeId> {
    let w = if labelled.is_empty() { 0.0 } else { 1.0 / labelled.len() as f64 };
    let entries: Vec<_> = labelled.iter().map(|&(r, y)| (r, y, w)).collect();
    cross_entropy(g, z, rows, classes, &entries)
}

/// Confidence-weighted mean cross-entropy over `(row, class, weight)`.
pub fn weighted_pseudo_ce(
    g: &mut Graph,
    z: NodeId,
    rows: usize,
    classes: usize,
    pseudo: &[(usize, usize, f64)],
) -> Result<NodeId> {
    if let Some(bad) = pseudo.iter().find(|p| !(0.0..=1.0).contains(&p.2)) {
        return Err(Error::InvalidValue(format!("confidence weight {} outside [0, 1]", bad.2)));
    }
    let total: f64 = pseudo.iter().map(|p| p.2).sum();
    let entries: Vec<_> = if total > 0.0 {
        pseudo.iter().map(|&(r, c, w)| (r, c, w / total)).collect()
    } else {
        vec![]
    };
    cross_entropy(g, z, rows, classes, &entries)
}

/// FixMatch loss on strong-view predictions. The weak predictions are plain
/// values, so no gradient can reach them.
pub fn fixmatch(
    g: &mut Graph,
    weak: &LikelihoodBatch,
    strong: NodeId,
    cfg: &FixMatchConfig,
) -> Result<NodeId> {
    let targets = fixmatch_targets(weak, cfg);
    let open = targets.iter().flatten().count();
    let denom = match cfg.normalization {
        FixMatchNormalization::AllRows => weak.rows(),
        FixMatchNormalization::ConfidentRows => open,
    };
    let w = if denom == 0 { 0.0 } else { 1.0 / denom as f64 };
    let entries: Vec<_> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|k| (i, k, w)))
        .collect();
    cross_entropy(g, strong, weak.rows(), weak.classes(), &entries)
}

/// `(1/N) sum_i ||teacher_i - student_i||^2`.
pub fn consistency_mse(g: &mut Graph, teacher: NodeId, student: NodeId, rows: usize) -> NodeId {
    let d = g.sub(teacher, student);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / rows as f64)
}

/// Euclidean distance between two equally shaped nodes.
pub fn consistency_l2(g: &mut Graph, z: NodeId, z2: NodeId) -> NodeId {
    let d = g.sub(z, z2);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    g.sqrt(s)
}

/// `sum_k coef_k * term_k`.
pub fn linear_combination(g: &mut Graph, terms: &[(NodeId, f64)]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &(node, coef) in terms {
        let scaled = if coef == 1.0 { node } else { g.scale(node, coef) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled),
        });
    }
    acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}
