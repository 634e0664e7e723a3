//! Per-epoch records, evaluation metrics and their CSV layout.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{entropy, LikelihoodBatch};

/// Accuracy and entropy over the samples of one class type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub count: usize,
    pub top1: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub topk: f64,
    /// Mean Shannon entropy of the predicted distributions.
    pub entropy: f64,
    /// Entropy of the batch-averaged prediction.
    pub marginal_entropy: f64,
    /// Indexed by class type; `None` when no sample has that type.
    pub per_type: Vec<Option<TypeMetrics>>,
}

/// True when `target` is among the `k` most probable classes (ties go to
/// the lower class index).
fn in_top_k(row: &[f64], target: usize, k: usize) -> bool {
    let p = row[target];
    let rank = row
        .iter()
        .enumerate()
        .filter(|&(c, &q)| q > p || (q == p && c < target))
        .count();
    rank < k
}

/// Scores predictions against `targets`. With `sample_types`, metrics are
/// also broken out per type (`types` of them).
pub fn evaluate(
    probs: &LikelihoodBatch,
    targets: &[usize],
    top_k: usize,
    sample_types: Option<(&[usize], usize)>,
) -> Result<EvalMetrics> {
    let n = probs.rows();
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} predictions", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= probs.classes()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: probs.classes(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidValue("cannot evaluate an empty set".into()));
    }
    let k = top_k.min(probs.classes());
    let mut top1 = 0usize;
    let mut topk = 0usize;
    let mut ent = 0.0;
    let types = sample_types.map_or(0, |t| t.1);
    let mut per = vec![(0usize, 0usize, 0.0f64); types];
    for i in 0..n {
        let row = probs.row(i);
        let hit = probs.argmax(i) == targets[i];
        let h = entropy(row);
        top1 += usize::from(hit);
        topk += usize::from(in_top_k(row, targets[i], k));
        ent += h;
        if let Some((st, _)) = sample_types {
            let slot = &mut per[st[i]];
            slot.0 += 1;
            slot.1 += usize::from(hit);
            slot.2 += h;
        }
    }
    let nf = n as f64;
    Ok(EvalMetrics {
        top1: top1 as f64 / nf,
        topk: topk as f64 / nf,
        entropy: ent / nf,
        marginal_entropy: entropy(&probs.mean_row()),
        per_type: per
            .into_iter()
            .map(|(count, hits, h)| {
                (count > 0).then(|| TypeMetrics {
                    count,
                    top1: hits as f64 / count as f64,
                    entropy: h / count as f64,
                })
            })
            .collect(),
    })
}

/// Mean training-loss components over one epoch's batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub total: f64,
    pub l_s: f64,
    /// Mutual information (the quantity maximised, reported positive).
    pub l_u: f64,
    pub l_c: f64,
    pub l_fixmatch: f64,
    pub l_pseudo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Rate used during this epoch; `None` for the initial record.
    pub lr: Option<f64>,
    pub losses: Option<EpochLosses>,
    /// Accuracy of positively weighted pseudo labels on unlabelled samples.
    pub pseudo_accuracy: Option<f64>,
    pub student: EvalMetrics,
    pub teacher: Option<EvalMetrics>,
    /// Seconds since the run started. Not part of the metrics CSV so that
    /// file stays reproducible bit for bit.
    pub wall_clock: f64,
}

/// Metrics CSV column order.
pub const METRICS_COLUMNS: [&str; 21] = [
    "epoch",
    "lr",
    "loss",
    "l_s",
    "l_u",
    "l_c",
    "l_fixmatch",
    "l_pseudo",
    "pseudo_acc",
    "top1",
    "topk",
    "entropy",
    "marginal_entropy",
    "teacher_top1",
    "teacher_topk",
    "teacher_entropy",
    "teacher_marginal_entropy",
    "labeled_class_top1",
    "labeled_class_entropy",
    "unlabeled_class_top1",
    "unlabeled_class_entropy",
];

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let l = self.losses;
        let t = self.teacher.as_ref();
        let ty = |i: usize| self.student.per_type.get(i).copied().flatten();
        vec![
            self.epoch.to_string(),
            opt(self.lr),
            opt(l.map(|l| l.total)),
            opt(l.map(|l| l.l_s)),
            opt(l.map(|l| l.l_u)),
            opt(l.map(|l| l.l_c)),
            opt(l.map(|l| l.l_fixmatch)),
            opt(l.map(|l| l.l_pseudo)),
            opt(self.pseudo_accuracy),
            fmt_f64(self.student.top1),
            fmt_f64(self.student.topk),
            fmt_f64(self.student.entropy),
            fmt_f64(self.student.marginal_entropy),
            opt(t.map(|t| t.top1)),
            opt(t.map(|t| t.topk)),
            opt(t.map(|t| t.entropy)),
            opt(t.map(|t| t.marginal_entropy)),
            opt(ty(0).map(|m| m.top1)),
            opt(ty(0).map(|m| m.entropy)),
            opt(ty(1).map(|m| m.top1)),
            opt(ty(1).map(|m| m.entropy)),
        ]
    }
}

/// Streams metrics rows, flushing after each so partial runs leave a
/// readable file.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::Writer::from_writer(file);
        inner
            .write_record(METRICS_COLUMNS)
            .map_err(|e| Error::Serde(e.to_string()))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner
            .write_record(record.csv_row())
            .map_err(|e| Error::Serde(e.to_string()))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Column -> value of one metrics CSV row, as written.
pub type CsvRow = std::collections::BTreeMap<String, String>;

pub fn read_csv_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: "open".into(),
        message: e.to_string(),
    })?;
    let headers = r.headers().map_err(|e| Error::Serde(e.to_string()))?.clone();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {}", i + 2),
            message: e.to_string(),
        })?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

/// Sample mean and `n - 1` standard deviation; the deviation is `None`
/// below two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}
