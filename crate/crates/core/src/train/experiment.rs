//! End-to-end runs: data preparation, multi-seed repetition, sweeps, the
//! sequestered-class protocol and result aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{
    load_dataset, make_synthetic, sequester_classes, split_labeled, DataFormat, Dataset, SplitPlan, CLASS_TYPE_NAMES,
};
use crate::error::{Error, Result};
use crate::model::{predict, Checkpoint, EmaTeacher, Mode, ParamSet};

use super::config::{DataSource, ExperimentConfig, Method};
use super::metrics::{evaluate, fmt_f64, mean_std, read_csv_rows, EvalMetrics, MetricsRecord, MetricsWriter};
use super::{cosine_lr, stream_rng, Stream, Trainer};

/// Training and test data for one seed.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Training targets (superclasses in sequestered runs).
    pub train: Dataset,
    pub test: Dataset,
    pub plan: SplitPlan,
    /// Class type of each test sample in sequestered runs.
    pub test_types: Option<Vec<usize>>,
}

/// Loads or generates the full dataset named by the config.
pub fn load_source(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let spec = d.synthetic.as_ref().ok_or_else(|| Error::Config("data.synthetic: missing".into()))?;
            make_synthetic(spec)
        }
        DataSource::Csv => load_dataset(d.path.as_deref().expect("validated"), &DataFormat::Csv),
        DataSource::Idx => load_dataset(
            d.path.as_deref().expect("validated"),
            &DataFormat::IdxImages {
                labels: d.labels_path.clone().expect("validated"),
            },
        ),
    }
}

/// Splits `full` into train/test (fixed by `data.split_seed`) and draws the
/// labelled subset for `seed`.
pub fn prepare_data(cfg: &ExperimentConfig, full: &Dataset, seed: u64) -> Result<PreparedData> {
    let (train, test) = full.train_test_split(cfg.data.test_fraction, cfg.data.split_seed)?;
    if !cfg.data.sequester {
        let plan = split_labeled(&train, cfg.data.labels_per_class, seed)?;
        return Ok(PreparedData {
            train,
            test,
            plan,
            test_types: None,
        });
    }
    let seq = sequester_classes(&train, seed)?;
    if seq.degenerate {
        return Err(Error::Config("data.sequester: every subclass would be sequestered".into()));
    }
    let plan = seq.split(&train, cfg.data.labels_per_class, seed)?;
    let types = seq.class_types(train.classes());
    let test_types = test.labels().iter().map(|&y| types[y]).collect();
    Ok(PreparedData {
        train: train.to_superclass_targets()?,
        test: test.to_superclass_targets()?,
        plan,
        test_types: Some(test_types),
    })
}

/// Result of one seed.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub params: ParamSet,
    pub teacher: Option<EmaTeacher>,
}

impl RunOutput {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("a run always has its initial record")
    }
}

fn eval_params(params: &ParamSet, data: &PreparedData, top_k: usize) -> Result<EvalMetrics> {
    let all: Vec<usize> = (0..data.test.len()).collect();
    let probs = predict(params, &data.test.rows_tensor(&all)?, Mode::Eval, 0)?;
    let types = data.test_types.as_deref().map(|t| (t, CLASS_TYPE_NAMES.len()));
    evaluate(&probs, data.test.labels(), top_k, types)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains one seed. With `out`, writes `metrics.csv` (flushed per epoch),
/// `timing.csv` and `checkpoint.json` there.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let full = load_source(cfg)?;
    run_prepared(cfg, &prepare_data(cfg, &full, seed)?, seed, out)
}

fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData, seed: u64, out: Option<&Path>) -> Result<RunOutput> {
    let tcfg = cfg.train_config(seed);
    let top_k = tcfg.eval.top_k;
    let epochs = tcfg.optim.epochs;
    let lp_start = tcfg.lp_start_epoch();
    let dump_lp = tcfg.lp.dump;
    let mut trainer = Trainer::new(tcfg, &data.train, data.plan.clone())?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let mut writer = out.map(|d| MetricsWriter::create(&d.join("metrics.csv"))).transpose()?;
    let mut timing = String::from("epoch,seconds\n");
    let start = Instant::now();
    let mut records = Vec::with_capacity(epochs + 1);

    let mut emit = |trainer: &Trainer, epoch, lr, losses, records: &mut Vec<MetricsRecord>| -> Result<()> {
        let rec = MetricsRecord {
            epoch,
            lr,
            losses,
            pseudo_accuracy: trainer.pseudo_accuracy(),
            student: eval_params(&trainer.state.params, data, top_k)?,
            teacher: trainer
                .state
                .teacher
                .as_ref()
                .map(|t| eval_params(t.params(), data, top_k))
                .transpose()?,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            w.write(&rec)?;
        }
        timing.push_str(&format!("{epoch},{}\n", rec.wall_clock));
        records.push(rec);
        Ok(())
    };

    emit(&trainer, 0, None, None, &mut records)?;
    for e in 0..epochs {
        if trainer.cfg.method.uses_label_propagation() && e >= lp_start {
            let dump = match out {
                Some(d) if dump_lp => {
                    let p = d.join("lp").join(format!("epoch-{}", e + 1));
                    create_dir(&p)?;
                    Some(p)
                }
                _ => None,
            };
            trainer.refresh_pseudo_labels(dump.as_deref())?;
        }
        let losses = trainer.train_epoch(e)?;
        let lr = cosine_lr(e, &trainer.cfg.optim)?;
        emit(&trainer, e + 1, Some(lr), Some(losses), &mut records)?;
    }

    if let Some(dir) = out {
        let p = dir.join("timing.csv");
        fs::write(&p, timing).map_err(|e| Error::io(&p, e))?;
        let next_rng = stream_rng(seed, Stream::Compose, epochs, 0, 0);
        Checkpoint::new(epochs, &trainer.state.params, trainer.state.teacher.as_ref(), Some(&next_rng))
            .save(&dir.join("checkpoint.json"))?;
    }
    Ok(RunOutput {
        seed,
        records,
        params: trainer.state.params.clone(),
        teacher: trainer.state.teacher.clone(),
    })
}

/// Summary CSV column order. The `seed` column holds `mean` and `std` on
/// the aggregate rows.
pub const SUMMARY_COLUMNS: [&str; 12] = [
    "seed",
    "top1",
    "topk",
    "entropy",
    "marginal_entropy",
    "teacher_top1",
    "teacher_topk",
    "teacher_entropy",
    "labeled_class_top1",
    "labeled_class_entropy",
    "unlabeled_class_top1",
    "unlabeled_class_entropy",
];

fn summary_values(r: &MetricsRecord) -> Vec<Option<f64>> {
    let t = r.teacher.as_ref();
    let ty = |i: usize| r.student.per_type.get(i).copied().flatten();
    vec![
        Some(r.student.top1),
        Some(r.student.topk),
        Some(r.student.entropy),
        Some(r.student.marginal_entropy),
        t.map(|t| t.top1),
        t.map(|t| t.topk),
        t.map(|t| t.entropy),
        ty(0).map(|m| m.top1),
        ty(0).map(|m| m.entropy),
        ty(1).map(|m| m.top1),
        ty(1).map(|m| m.entropy),
    ]
}

/// Per-seed rows of the final records, then `mean` and `std` (n - 1) rows.
pub fn summarize(runs: &[RunOutput]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let values: Vec<Vec<Option<f64>>> = runs.iter().map(|r| summary_values(r.last())).collect();
    for (run, v) in runs.iter().zip(&values) {
        let mut row = vec![run.seed.to_string()];
        row.extend(v.iter().map(|x| x.map(fmt_f64).unwrap_or_default()));
        rows.push(row);
    }
    let cols = SUMMARY_COLUMNS.len() - 1;
    let mut mean = vec!["mean".to_string()];
    let mut std = vec!["std".to_string()];
    for c in 0..cols {
        let col: Option<Vec<f64>> = values.iter().map(|v| v[c]).collect();
        match col {
            Some(col) if !col.is_empty() => {
                let (m, s) = mean_std(&col);
                mean.push(fmt_f64(m));
                std.push(s.map(fmt_f64).unwrap_or_default());
            }
            _ => {
                mean.push(String::new());
                std.push(String::new());
            }
        }
    }
    rows.push(mean);
    rows.push(std);
    rows
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    w.write_record(header).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every configured seed. With `out`, writes the config snapshot,
/// `seed-<s>/` run directories and `summary.csv`.
pub fn run_seeds(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    let full = load_source(cfg)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let p = dir.join("config.toml");
        fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    }
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, &full, seed)?;
        let dir = out.map(|d| d.join(format!("seed-{seed}")));
        runs.push(run_prepared(cfg, &data, seed, dir.as_deref())?);
    }
    if let Some(dir) = out {
        write_table(&dir.join("summary.csv"), &SUMMARY_COLUMNS, &summarize(&runs))?;
    }
    Ok(runs)
}

/// Directory-safe rendering of a sweep value.
fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One run group per value of `param`. All configs are validated before
/// any training starts. Writes `sweep.csv` keyed by value.
pub fn sweep(
    base_toml: &str,
    overrides: &[String],
    param: &str,
    values: &[String],
    out: Option<&Path>,
) -> Result<Vec<(String, Vec<RunOutput>)>> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over `{param}` needs at least one value")));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut o = overrides.to_vec();
        o.push(format!("{param}={v}"));
        configs.push((v.clone(), ExperimentConfig::from_toml_str(base_toml, &o)?));
    }
    let mut groups = Vec::new();
    let mut rows = Vec::new();
    for (v, cfg) in configs {
        let dir = out.map(|d| d.join(format!("{}={}", slug(param), slug(&v))));
        let runs = run_seeds(&cfg, dir.as_deref())?;
        for mut r in summarize(&runs) {
            r.insert(0, v.clone());
            r.insert(0, param.to_string());
            rows.push(r);
        }
        groups.push((v, runs));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut header = vec!["param", "value"];
        header.extend(SUMMARY_COLUMNS);
        write_table(&dir.join("sweep.csv"), &header, &rows)?;
    }
    Ok(groups)
}

/// One line of the sequestered-class table.
#[derive(Clone, Debug, PartialEq)]
pub struct SequesterRow {
    pub method: Method,
    pub class_type: &'static str,
    pub top1_mean: f64,
    pub top1_std: Option<f64>,
    pub entropy_mean: f64,
    pub entropy_std: Option<f64>,
}

/// Runs the configured method and the supervised baseline on the
/// sequestered-class protocol; writes `sequester.csv`.
pub fn sequester(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<SequesterRow>> {
    let mut cfg = cfg.clone();
    cfg.data.sequester = true;
    cfg.validate()?;
    let full = load_source(&cfg)?;
    if full.superclass_map().is_none() {
        return Err(Error::Config("data: sequestering needs a dataset with a superclass hierarchy".into()));
    }
    let ln_c = (full.superclass_count().unwrap_or(1).max(1) as f64).ln();
    let mut methods = vec![Method::Supervised];
    if cfg.method != Method::Supervised {
        methods.push(cfg.method);
    }
    let mut table = Vec::new();
    for method in methods {
        let mut c = cfg.clone();
        c.method = method;
        c.name = Some(method.name().to_string());
        let runs = run_seeds(&c, out.map(|d| d.join(method.name())).as_deref())?;
        for (t, name) in CLASS_TYPE_NAMES.iter().enumerate() {
            let per: Vec<_> = runs
                .iter()
                .filter_map(|r| r.last().student.per_type.get(t).copied().flatten())
                .collect();
            if per.is_empty() {
                continue;
            }
            let (top1_mean, top1_std) = mean_std(&per.iter().map(|m| m.top1).collect::<Vec<_>>());
            let (entropy_mean, entropy_std) = mean_std(&per.iter().map(|m| m.entropy).collect::<Vec<_>>());
            if !(0.0..=ln_c + 1e-9).contains(&entropy_mean) {
                return Err(Error::InvalidValue(format!(
                    "{name} entropy {entropy_mean} outside [0, ln C = {ln_c}]"
                )));
            }
            table.push(SequesterRow {
                method,
                class_type: name,
                top1_mean,
                top1_std,
                entropy_mean,
                entropy_std,
            });
        }
    }
    if let Some(dir) = out {
        let rows: Vec<Vec<String>> = table
            .iter()
            .map(|r| {
                vec![
                    r.method.name().to_string(),
                    r.class_type.to_string(),
                    fmt_f64(r.top1_mean),
                    r.top1_std.map(fmt_f64).unwrap_or_default(),
                    fmt_f64(r.entropy_mean),
                    r.entropy_std.map(fmt_f64).unwrap_or_default(),
                ]
            })
            .collect();
        write_table(
            &dir.join("sequester.csv"),
            &["method", "class_type", "top1_mean", "top1_std", "entropy_mean", "entropy_std"],
            &rows,
        )?;
    }
    Ok(table)
}

/// One line of the aggregate comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub method: Method,
    pub labels_per_class: usize,
    pub seeds_expected: usize,
    pub seeds_found: usize,
    pub top1_mean: f64,
    pub top1_std: Option<f64>,
    pub teacher_top1_mean: Option<f64>,
    pub teacher_top1_std: Option<f64>,
}

impl ReportRow {
    pub fn incomplete(&self) -> bool {
        self.seeds_found < self.seeds_expected
    }
}

fn find_runs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    if dir.join("config.toml").is_file() {
        found.push(dir.to_path_buf());
    }
    for p in entries {
        if p.is_dir() {
            find_runs(&p, found)?;
        }
    }
    Ok(())
}

fn final_value(rows: &[super::metrics::CsvRow], column: &str) -> Option<f64> {
    rows.last()?.get(column)?.parse().ok()
}

/// Aggregates every run directory (one holding `config.toml`) under
/// `results`. Runs missing seed files are reported as incomplete.
pub fn report(results: &Path) -> Result<Vec<ReportRow>> {
    if !results.is_dir() {
        return Err(Error::Config(format!("{}: not a results directory", results.display())));
    }
    let mut dirs = Vec::new();
    find_runs(results, &mut dirs)?;
    let mut rows = Vec::new();
    for dir in dirs {
        let cfg = ExperimentConfig::load(&dir.join("config.toml"), &[])?;
        let mut top1 = Vec::new();
        let mut teacher = Vec::new();
        for seed in &cfg.seeds {
            let p = dir.join(format!("seed-{seed}")).join("metrics.csv");
            if !p.is_file() {
                continue;
            }
            let recs = read_csv_rows(&p)?;
            if let Some(v) = final_value(&recs, "top1") {
                top1.push(v);
            }
            if let Some(v) = final_value(&recs, "teacher_top1") {
                teacher.push(v);
            }
        }
        if top1.is_empty() {
            continue;
        }
        let (top1_mean, top1_std) = mean_std(&top1);
        let (tm, ts) = if teacher.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&teacher);
            (Some(m), s)
        };
        let run = dir
            .strip_prefix(results)
            .ok()
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        rows.push(ReportRow {
            run,
            method: cfg.method,
            labels_per_class: cfg.data.labels_per_class,
            seeds_expected: cfg.seeds.len(),
            seeds_found: top1.len(),
            top1_mean,
            top1_std,
            teacher_top1_mean: tm,
            teacher_top1_std: ts,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no metrics found", results.display())));
    }
    Ok(rows)
}

/// Writes report rows as CSV.
pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                r.method.name().to_string(),
                r.labels_per_class.to_string(),
                r.seeds_found.to_string(),
                r.seeds_expected.to_string(),
                fmt_f64(r.top1_mean),
                opt(r.top1_std),
                opt(r.teacher_top1_mean),
                opt(r.teacher_top1_std),
                r.incomplete().to_string(),
            ]
        })
        .collect();
    write_table(
        path,
        &[
            "run",
            "method",
            "labels_per_class",
            "seeds_found",
            "seeds_expected",
            "top1_mean",
            "top1_std",
            "teacher_top1_mean",
            "teacher_top1_std",
            "incomplete",
        ],
        &table,
    )
}

/// Renders report rows as a fixed-width text table, one row per run.
pub fn render_report(rows: &[ReportRow]) -> String {
    let pct = |m: f64, s: Option<f64>| match s {
        Some(s) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        None => format!("{:.2}", 100.0 * m),
    };
    let mut by_budget: BTreeMap<usize, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        by_budget.entry(r.labels_per_class).or_default().push(r);
    }
    let mut out = format!(
        "{:<32} {:<18} {:>8} {:>18} {:>18} {:>7}\n",
        "run", "method", "labels", "top1 %", "teacher top1 %", "seeds"
    );
    for (_, group) in by_budget {
        for r in group {
            let teacher = r.teacher_top1_mean.map(|m| pct(m, r.teacher_top1_std)).unwrap_or_else(|| "-".into());
            let seeds = format!("{}/{}", r.seeds_found, r.seeds_expected);
            let flag = if r.incomplete() { " incomplete" } else { "" };
            out.push_str(&format!(
                "{:<32} {:<18} {:>8} {:>18} {:>18} {:>7}{flag}\n",
                r.run,
                r.method.name(),
                r.labels_per_class,
                pct(r.top1_mean, r.top1_std),
                teacher,
                seeds
            ));
        }
    }
    out
}
