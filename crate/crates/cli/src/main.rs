//! `muscle`: batch runner for training, sweeps, the sequestered-class
//! protocol and result reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use muscle::train::{self, ExperimentConfig};
use muscle::Error;

/// Default output root when neither `--out` nor `output.dir` is given.
const OUT_ENV: &str = "MUSCLE_OUT";

#[derive(Parser)]
#[command(name = "muscle", version, about = "Semi-supervised training with mutual-information consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, summary and checkpoints.
    Train(RunArgs),
    /// Repeat the experiment once per value of one config key.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Dotted config key, e.g. `optim.ratio`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. `0.5,1,2`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Compare the configured method with the supervised baseline on
    /// sequestered subclasses.
    Sequester(RunArgs),
    /// Aggregate finished runs into a mean ± std table.
    Report {
        /// Results directory (defaults to `$MUSCLE_OUT` or `runs`).
        dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key: `--set loss.alpha=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds, e.g. `0,1,2` or `0-4`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory for this run.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classified by exit code.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::MissingHierarchy => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_seeds(list: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::from(Error::Config(format!("--seeds: cannot parse `{list}`")));
    let mut seeds = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(item.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn default_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

struct Loaded {
    text: String,
    overrides: Vec<String>,
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> Result<Loaded, Failure> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| Failure::from(Error::Config(format!("{}: {e}", self.config.display()))))?;
        let mut overrides = self.set.clone();
        if let Some(list) = &self.seeds {
            let seeds = parse_seeds(list)?;
            let items: Vec<String> = seeds.iter().map(u64::to_string).collect();
            overrides.push(format!("seeds=[{}]", items.join(",")));
        }
        let cfg = ExperimentConfig::from_toml_str(&text, &overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", self.config.display())),
            other => other,
        })?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output.dir.clone())
            .unwrap_or_else(|| default_root().join(cfg.label()));
        Ok(Loaded {
            text,
            overrides,
            cfg,
            out,
        })
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn print_summary(runs: &[train::RunOutput]) {
    for r in runs {
        let last = r.last();
        let teacher = last.teacher.as_ref().map_or(String::new(), |t| format!("  teacher top1 {}%", pct(t.top1)));
        println!("seed {:>4}: top1 {}%{teacher}", r.seed, pct(last.student.top1));
    }
    let top1: Vec<f64> = runs.iter().map(|r| r.last().student.top1).collect();
    match train::mean_std(&top1) {
        (m, Some(s)) => println!("mean top1 {}% ± {}", pct(m), pct(s)),
        (m, None) => println!("mean top1 {}%", pct(m)),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let l = args.load()?;
            let runs = train::run_seeds(&l.cfg, Some(&l.out))?;
            print_summary(&runs);
            println!("results in {}", l.out.display());
        }
        Command::Sweep { run, param, values } => {
            let l = run.load()?;
            let groups = train::sweep(&l.text, &l.overrides, &param, &values, Some(&l.out))?;
            for (value, runs) in &groups {
                println!("{param}={value}");
                print_summary(runs);
            }
            println!("results in {}", l.out.join("sweep.csv").display());
        }
        Command::Sequester(args) => {
            let l = args.load()?;
            let rows = train::sequester(&l.cfg, Some(&l.out))?;
            println!("{:<18} {:<16} {:>10} {:>10}", "method", "class type", "top1 %", "entropy");
            for r in rows {
                println!(
                    "{:<18} {:<16} {:>10} {:>10.4}",
                    r.method.name(),
                    r.class_type,
                    pct(r.top1_mean),
                    r.entropy_mean
                );
            }
            println!("results in {}", l.out.join("sequester.csv").display());
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(default_root);
            let rows = train::report(&dir)?;
            print!("{}", train::render_report(&rows));
            for r in rows.iter().filter(|r| r.incomplete()) {
                eprintln!(
                    "warning: {}: {} of {} seeds have metrics",
                    r.run, r.seeds_found, r.seeds_expected
                );
            }
            train::write_report_csv(&dir.join("report.csv"), &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
