//! Command-line surface: dataset generation, training, iterated rounds,
//! the alignment probe, and report emission.
//!
//! Every subcommand reads one experiment plan (TOML, or the JSON written
//! into an experiment directory) and writes into an output directory that
//! must be empty unless `--force` is given.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta};
use crate::diagnostics::{normalize_distribution, variance_trajectory, DiffDistribution};
use crate::env::{read_meta, read_preferences, write_meta, write_preferences, OracleReward};
use crate::error::{Error, Result};
use crate::experiment::{
    build_datasets, meta_dataset, read_metrics_csv, round_dir, run_experiment_to_dir,
    ExperimentPlan, RmMode, RmSchedule, INCOMPLETE_MARKER, LOCK_FILE, METRICS_FILE,
};
use crate::model::init_params;
use crate::trainer::{alignment_probe, read_trace_csv, train, write_probe_json, write_trace_csv, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const META_FILE: &str = "meta.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "metarm", version, about = "Reward-model training with a meta-learned difference objective")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Print progress to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment plan (TOML, or JSON by extension). Built-in task when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides every seed in the plan.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample preference, validation, and meta datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one reward model on generated datasets.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "metarm")]
        mode: RmMode,
    },
    /// Run reward-model training and policy improvement for several rounds.
    Iterate {
        #[command(flatten)]
        common: Common,
        /// Use this mode for every round instead of the plan's schedule.
        #[arg(long)]
        mode: Option<RmMode>,
    },
    /// Measure how well the first-order expansion predicts per-pair loss changes.
    ProbeAlignment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Reward model to probe; a fresh initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.005,0.0025")]
        eta: Vec<f64>,
    },
    /// Summarize an experiment directory.
    Report {
        /// Directory written by `iterate`.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::InvalidConfig { .. } | Error::InvalidSpec(_) | Error::MissingOod => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `std::env::args`, runs the command, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let verbose = cli.verbose > 0;
    match &cli.command {
        Command::GenData { common } => {
            let plan = load_plan(common, None)?;
            let out = OutputDir::claim(&common.out, common.force)?;
            gen_data(&plan, out.path())?;
            out.finish()
        }
        Command::Train { common, data, mode } => {
            let train_mode = match mode {
                RmMode::Vanilla => TrainMode::Vanilla,
                RmMode::Metarm => TrainMode::Metarm,
                RmMode::Frozen => {
                    return Err(Error::config("mode", "frozen applies to iterate only"))
                }
            };
            let plan = load_plan(common, None)?;
            let out = OutputDir::claim(&common.out, common.force)?;
            train_cmd(&plan, data, train_mode, out.path(), verbose)?;
            out.finish()
        }
        Command::Iterate { common, mode } => {
            let plan = load_plan(common, *mode)?;
            let out = OutputDir::claim(&common.out, common.force)?;
            let result = run_experiment_to_dir(&plan, out.path())?;
            write_manifest(out.path(), "iterate", &plan, serde_json::json!({}))?;
            if verbose {
                for m in &result.metrics {
                    eprintln!("round {} win {:.3} acc {:.3}", m.round, m.win_rate, m.rm_accuracy);
                }
            }
            out.finish()
        }
        Command::ProbeAlignment {
            common,
            data,
            checkpoint: ckpt,
            eta,
        } => {
            let plan = load_plan(common, None)?;
            if eta.is_empty() || eta.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err(Error::config("eta", "step sizes must be positive"));
            }
            let out = OutputDir::claim(&common.out, common.force)?;
            let params = match ckpt {
                Some(path) => checkpoint::load(path)?.1,
                None => init_params(&plan.model)?,
            };
            let (_, pairs) = read_preferences(&data.join(PREFERENCES_FILE))?;
            let (_, meta) = read_meta(&data.join(META_FILE))?;
            let pref = &pairs[..plan.train.n.min(pairs.len())];
            let meta = &meta[..plan.train.m.min(meta.len())];
            let report = alignment_probe(&params, pref, meta, eta, plan.train.normalization())?;
            write_probe_json(&out.path().join("probe.json"), &report)?;
            out.finish()
        }
        Command::Report { dir, out, force } => {
            let out = OutputDir::claim(out, *force)?;
            let table = report(dir, out.path())?;
            print!("{table}");
            out.finish()
        }
    }
}

fn load_plan(common: &Common, mode: Option<RmMode>) -> Result<ExperimentPlan> {
    let mut plan = match &common.config {
        Some(path) => read_plan(path)?,
        None => ExperimentPlan::default_task(mode.unwrap_or(RmMode::Metarm), 0),
    };
    if let Some(seed) = common.seed {
        plan = plan.reseeded(seed);
    }
    if let Some(mode) = mode {
        plan.rm_mode = RmSchedule::All(mode);
    }
    plan.validate()?;
    Ok(plan)
}

/// Reads a plan from TOML, or JSON when the extension is `.json`.
pub fn read_plan(path: &Path) -> Result<ExperimentPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|reason| Error::config(path.display().to_string(), reason))
}

pub fn config_hash(plan: &ExperimentPlan) -> String {
    let json = serde_json::to_vec(plan).expect("plan serializes");
    hex::encode(Sha256::digest(&json))
}

fn write_manifest(
    out: &Path,
    command: &str,
    plan: &ExperimentPlan,
    extra: serde_json::Value,
) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        config_hash: String,
        env_hash: String,
        seed: u64,
        env_seed: u64,
        oracle_seed: u64,
        model_seed: u64,
        train_seed: u64,
        extra: serde_json::Value,
        plan: &'a ExperimentPlan,
    }
    let manifest = Manifest {
        command,
        config_hash: config_hash(plan),
        env_hash: plan.env.hash(),
        seed: plan.seed,
        env_seed: plan.env.seed,
        oracle_seed: plan.env.oracle_seed,
        model_seed: plan.model.seed,
        train_seed: plan.train.seed,
        extra,
        plan,
    };
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn gen_data(plan: &ExperimentPlan, out: &Path) -> Result<()> {
    let oracle = OracleReward::from_env(&plan.env)?;
    let data = build_datasets(plan, &oracle)?;
    let meta = meta_dataset(plan, &plan.env.initial_policy(), &data.train, 0)?;
    write_preferences(&out.join(PREFERENCES_FILE), &plan.env, &data.train)?;
    write_preferences(&out.join(VALIDATION_FILE), &plan.env, &data.validation)?;
    write_meta(&out.join(META_FILE), &plan.env, &meta)?;
    write_manifest(out, "gen-data", plan, serde_json::json!({}))
}

fn train_cmd(
    plan: &ExperimentPlan,
    data: &Path,
    mode: TrainMode,
    out: &Path,
    verbose: bool,
) -> Result<()> {
    let (header, pairs) = read_preferences(&data.join(PREFERENCES_FILE))?;
    let env_hash = plan.env.hash();
    if header.env_hash != env_hash {
        return Err(Error::config(
            "env",
            format!("datasets in {} were generated from a different env", data.display()),
        ));
    }
    let (_, validation) = read_preferences(&data.join(VALIDATION_FILE))?;
    let (_, meta) = read_meta(&data.join(META_FILE))?;
    let init = init_params(&plan.model)?;
    let output = train(mode, &init, &pairs, &meta, &plan.train, Some(&validation))?;
    if verbose {
        if let Some(last) = output.trace.last() {
            eprintln!("{} steps, final loss {:.4}, accuracy {:.3}", output.trace.len(), last.loss, last.accuracy);
        }
    }
    let meta_info = CheckpointMeta {
        seed: plan.model.seed,
        provenance: serde_json::json!({
            "mode": mode,
            "train_seed": plan.train.seed,
            "env_hash": env_hash,
        }),
    };
    checkpoint::save(&out.join("rm.ckpt"), &output.params, &meta_info)?;
    write_trace_csv(&out.join("trace.csv"), &output.trace)?;
    write_manifest(out, "train", plan, serde_json::json!({ "mode": mode }))
}

/// Writes the report files into `out` and returns the round summary table.
pub fn report(dir: &Path, out: &Path) -> Result<String> {
    let metrics = read_metrics_csv(&dir.join(METRICS_FILE))?;
    if metrics.is_empty() {
        return Err(Error::parse(dir.join(METRICS_FILE), "no rounds recorded"));
    }
    let mut dists = Vec::with_capacity(metrics.len());
    let mut traces = Vec::with_capacity(metrics.len());
    for m in &metrics {
        let rd = round_dir(dir, m.round);
        dists.push(DiffDistribution::read_csv(&rd.join("diff.csv"))?);
        traces.push(read_trace_csv(&rd.join("trace.csv"))?);
    }

    let path = out.join("variance_trajectory.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::trainer::csv_io(&path, e))?;
    w.write_record(["round", "variance"])
        .map_err(|e| crate::trainer::csv_io(&path, e))?;
    for ((_, var), m) in variance_trajectory(&dists)?.into_iter().zip(&metrics) {
        w.write_record([m.round.to_string(), var.to_string()])
            .map_err(|e| crate::trainer::csv_io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("accuracy.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::trainer::csv_io(&path, e))?;
    w.write_record(["round", "step", "accuracy", "loss"])
        .map_err(|e| crate::trainer::csv_io(&path, e))?;
    for (m, trace) in metrics.iter().zip(&traces) {
        for t in trace {
            w.write_record([
                m.round.to_string(),
                t.step.to_string(),
                t.accuracy.to_string(),
                t.loss.to_string(),
            ])
            .map_err(|e| crate::trainer::csv_io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    #[derive(Serialize)]
    struct RoundHistogram {
        round: usize,
        summary: crate::diagnostics::Summary,
        histogram: crate::diagnostics::Histogram,
    }
    let hists = metrics
        .iter()
        .zip(&dists)
        .map(|(m, d)| {
            let n = normalize_distribution(d)?;
            Ok(RoundHistogram {
                round: m.round,
                summary: n.summary,
                histogram: n.histogram,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("histograms.json");
    let mut text = serde_json::to_string_pretty(&hists).expect("histograms serialize");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let mut table = String::from("round    win    tie   lose  rm_acc   diff_var  oracle_reward\n");
    for m in &metrics {
        table.push_str(&format!(
            "{:>5} {:>6.3} {:>6.3} {:>6.3} {:>7.3} {:>10.4} {:>14.4}\n",
            m.round, m.win_rate, m.tie_rate, m.lose_rate, m.rm_accuracy, m.diff_variance, m.mean_oracle_reward
        ));
    }
    let path = out.join("summary.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    /// Creates `path` if absent. Refuses a directory holding an interrupted
    /// run, one locked by another process, or any non-empty directory
    /// unless `force` is set.
    pub fn claim(path: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        if path.join(INCOMPLETE_MARKER).exists() {
            return Err(Error::io(
                path,
                std::io::Error::other("directory holds an interrupted run; remove it first"),
            ));
        }
        let non_empty = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .any(|e| e.is_ok_and(|e| e.file_name() != LOCK_FILE));
        if non_empty && !force {
            return Err(Error::io(
                path,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output directory is not empty (use --force)",
                ),
            ));
        }
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::io(
                    &lock,
                    std::io::Error::new(e.kind(), "output directory is in use by another run"),
                ),
                _ => Error::io(&lock, e),
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn finish(self) -> Result<()> {
        fs::remove_file(&self.lock).map_err(|e| Error::io(&self.lock, e))?;
        std::mem::forget(self);
        Ok(())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[allow(dead_code)]
fn touch(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}
