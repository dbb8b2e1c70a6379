//! Iterative RLHF rounds on the synthetic environment.
//!
//! Each round resamples the meta dataset from the current policy, trains a
//! reward model from a fresh initialization on the original preference data,
//! improves the policy against that reward model, and records metrics. The
//! preference data is generated once and never changes between rounds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::diagnostics::{reward_diff_distribution, DiffDistribution};
use crate::env::{
    improve_policy, mean_policy_reward, ood_shift, sample_meta, sample_meta_for_prompts,
    sample_preferences, EnvConfig, GaussianPolicy, ImproveConfig, MetaPrompts, OracleReward,
    Scorer,
};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelSpec, ParamVector};
use crate::objectives::{rm_accuracy, MetaSample, PreferencePair};
use crate::rng::stream;
use crate::trainer::{self, train, write_trace_csv, StepTrace, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RmMode {
    Vanilla,
    Metarm,
    /// Reuse the round-0 reward model (trained vanilla if round 0 is frozen too).
    Frozen,
}

impl std::str::FromStr for RmMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vanilla" => Ok(RmMode::Vanilla),
            "metarm" => Ok(RmMode::Metarm),
            "frozen" => Ok(RmMode::Frozen),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// One mode for every round, or an explicit per-round list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RmSchedule {
    All(RmMode),
    PerRound(Vec<RmMode>),
}

impl RmSchedule {
    pub fn mode(&self, round: usize) -> RmMode {
        match self {
            RmSchedule::All(m) => *m,
            RmSchedule::PerRound(v) => v[round],
        }
    }
}

/// Which prompts the meta dataset is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaSource {
    #[default]
    InDistribution,
    /// Prompts from the environment's out-of-distribution spec.
    Ood,
}

mod defaults {
    pub fn rounds() -> usize {
        4
    }
    pub fn rm_mode() -> super::RmSchedule {
        super::RmSchedule::All(super::RmMode::Metarm)
    }
    pub fn dataset_size() -> usize {
        2000
    }
    pub fn validation_size() -> usize {
        500
    }
    pub fn meta_size() -> usize {
        256
    }
    pub fn meta_k() -> usize {
        16
    }
    pub fn eval_prompts() -> usize {
        1000
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::rm_mode")]
    pub rm_mode: RmSchedule,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub env: EnvConfig,
    #[serde(default)]
    pub improve: ImproveConfig,
    /// Size of the preference dataset used for training.
    #[serde(default = "defaults::dataset_size")]
    pub dataset_size: usize,
    /// Held-out preference pairs for accuracy.
    #[serde(default = "defaults::validation_size")]
    pub validation_size: usize,
    /// Prompts in the meta dataset, resampled each round.
    #[serde(default = "defaults::meta_size")]
    pub meta_size: usize,
    /// Responses per meta prompt.
    #[serde(default = "defaults::meta_k")]
    pub meta_k: usize,
    #[serde(default)]
    pub meta_source: MetaSource,
    /// Prompts used for win rate and difference-distribution evaluation.
    #[serde(default = "defaults::eval_prompts")]
    pub eval_prompts: usize,
    /// Start each round's reward model from the previous round's parameters.
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentPlan {
    /// The synthetic task used throughout the test suites and README.
    pub fn default_task(mode: RmMode, seed: u64) -> Self {
        let prompt_dim = 4;
        let response_dim = 4;
        let mut env = EnvConfig::new(prompt_dim, response_dim);
        env.seed = seed;
        env.ood = Some(env.prompt.shifted(3.0));
        Self {
            rounds: defaults::rounds(),
            rm_mode: RmSchedule::All(mode),
            model: ModelSpec::new(prompt_dim, response_dim, vec![32, 32]).with_seed(seed),
            train: TrainConfig {
                eta: 1e-3,
                alpha: 1e-3,
                optimizer: trainer::OuterOptimizer::Adam,
                epochs: 4,
                eval_every: 25,
                seed,
                ..TrainConfig::default()
            },
            env,
            improve: ImproveConfig::default(),
            dataset_size: defaults::dataset_size(),
            validation_size: defaults::validation_size(),
            meta_size: defaults::meta_size(),
            meta_k: defaults::meta_k(),
            meta_source: MetaSource::InDistribution,
            eval_prompts: defaults::eval_prompts(),
            warm_start: false,
            seed,
        }
    }

    /// Propagates `seed` into every seeded component.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.env.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if let RmSchedule::PerRound(v) = &self.rm_mode {
            if v.len() != self.rounds {
                return Err(Error::config(
                    "rm_mode",
                    format!("{} modes listed for {} rounds", v.len(), self.rounds),
                ));
            }
        }
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        self.train.validate()?;
        self.env.validate()?;
        self.improve.validate()?;
        if self.model.prompt_dim != self.env.prompt_dim {
            return Err(Error::config("model.prompt_dim", "must equal env.prompt_dim"));
        }
        if self.model.response_dim != self.env.response_dim {
            return Err(Error::config("model.response_dim", "must equal env.response_dim"));
        }
        for (field, v) in [
            ("dataset_size", self.dataset_size),
            ("validation_size", self.validation_size),
            ("meta_size", self.meta_size),
            ("eval_prompts", self.eval_prompts),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.meta_k < 2 {
            return Err(Error::config("meta_k", "must be >= 2"));
        }
        if self.meta_source == MetaSource::Ood && self.env.ood.is_none() {
            return Err(Error::config("meta_source", "ood requires env.ood"));
        }
        Ok(())
    }

    pub fn mode(&self, round: usize) -> RmMode {
        self.rm_mode.mode(round)
    }
}

/// Metrics for one round, in `metrics.csv` column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Improved policy vs the initial policy, judged by the oracle.
    pub win_rate: f64,
    pub tie_rate: f64,
    pub lose_rate: f64,
    /// Reward-model accuracy on held-out preference pairs.
    pub rm_accuracy: f64,
    /// Variance of `|r(x,y1) - r(x,y2)|` over current-policy samples.
    pub diff_variance: f64,
    /// Mean oracle reward of the improved policy.
    pub mean_oracle_reward: f64,
}

impl RoundMetrics {
    pub const COLUMNS: [&'static str; 7] = [
        "round",
        "win_rate",
        "tie_rate",
        "lose_rate",
        "rm_accuracy",
        "diff_variance",
        "mean_oracle_reward",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub accuracy: f64,
    pub diff_variance: f64,
}

#[derive(Debug, Clone)]
pub struct RoundArtifacts {
    pub rm: ParamVector,
    pub trace: Vec<StepTrace>,
    /// Policy the round's reward model was evaluated on.
    pub policy: GaussianPolicy,
    pub diff: DiffDistribution,
    pub ood: Option<OodMetrics>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub rounds: Vec<RoundArtifacts>,
    pub final_policy: GaussianPolicy,
}

// Random stream tags. Evaluation streams depend only on (seed, round), so
// plans that differ only in reward-model mode see identical evaluation noise.
const DATA: u64 = 1;
const VALIDATION: u64 = 2;
const META: u64 = 10;
const IMPROVE: u64 = 11;
const WINRATE: u64 = 12;
const DIFF: u64 = 13;
const REWARD: u64 = 14;
const OOD_PAIRS: u64 = 20;
const OOD_DIFF: u64 = 21;

fn round_stream(seed: u64, tag: u64, round: usize) -> rand_chacha::ChaCha8Rng {
    stream(seed, tag * 1_000 + round as u64)
}

/// Preference data shared by every round of the experiment.
pub struct Datasets {
    pub train: Vec<PreferencePair>,
    pub validation: Vec<PreferencePair>,
}

pub fn build_datasets(plan: &ExperimentPlan, oracle: &OracleReward) -> Result<Datasets> {
    let policy = plan.env.initial_policy();
    let train = sample_preferences(
        &plan.env,
        oracle,
        &policy,
        plan.dataset_size,
        &mut stream(plan.env.seed, DATA),
    )?;
    let validation = sample_preferences(
        &plan.env,
        oracle,
        &policy,
        plan.validation_size,
        &mut stream(plan.env.seed, VALIDATION),
    )?;
    Ok(Datasets { train, validation })
}

/// Meta dataset for `round`, drawn from `policy`.
pub fn meta_dataset(
    plan: &ExperimentPlan,
    policy: &GaussianPolicy,
    data: &[PreferencePair],
    round: usize,
) -> Result<Vec<MetaSample>> {
    let mut rng = round_stream(plan.seed, META, round);
    let env = match plan.meta_source {
        MetaSource::InDistribution => plan.env.clone(),
        MetaSource::Ood => ood_shift(&plan.env)?,
    };
    match (plan.meta_source, env.meta_prompts) {
        (MetaSource::InDistribution, MetaPrompts::ReuseDataset) => {
            let prompts = data.iter().cycle().take(plan.meta_size).map(|p| p.prompt.clone());
            sample_meta_for_prompts(policy, prompts, plan.meta_k, &mut rng)
        }
        _ => sample_meta(&env, policy, plan.meta_size, plan.meta_k, &mut rng),
    }
}

/// Win/tie/lose of `policy` against `baseline`, one sample each per prompt.
pub fn win_rate(
    env: &EnvConfig,
    judge: &dyn Scorer,
    policy: &GaussianPolicy,
    baseline: &GaussianPolicy,
    prompts: usize,
    rng: &mut impl rand::Rng,
) -> (f64, f64, f64) {
    let (mut win, mut tie) = (0usize, 0usize);
    for _ in 0..prompts {
        let x = env.sample_prompt(rng);
        let a = judge.reward(&x, &policy.sample(&x, rng));
        let b = judge.reward(&x, &baseline.sample(&x, rng));
        if a > b {
            win += 1;
        } else if a == b {
            tie += 1;
        }
    }
    let n = prompts as f64;
    let lose = prompts - win - tie;
    (win as f64 / n, tie as f64 / n, lose as f64 / n)
}

/// OOD accuracy and difference variance of `rm` under the initial policy.
pub fn evaluate_ood(plan: &ExperimentPlan, rm: &ParamVector) -> Result<OodMetrics> {
    evaluate_ood_with_policy(plan, rm, &plan.env.initial_policy(), 0)
}

pub fn evaluate_ood_with_policy(
    plan: &ExperimentPlan,
    rm: &ParamVector,
    policy: &GaussianPolicy,
    round: usize,
) -> Result<OodMetrics> {
    let env = ood_shift(&plan.env)?;
    let oracle = OracleReward::from_env(&env)?;
    let pairs = sample_preferences(
        &env,
        &oracle,
        policy,
        plan.eval_prompts,
        &mut round_stream(plan.seed, OOD_PAIRS, round),
    )?;
    let diff = reward_diff_distribution(
        rm,
        policy,
        &env,
        plan.eval_prompts,
        1,
        &mut round_stream(plan.seed, OOD_DIFF, round),
    )?;
    Ok(OodMetrics {
        accuracy: rm_accuracy(rm, &pairs)?,
        diff_variance: diff.variance(),
    })
}

fn train_round(
    plan: &ExperimentPlan,
    mode: RmMode,
    init: &ParamVector,
    data: &Datasets,
    meta: &[MetaSample],
) -> Result<(ParamVector, Vec<StepTrace>)> {
    let train_mode = match mode {
        RmMode::Metarm => TrainMode::Metarm,
        RmMode::Vanilla | RmMode::Frozen => TrainMode::Vanilla,
    };
    let out = train(
        train_mode,
        init,
        &data.train,
        meta,
        &plan.train,
        Some(&data.validation),
    )?;
    Ok((out.params, out.trace))
}

/// Runs every round in memory.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResult> {
    run_rounds(plan, |_, _, _| Ok(()))
}

fn run_rounds(
    plan: &ExperimentPlan,
    mut on_round: impl FnMut(usize, &RoundMetrics, &RoundArtifacts) -> Result<()>,
) -> Result<ExperimentResult> {
    plan.validate()?;
    let oracle = OracleReward::from_env(&plan.env)?;
    let data = build_datasets(plan, &oracle)?;
    let initial = plan.env.initial_policy();
    let fresh = init_params(&plan.model)?;

    let mut policy = initial.clone();
    let mut metrics = Vec::with_capacity(plan.rounds);
    let mut rounds: Vec<RoundArtifacts> = Vec::with_capacity(plan.rounds);
    for round in 0..plan.rounds {
        let step = || -> Result<(RoundMetrics, RoundArtifacts, GaussianPolicy)> {
            let mode = plan.mode(round);
            let meta = meta_dataset(plan, &policy, &data.train, round)?;
            let (rm, trace) = match (mode, rounds.first()) {
                (RmMode::Frozen, Some(first)) => (first.rm.clone(), Vec::new()),
                _ => {
                    let init = match (plan.warm_start, rounds.last()) {
                        (true, Some(prev)) => &prev.rm,
                        _ => &fresh,
                    };
                    train_round(plan, mode, init, &data, &meta)?
                }
            };

            let next = improve_policy(
                &policy,
                &rm,
                &plan.env,
                &plan.improve,
                &mut round_stream(plan.seed, IMPROVE, round),
            )?;
            let (win, tie, lose) = win_rate(
                &plan.env,
                &oracle,
                &next,
                &initial,
                plan.eval_prompts,
                &mut round_stream(plan.seed, WINRATE, round),
            );
            let diff = reward_diff_distribution(
                &rm,
                &policy,
                &plan.env,
                plan.eval_prompts,
                1,
                &mut round_stream(plan.seed, DIFF, round),
            )?;
            let mean_reward = mean_policy_reward(
                &plan.env,
                &oracle,
                &next,
                plan.eval_prompts,
                &mut round_stream(plan.seed, REWARD, round),
            );
            let ood = match plan.env.ood {
                Some(_) => Some(evaluate_ood_with_policy(plan, &rm, &policy, round)?),
                None => None,
            };
            let m = RoundMetrics {
                round,
                win_rate: win,
                tie_rate: tie,
                lose_rate: lose,
                rm_accuracy: rm_accuracy(&rm, &data.validation)?,
                diff_variance: diff.variance(),
                mean_oracle_reward: mean_reward,
            };
            let art = RoundArtifacts {
                rm,
                trace,
                policy: policy.clone(),
                diff,
                ood,
            };
            Ok((m, art, next))
        };
        let (m, art, next) = step().map_err(|e| e.in_round(round))?;
        on_round(round, &m, &art).map_err(|e| e.in_round(round))?;
        metrics.push(m);
        rounds.push(art);
        policy = next;
    }
    Ok(ExperimentResult {
        metrics,
        rounds,
        final_policy: policy,
    })
}

pub const PLAN_FILE: &str = "plan.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const OOD_FILE: &str = "ood.csv";
pub const INCOMPLETE_MARKER: &str = ".incomplete";
pub const LOCK_FILE: &str = ".lock";

pub fn round_dir(out: &Path, round: usize) -> PathBuf {
    out.join(format!("round_{round}"))
}

pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| trainer::csv_io(path, e))?;
    w.write_record(RoundMetrics::COLUMNS)
        .map_err(|e| trainer::csv_io(path, e))?;
    for m in metrics {
        w.write_record([
            m.round.to_string(),
            m.win_rate.to_string(),
            m.tie_rate.to_string(),
            m.lose_rate.to_string(),
            m.rm_accuracy.to_string(),
            m.diff_variance.to_string(),
            m.mean_oracle_reward.to_string(),
        ])
        .map_err(|e| trainer::csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| trainer::csv_io(path, e))?;
    let headers = r.headers().map_err(|e| Error::parse(path, e))?.clone();
    if headers.iter().ne(RoundMetrics::COLUMNS) {
        return Err(Error::parse(path, "unexpected metrics columns"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| {
                Error::parse(path, format!("column {}: {e}", RoundMetrics::COLUMNS[i]))
            })
        };
        out.push(RoundMetrics {
            round: rec[0].parse().map_err(|e| Error::parse(path, e))?,
            win_rate: f(1)?,
            tie_rate: f(2)?,
            lose_rate: f(3)?,
            rm_accuracy: f(4)?,
            diff_variance: f(5)?,
            mean_oracle_reward: f(6)?,
        });
    }
    Ok(out)
}

fn write_ood_csv(path: &Path, rows: &[(usize, OodMetrics)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| trainer::csv_io(path, e))?;
    w.write_record(["round", "ood_accuracy", "ood_diff_variance"])
        .map_err(|e| trainer::csv_io(path, e))?;
    for (round, m) in rows {
        w.write_record([
            round.to_string(),
            m.accuracy.to_string(),
            m.diff_variance.to_string(),
        ])
        .map_err(|e| trainer::csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plan serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the experiment and writes its full output layout into `out`.
///
/// `out` must be empty or absent. An `.incomplete` marker is present for the
/// duration of the run and is left behind if a round fails.
pub fn run_experiment_to_dir(plan: &ExperimentPlan, out: &Path) -> Result<ExperimentResult> {
    plan.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
    write_json(&out.join(PLAN_FILE), plan)?;

    let mut ood_rows = Vec::new();
    let mut metrics_so_far = Vec::new();
    let result = run_rounds(plan, |round, m, art| {
        let dir = round_dir(out, round);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let meta = CheckpointMeta {
            seed: plan.model.seed,
            provenance: serde_json::json!({
                "round": round,
                "mode": plan.mode(round),
                "train_seed": plan.train.seed,
                "env_hash": plan.env.hash(),
            }),
        };
        checkpoint::save(&dir.join("rm.ckpt"), &art.rm, &meta)?;
        write_trace_csv(&dir.join("trace.csv"), &art.trace)?;
        art.diff.write_csv(&dir.join("diff.csv"))?;
        art.diff.write_json(&dir.join("diff.json"))?;
        if let Some(ood) = &art.ood {
            ood_rows.push((round, ood.clone()));
        }
        metrics_so_far.push(m.clone());
        write_metrics_csv(&out.join(METRICS_FILE), &metrics_so_far)
    })?;
    if !ood_rows.is_empty() {
        write_ood_csv(&out.join(OOD_FILE), &ood_rows)?;
    }
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(result)
}
