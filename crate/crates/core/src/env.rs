//! Synthetic stand-in for prompts, a drifting response policy, and the
//! labeller behind preference data.
//!
//! The oracle reward `r*` only ever leaves this module as a binary label
//! (which response of a pair won). Reward models never see oracle values
//! or oracle parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{init_params, score, FeatureInput, ModelSpec, ParamVector};
use crate::objectives::{sigmoid, MetaSample, PreferencePair};
use crate::rng::stream;

/// Isotropic Gaussian over prompt features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptDist {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl PromptDist {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Same scale, every coordinate of the mean moved by `offset`.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            mean: self.mean.iter().map(|m| m + offset).collect(),
            scale: self.scale,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .map(|m| m + self.scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    BernoulliBt,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Bilinear,
    Mlp,
}

/// Where meta-dataset prompts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaPrompts {
    /// Fresh draws from the prompt distribution.
    #[default]
    Fresh,
    /// Prompts of the preference dataset, cycled in order.
    ReuseDataset,
}

mod defaults {
    pub fn beta() -> f64 {
        5.0
    }
    pub fn sigma() -> f64 {
        1.0
    }
    pub fn oracle_seed() -> u64 {
        7
    }
    pub fn mlp_hidden() -> usize {
        16
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub prompt_dim: usize,
    pub response_dim: usize,
    pub prompt: PromptDist,
    /// Bradley-Terry label temperature.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default)]
    pub label_mode: LabelMode,
    /// Alternate prompt distribution for out-of-distribution evaluation.
    #[serde(default)]
    pub ood: Option<PromptDist>,
    #[serde(default)]
    pub oracle: OracleKind,
    #[serde(default = "defaults::oracle_seed")]
    pub oracle_seed: u64,
    /// Hidden width of the `mlp` oracle.
    #[serde(default = "defaults::mlp_hidden")]
    pub oracle_hidden: usize,
    /// Response spread of the initial policy.
    #[serde(default = "defaults::sigma")]
    pub initial_sigma: f64,
    #[serde(default)]
    pub meta_prompts: MetaPrompts,
    /// Seed for data sampling.
    #[serde(default)]
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(prompt_dim: usize, response_dim: usize) -> Self {
        Self {
            prompt_dim,
            response_dim,
            prompt: PromptDist::standard(prompt_dim),
            beta: defaults::beta(),
            label_mode: LabelMode::BernoulliBt,
            ood: None,
            oracle: OracleKind::Bilinear,
            oracle_seed: defaults::oracle_seed(),
            oracle_hidden: defaults::mlp_hidden(),
            initial_sigma: defaults::sigma(),
            meta_prompts: MetaPrompts::Fresh,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_dim == 0 {
            return Err(Error::config("prompt_dim", "must be positive"));
        }
        if self.response_dim == 0 {
            return Err(Error::config("response_dim", "must be positive"));
        }
        let check = |name: &str, d: &PromptDist| -> Result<()> {
            if d.mean.len() != self.prompt_dim {
                return Err(Error::config(
                    format!("{name}.mean"),
                    format!("length {} != prompt_dim {}", d.mean.len(), self.prompt_dim),
                ));
            }
            if !(d.scale >= 0.0 && d.scale.is_finite()) {
                return Err(Error::config(format!("{name}.scale"), "must be finite and >= 0"));
            }
            Ok(())
        };
        check("prompt", &self.prompt)?;
        if let Some(ood) = &self.ood {
            check("ood", ood)?;
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and > 0"));
        }
        if !(self.initial_sigma >= 0.0 && self.initial_sigma.is_finite()) {
            return Err(Error::config("initial_sigma", "must be finite and >= 0"));
        }
        if self.oracle == OracleKind::Mlp && self.oracle_hidden == 0 {
            return Err(Error::config("oracle_hidden", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("env config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn sample_prompt(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.prompt.sample(rng)
    }

    pub fn initial_policy(&self) -> GaussianPolicy {
        GaussianPolicy::centered(self.prompt_dim, self.response_dim, self.initial_sigma)
    }
}

/// Anything that assigns a scalar reward to a (prompt, response) pair.
pub trait Scorer {
    fn reward(&self, prompt: &[f64], response: &[f64]) -> f64;
}

impl Scorer for ParamVector {
    fn reward(&self, prompt: &[f64], response: &[f64]) -> f64 {
        score(self, FeatureInput::new(prompt, response)).expect("scorer dimensions match env")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum OracleParams {
    /// `r*(x, y) = x^T W y + v^T y`, `W` row-major `prompt_dim x response_dim`.
    Bilinear { w: Vec<f64>, v: Vec<f64> },
    Mlp(ParamVector),
}

/// Hidden ground-truth reward.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReward {
    prompt_dim: usize,
    response_dim: usize,
    params: OracleParams,
}

impl OracleReward {
    pub fn from_env(env: &EnvConfig) -> Result<Self> {
        env.validate()?;
        let (p, r) = (env.prompt_dim, env.response_dim);
        let params = match env.oracle {
            OracleKind::Bilinear => {
                let mut rng = stream(env.oracle_seed, 0);
                let s = 1.0 / (p as f64).sqrt();
                let w = (0..p * r)
                    .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let v = (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                OracleParams::Bilinear { w, v }
            }
            OracleKind::Mlp => {
                let spec = ModelSpec::new(p, r, vec![env.oracle_hidden]).with_seed(env.oracle_seed);
                let mut params = init_params(&spec)?;
                // Xavier output weights are small for a single unit; widen the reward range.
                let out = *params.layout().output_layer();
                for v in &mut params.values_mut()[out.weight_range()] {
                    *v *= 4.0;
                }
                OracleParams::Mlp(params)
            }
        };
        Ok(Self {
            prompt_dim: p,
            response_dim: r,
            params,
        })
    }

    pub fn bilinear(prompt_dim: usize, response_dim: usize, w: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if w.len() != prompt_dim * response_dim {
            return Err(Error::Shape {
                what: "oracle W",
                expected: prompt_dim * response_dim,
                got: w.len(),
            });
        }
        if v.len() != response_dim {
            return Err(Error::Shape {
                what: "oracle v",
                expected: response_dim,
                got: v.len(),
            });
        }
        Ok(Self {
            prompt_dim,
            response_dim,
            params: OracleParams::Bilinear { w, v },
        })
    }
}

impl Scorer for OracleReward {
    fn reward(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.prompt_dim);
        debug_assert_eq!(y.len(), self.response_dim);
        match &self.params {
            OracleParams::Bilinear { w, v } => {
                let mut total: f64 = v.iter().zip(y).map(|(a, b)| a * b).sum();
                for (xi, row) in x.iter().zip(w.chunks_exact(self.response_dim)) {
                    total += xi * row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                }
                total
            }
            OracleParams::Mlp(p) => p.reward(x, y),
        }
    }
}

/// Gaussian response policy `y ~ N(A x + b, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub prompt_dim: usize,
    pub response_dim: usize,
    /// `A`, row-major `response_dim x prompt_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub sigma: f64,
    pub round: usize,
}

impl GaussianPolicy {
    pub fn centered(prompt_dim: usize, response_dim: usize, sigma: f64) -> Self {
        Self {
            prompt_dim,
            response_dim,
            weights: vec![0.0; prompt_dim * response_dim],
            bias: vec![0.0; response_dim],
            sigma,
            round: 0,
        }
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.prompt_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>())
            .collect()
    }

    pub fn sample(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut y = self.mean(x);
        if self.sigma > 0.0 {
            for v in &mut y {
                *v += self.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        y
    }
}

/// Labelled pairs: a prompt, two policy responses, and an oracle label.
pub fn sample_preferences(
    env: &EnvConfig,
    oracle: &OracleReward,
    policy: &GaussianPolicy,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PreferencePair>> {
    if count == 0 {
        return Err(Error::config("count", "must be >= 1"));
    }
    Ok((0..count)
        .map(|_| {
            let x = env.sample_prompt(rng);
            let y1 = policy.sample(&x, rng);
            let y2 = policy.sample(&x, rng);
            let gap = oracle.reward(&x, &y1) - oracle.reward(&x, &y2);
            let first_wins = match env.label_mode {
                LabelMode::Deterministic => gap >= 0.0,
                LabelMode::BernoulliBt => rng.random::<f64>() < sigmoid(env.beta * gap),
            };
            let (winner, loser) = if first_wins { (y1, y2) } else { (y2, y1) };
            PreferencePair {
                prompt: x,
                winner,
                loser,
            }
        })
        .collect())
}

/// `k` unlabelled policy responses for each prompt.
pub fn sample_meta_for_prompts(
    policy: &GaussianPolicy,
    prompts: impl IntoIterator<Item = Vec<f64>>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MetaSample>> {
    if k < 2 {
        return Err(Error::InvalidSample(format!("k must be >= 2, got {k}")));
    }
    Ok(prompts
        .into_iter()
        .map(|x| {
            let responses = (0..k).map(|_| policy.sample(&x, rng)).collect();
            MetaSample {
                prompt: x,
                responses,
            }
        })
        .collect())
}

/// Meta dataset with fresh prompts from the environment's prompt distribution.
pub fn sample_meta(
    env: &EnvConfig,
    policy: &GaussianPolicy,
    count: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MetaSample>> {
    if k < 2 {
        return Err(Error::InvalidSample(format!("k must be >= 2, got {k}")));
    }
    let prompts: Vec<Vec<f64>> = (0..count).map(|_| env.sample_prompt(rng)).collect();
    sample_meta_for_prompts(policy, prompts, k, rng)
}

mod improve_defaults {
    pub fn k() -> usize {
        16
    }
    pub fn step_size() -> f64 {
        1.0
    }
    pub fn contraction() -> f64 {
        0.7
    }
    pub fn prompts() -> usize {
        512
    }
}

/// Best-of-k policy improvement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImproveConfig {
    #[serde(default = "improve_defaults::k")]
    pub k: usize,
    /// Interpolation factor toward the refit mean map, in `(0, 1]`.
    #[serde(default = "improve_defaults::step_size")]
    pub step_size: f64,
    /// Multiplier applied to the policy spread each improvement.
    #[serde(default = "improve_defaults::contraction")]
    pub contraction: f64,
    /// Prompts drawn for one improvement.
    #[serde(default = "improve_defaults::prompts")]
    pub prompts: usize,
}

impl Default for ImproveConfig {
    fn default() -> Self {
        Self {
            k: improve_defaults::k(),
            step_size: improve_defaults::step_size(),
            contraction: improve_defaults::contraction(),
            prompts: improve_defaults::prompts(),
        }
    }
}

impl ImproveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k", "must be >= 2"));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::config("step_size", "must lie in (0, 1]"));
        }
        if !(self.contraction > 0.0 && self.contraction.is_finite()) {
            return Err(Error::config("contraction", "must be finite and > 0"));
        }
        if self.prompts == 0 {
            return Err(Error::config("prompts", "must be >= 1"));
        }
        Ok(())
    }
}

/// One best-of-k improvement against `scorer`: select the top-scoring of `k`
/// samples per prompt, least-squares refit the mean map to the selections,
/// move toward the refit by `step_size`, and contract the spread.
pub fn improve_policy(
    policy: &GaussianPolicy,
    scorer: &dyn Scorer,
    env: &EnvConfig,
    cfg: &ImproveConfig,
    rng: &mut impl Rng,
) -> Result<GaussianPolicy> {
    cfg.validate()?;
    let (p, r) = (policy.prompt_dim, policy.response_dim);
    let n = cfg.prompts;
    let mut design = DMatrix::<f64>::zeros(n, p + 1);
    let mut targets = DMatrix::<f64>::zeros(n, r);
    for row in 0..n {
        let x = env.sample_prompt(rng);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..cfg.k {
            let y = policy.sample(&x, rng);
            let s = scorer.reward(&x, &y);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, y));
            }
        }
        let (_, y) = best.expect("k >= 2");
        for (j, xj) in x.iter().enumerate() {
            design[(row, j)] = *xj;
        }
        design[(row, p)] = 1.0;
        for (j, yj) in y.iter().enumerate() {
            targets[(row, j)] = *yj;
        }
    }

    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (n.max(p + 1) as f64) * f64::EPSILON;
    let rank = svd.rank(tol);
    if rank < p + 1 {
        return Err(Error::DegenerateRegression(format!(
            "prompt design matrix has rank {rank}, needs {} (prompt_dim + intercept) over {n} prompts",
            p + 1
        )));
    }
    let coef = svd
        .solve(&targets, tol)
        .map_err(|e| Error::DegenerateRegression(e.to_string()))?;

    let s = cfg.step_size;
    let mut next = policy.clone();
    for i in 0..r {
        for j in 0..p {
            let w = &mut next.weights[i * p + j];
            *w = (1.0 - s) * *w + s * coef[(j, i)];
        }
        let b = &mut next.bias[i];
        *b = (1.0 - s) * *b + s * coef[(p, i)];
    }
    next.sigma = policy.sigma * cfg.contraction;
    next.round = policy.round + 1;
    Ok(next)
}

/// The environment with prompts drawn from its out-of-distribution spec.
pub fn ood_shift(env: &EnvConfig) -> Result<EnvConfig> {
    let ood = env.ood.clone().ok_or(Error::MissingOod)?;
    Ok(EnvConfig {
        prompt: ood,
        ..env.clone()
    })
}

/// Mean oracle reward of one policy sample per prompt.
pub fn mean_policy_reward(
    env: &EnvConfig,
    scorer: &dyn Scorer,
    policy: &GaussianPolicy,
    prompts: usize,
    rng: &mut impl Rng,
) -> f64 {
    let total: f64 = (0..prompts)
        .map(|_| {
            let x = env.sample_prompt(rng);
            let y = policy.sample(&x, rng);
            scorer.reward(&x, &y)
        })
        .sum();
    total / prompts as f64
}

/// Header line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub kind: String,
    pub env_hash: String,
    pub seed: u64,
    pub oracle_seed: u64,
    pub count: usize,
    #[serde(default)]
    pub k: Option<usize>,
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

fn write_jsonl<T: Serialize>(path: &Path, header: &DatasetHeader, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_line(&mut w, header).map_err(|e| Error::io(path, e))?;
    for item in items {
        write_line(&mut w, item).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(DatasetHeader, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(path, "missing header line"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::parse(path, format!("header: {e}")))?;
    let mut items = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("record {}: {e}", i + 1)))?,
        );
    }
    if items.len() != header.count {
        return Err(Error::parse(
            path,
            format!("header declares {} records, found {}", header.count, items.len()),
        ));
    }
    Ok((header, items))
}

pub fn write_preferences(path: &Path, env: &EnvConfig, pairs: &[PreferencePair]) -> Result<()> {
    let header = DatasetHeader {
        kind: "preferences".into(),
        env_hash: env.hash(),
        seed: env.seed,
        oracle_seed: env.oracle_seed,
        count: pairs.len(),
        k: None,
    };
    write_jsonl(path, &header, pairs)
}

pub fn read_preferences(path: &Path) -> Result<(DatasetHeader, Vec<PreferencePair>)> {
    let (header, items) = read_jsonl(path)?;
    if header.kind != "preferences" {
        return Err(Error::parse(path, format!("expected preferences, found {}", header.kind)));
    }
    Ok((header, items))
}

pub fn write_meta(path: &Path, env: &EnvConfig, samples: &[MetaSample]) -> Result<()> {
    let header = DatasetHeader {
        kind: "meta".into(),
        env_hash: env.hash(),
        seed: env.seed,
        oracle_seed: env.oracle_seed,
        count: samples.len(),
        k: samples.first().map(MetaSample::k),
    };
    write_jsonl(path, &header, samples)
}

pub fn read_meta(path: &Path) -> Result<(DatasetHeader, Vec<MetaSample>)> {
    let (header, items) = read_jsonl::<MetaSample>(path)?;
    if header.kind != "meta" {
        return Err(Error::parse(path, format!("expected meta, found {}", header.kind)));
    }
    for s in &items {
        s.validate().map_err(|e| Error::parse(path, e))?;
    }
    Ok((header, items))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> EnvConfig {
        EnvConfig::new(3, 2)
    }

    #[test]
    fn deterministic_labels_follow_oracle() {
        let mut e = env();
        e.label_mode = LabelMode::Deterministic;
        let oracle = OracleReward::from_env(&e).unwrap();
        let mut rng = stream(1, 0);
        let pairs = sample_preferences(&e, &oracle, &e.initial_policy(), 500, &mut rng).unwrap();
        for p in &pairs {
            assert!(oracle.reward(&p.prompt, &p.winner) >= oracle.reward(&p.prompt, &p.loser));
        }
    }

    #[test]
    fn zero_count_rejected() {
        let e = env();
        let oracle = OracleReward::from_env(&e).unwrap();
        let mut rng = stream(1, 0);
        assert!(sample_preferences(&e, &oracle, &e.initial_policy(), 0, &mut rng).is_err());
    }

    #[test]
    fn meta_samples_have_k_responses() {
        let e = env();
        let mut rng = stream(2, 0);
        let meta = sample_meta(&e, &e.initial_policy(), 20, 5, &mut rng).unwrap();
        assert_eq!(meta.len(), 20);
        assert!(meta.iter().all(|s| s.k() == 5));
        assert!(sample_meta(&e, &e.initial_policy(), 3, 1, &mut rng).is_err());
    }

    #[test]
    fn zero_sigma_policy_repeats_itself() {
        let e = env();
        let policy = GaussianPolicy {
            sigma: 0.0,
            bias: vec![0.3, -0.2],
            ..e.initial_policy()
        };
        let mut rng = stream(3, 0);
        for s in sample_meta(&e, &policy, 10, 4, &mut rng).unwrap() {
            assert!(s.responses.iter().all(|r| r == &s.responses[0]));
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let e = env();
        let oracle = OracleReward::from_env(&e).unwrap();
        let a = sample_preferences(&e, &oracle, &e.initial_policy(), 50, &mut stream(5, 1)).unwrap();
        let b = sample_preferences(&e, &oracle, &e.initial_policy(), 50, &mut stream(5, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn contraction_compounds() {
        let e = env();
        let oracle = OracleReward::from_env(&e).unwrap();
        let cfg = ImproveConfig {
            prompts: 64,
            ..ImproveConfig::default()
        };
        let mut policy = e.initial_policy();
        let mut rng = stream(6, 0);
        for _ in 0..3 {
            policy = improve_policy(&policy, &oracle, &e, &cfg, &mut rng).unwrap();
        }
        assert!((policy.sigma - 0.343).abs() < 1e-12);
        assert_eq!(policy.round, 3);
    }

    #[test]
    fn tiny_step_leaves_mean_map_nearly_unchanged() {
        let e = env();
        let oracle = OracleReward::from_env(&e).unwrap();
        let cfg = ImproveConfig {
            step_size: 1e-9,
            prompts: 64,
            ..ImproveConfig::default()
        };
        let policy = e.initial_policy();
        let next = improve_policy(&policy, &oracle, &e, &cfg, &mut stream(7, 0)).unwrap();
        for (a, b) in next.weights.iter().zip(&policy.weights) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in next.bias.iter().zip(&policy.bias) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_prompts_are_reported() {
        let mut e = env();
        e.prompt.scale = 0.0;
        let oracle = OracleReward::from_env(&e).unwrap();
        let cfg = ImproveConfig {
            prompts: 32,
            ..ImproveConfig::default()
        };
        let err = improve_policy(&e.initial_policy(), &oracle, &e, &cfg, &mut stream(8, 0))
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateRegression(_)), "{err}");
        assert!(err.to_string().contains("rank"));
    }

    #[test]
    fn invalid_improve_config() {
        let zero = ImproveConfig {
            step_size: 0.0,
            ..ImproveConfig::default()
        };
        assert!(zero.validate().is_err());
        let k1 = ImproveConfig {
            k: 1,
            ..ImproveConfig::default()
        };
        assert!(k1.validate().is_err());
    }

    #[test]
    fn ood_requires_spec() {
        let mut e = env();
        assert!(matches!(ood_shift(&e), Err(Error::MissingOod)));
        e.ood = Some(e.prompt.shifted(3.0));
        let shifted = ood_shift(&e).unwrap();
        assert_eq!(shifted.prompt.mean, vec![3.0; 3]);
        assert_eq!(shifted.oracle_seed, e.oracle_seed);
    }

    #[test]
    fn hash_tracks_every_field() {
        let e = env();
        let mut f = e.clone();
        f.beta = 5.5;
        assert_ne!(e.hash(), f.hash());
        let mut g = e.clone();
        g.seed = 1;
        assert_ne!(e.hash(), g.hash());
        assert_eq!(e.hash(), env().hash());
    }

    #[test]
    fn jsonl_round_trip() {
        let e = env();
        let oracle = OracleReward::from_env(&e).unwrap();
        let mut rng = stream(9, 0);
        let pairs = sample_preferences(&e, &oracle, &e.initial_policy(), 7, &mut rng).unwrap();
        let meta = sample_meta(&e, &e.initial_policy(), 4, 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pp = dir.path().join("prefs.jsonl");
        let mp = dir.path().join("meta.jsonl");
        write_preferences(&pp, &e, &pairs).unwrap();
        write_meta(&mp, &e, &meta).unwrap();
        let (h, back) = read_preferences(&pp).unwrap();
        assert_eq!(h.env_hash, e.hash());
        assert_eq!(back, pairs);
        let (h, back) = read_meta(&mp).unwrap();
        assert_eq!(h.k, Some(3));
        assert_eq!(back, meta);
        assert!(read_meta(&pp).is_err());
    }
}
