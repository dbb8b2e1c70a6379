//! MetaRM optimization loop, the vanilla baseline, and alignment probes.
//!
//! One outer step:
//!
//! 1. `g_J = grad J(theta_t; X_s)` on a meta batch from the shifted policy
//! 2. `theta' = theta_t + eta * g_J`
//! 3. `g_L = grad L(theta'; X_t)` on a preference batch
//! 4. `theta_{t+1} = theta_t - alpha * g_L` (or an Adam step fed with `g_L`)
//!
//! The outer gradient is evaluated at the adapted parameters and applied to
//! the original ones; nothing is differentiated through step 2.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::objectives::{
    difference_loss, difference_loss_value, pair_loss_grad, rm_accuracy, vanilla_loss,
    DiffNormalization, MetaSample, PreferencePair,
};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    #[default]
    Sgd,
    Adam,
}

/// Parameters the outer descent step is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterAnchor {
    /// `theta_{t+1} = theta_t - alpha * grad L(theta')`.
    #[default]
    Original,
    /// `theta_{t+1} = theta' - alpha * grad L(theta')`, so the ascent persists.
    Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Vanilla,
    Metarm,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Metarm => "metarm",
        })
    }
}

mod defaults {
    pub fn eta() -> f64 {
        1e-3
    }
    pub fn alpha() -> f64 {
        5e-6
    }
    pub fn batch() -> usize {
        16
    }
    pub fn epochs() -> usize {
        1
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn grad_clip() -> f64 {
        1e3
    }
    pub fn eval_every() -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner ascent step on the difference loss.
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    /// Outer descent step on the preference loss.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Preference batch size.
    #[serde(default = "defaults::batch")]
    pub n: usize,
    /// Meta batch size.
    #[serde(default = "defaults::batch")]
    pub m: usize,
    /// Total outer steps. When absent, `epochs` passes over the preference data.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OuterOptimizer,
    #[serde(default)]
    pub outer_anchor: OuterAnchor,
    #[serde(default = "defaults::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// Use `2/(k(k-1))` instead of `2/k^2` in the difference loss.
    #[serde(default)]
    pub exact_pair_mean: bool,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    /// Validation accuracy is recomputed every this many steps.
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: defaults::eta(),
            alpha: defaults::alpha(),
            n: defaults::batch(),
            m: defaults::batch(),
            steps: None,
            epochs: defaults::epochs(),
            optimizer: OuterOptimizer::Sgd,
            outer_anchor: OuterAnchor::Original,
            adam_beta1: defaults::beta1(),
            adam_beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            exact_pair_mean: false,
            grad_clip: defaults::grad_clip(),
            eval_every: defaults::eval_every(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be finite and >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and > 0"));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be >= 1"));
        }
        if self.m == 0 {
            return Err(Error::config("m", "must be >= 1"));
        }
        if self.steps == Some(0) {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.steps.is_none() && self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be > 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn normalization(&self) -> DiffNormalization {
        DiffNormalization::from_flag(self.exact_pair_mean)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.n))
    }
}

/// Diagnostics recorded for one outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Preference loss at `theta_t`.
    pub loss: f64,
    /// Difference loss at `theta_t`.
    pub j_before: f64,
    /// Difference loss at the adapted parameters.
    pub j_after: f64,
    pub accuracy: f64,
    pub grad_norm_l: f64,
    pub grad_norm_j: f64,
    /// `<grad L(theta_t), grad J(theta_t)>`
    pub dot_l_j: f64,
    pub clipped: bool,
}

impl StepTrace {
    pub const COLUMNS: [&'static str; 9] = [
        "step",
        "loss",
        "j_before",
        "j_after",
        "accuracy",
        "grad_norm_l",
        "grad_norm_j",
        "dot_l_j",
        "clipped",
    ];

    pub fn is_finite(&self) -> bool {
        [
            self.loss,
            self.j_before,
            self.j_after,
            self.accuracy,
            self.grad_norm_l,
            self.grad_norm_j,
            self.dot_l_j,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn write_trace_csv(path: &Path, trace: &[StepTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(StepTrace::COLUMNS)
        .map_err(|e| csv_io(path, e))?;
    for t in trace {
        w.write_record([
            t.step.to_string(),
            t.loss.to_string(),
            t.j_before.to_string(),
            t.j_after.to_string(),
            t.accuracy.to_string(),
            t.grad_norm_l.to_string(),
            t.grad_norm_j.to_string(),
            t.dot_l_j.to_string(),
            u8::from(t.clipped).to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<StepTrace>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = r.headers().map_err(|e| Error::parse(path, e))?.clone();
    if headers.iter().ne(StepTrace::COLUMNS) {
        return Err(Error::parse(path, "unexpected trace columns"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::parse(path, format!("column {}: {e}", StepTrace::COLUMNS[i])))
        };
        out.push(StepTrace {
            step: rec[0].parse().map_err(|e| Error::parse(path, e))?,
            loss: f(1)?,
            j_before: f(2)?,
            j_after: f(3)?,
            accuracy: f(4)?,
            grad_norm_l: f(5)?,
            grad_norm_j: f(6)?,
            dot_l_j: f(7)?,
            clipped: &rec[8] == "1",
        });
    }
    Ok(out)
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

/// Outer-update state carried across steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OuterOptimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: OuterOptimizer, len: usize) -> Self {
        let (m, v) = match kind {
            OuterOptimizer::Sgd => (Vec::new(), Vec::new()),
            OuterOptimizer::Adam => (vec![0.0; len], vec![0.0; len]),
        };
        Self { kind, m, v, t: 0 }
    }

    fn apply(&mut self, params: &ParamVector, grad: &ParamVector, cfg: &TrainConfig) -> ParamVector {
        let mut next = params.clone();
        match self.kind {
            OuterOptimizer::Sgd => next.axpy(-cfg.alpha, grad),
            OuterOptimizer::Adam => {
                self.t += 1;
                let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                for (i, (p, &g)) in next.values_mut().iter_mut().zip(grad.values()).enumerate() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    *p -= cfg.alpha * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                }
            }
        }
        next
    }
}

fn clip(grad: &mut ParamVector, max_norm: f64) -> bool {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
        true
    } else {
        false
    }
}

fn ensure_finite(step: usize, what: &str, v: &ParamVector) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            reason: format!("non-finite {what}"),
        })
    }
}

/// `theta + eta * grad`, returning `theta` untouched when `eta` is zero.
pub fn ascend(params: &ParamVector, grad: &ParamVector, eta: f64) -> ParamVector {
    let mut adapted = params.clone();
    if eta != 0.0 {
        adapted.axpy(eta, grad);
    }
    adapted
}

/// Adapted parameters after one ascent step on the difference loss.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn meta_ascend(
    params: &ParamVector,
    meta_batch: &[MetaSample],
    eta: f64,
    norm: DiffNormalization,
    step: usize,
) -> Result<ParamVector> {
    if !(eta >= 0.0) {
        return Err(Error::config("eta", "must be >= 0"));
    }
    let (_, grad) = difference_loss(params, meta_batch, norm)?;
    ensure_finite(step, "difference-loss gradient", &grad)?;
    Ok(ascend(params, &grad, eta))
}

/// Inputs shared by every step of one training run.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub mode: TrainMode,
    pub validation: Option<&'a [PreferencePair]>,
}

/// One outer update. `meta_batch` may be empty only in vanilla mode, in
/// which case the difference-loss diagnostics are reported as zero.
pub fn metarm_step(
    params: &ParamVector,
    pref_batch: &[PreferencePair],
    meta_batch: &[MetaSample],
    ctx: &StepContext<'_>,
    state: &mut OptimizerState,
    step: usize,
    last_accuracy: Option<f64>,
) -> Result<(ParamVector, StepTrace)> {
    let cfg = ctx.config;
    let norm = cfg.normalization();
    let eta = match ctx.mode {
        TrainMode::Vanilla => 0.0,
        TrainMode::Metarm => cfg.eta,
    };
    if ctx.mode == TrainMode::Metarm && meta_batch.is_empty() {
        return Err(Error::EmptyBatch("meta batch"));
    }

    let mut clipped = false;
    let (j_before, mut grad_j) = if meta_batch.is_empty() {
        (0.0, params.zeros_like())
    } else {
        difference_loss(params, meta_batch, norm)?
    };
    ensure_finite(step, "difference-loss gradient", &grad_j)?;
    let grad_norm_j = grad_j.norm();
    let j_clipped = clip(&mut grad_j, cfg.grad_clip);
    clipped |= j_clipped;

    let adapted = ascend(params, &grad_j, eta);
    let j_after = if eta == 0.0 || meta_batch.is_empty() {
        j_before
    } else {
        difference_loss_value(&adapted, meta_batch, norm)?
    };

    let (loss_adapted, mut grad_outer) = vanilla_loss(&adapted, pref_batch)?;
    ensure_finite(step, "preference-loss gradient", &grad_outer)?;
    let (loss, grad_l) = if eta == 0.0 {
        (loss_adapted, grad_outer.clone())
    } else {
        vanilla_loss(params, pref_batch)?
    };
    let mut dot_l_j = grad_l.dot(&grad_j);
    if j_clipped {
        dot_l_j *= grad_norm_j / cfg.grad_clip;
    }
    clipped |= clip(&mut grad_outer, cfg.grad_clip);

    let base = match cfg.outer_anchor {
        OuterAnchor::Original => params,
        OuterAnchor::Adapted => &adapted,
    };
    let next = state.apply(base, &grad_outer, cfg);
    ensure_finite(step, "parameters", &next)?;

    let accuracy = match (ctx.validation, last_accuracy) {
        (Some(_), Some(acc)) if !step.is_multiple_of(cfg.eval_every) => acc,
        (Some(val), _) => rm_accuracy(params, val)?,
        (None, _) => rm_accuracy(params, pref_batch)?,
    };

    let trace = StepTrace {
        step,
        loss,
        j_before,
        j_after,
        accuracy,
        grad_norm_l: grad_l.norm(),
        grad_norm_j,
        dot_l_j,
        clipped,
    };
    if !trace.is_finite() {
        return Err(Error::Divergence {
            step,
            reason: "non-finite diagnostics".into(),
        });
    }
    Ok((next, trace))
}

/// Shuffled, without-replacement batches over a dataset, reshuffled per epoch.
/// The final batch of an epoch may be short.
struct EpochBatcher {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl EpochBatcher {
    fn new(len: usize, batch: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
            batch,
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = &self.order[self.cursor..end];
        self.cursor = end;
        out
    }
}

const PREF_STREAM: u64 = 1;
const META_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamVector,
    pub trace: Vec<StepTrace>,
}

/// Runs vanilla or MetaRM training from `init`.
///
/// Preference batches come from a seeded per-epoch shuffle of `dataset`;
/// meta batches are drawn with replacement from `meta`. The two draws use
/// independent random streams, so the preference batching is identical in
/// both modes.
pub fn train(
    mode: TrainMode,
    init: &ParamVector,
    dataset: &[PreferencePair],
    meta: &[MetaSample],
    config: &TrainConfig,
    validation: Option<&[PreferencePair]>,
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch("preference dataset"));
    }
    if mode == TrainMode::Metarm && meta.is_empty() {
        return Err(Error::EmptyBatch("meta dataset"));
    }
    if let Some([]) = validation {
        return Err(Error::EmptyBatch("validation set"));
    }
    let total = config.total_steps(dataset.len());
    let mut pref_rng = stream(config.seed, PREF_STREAM);
    let mut meta_rng = stream(config.seed, META_STREAM);
    let mut batcher = EpochBatcher::new(dataset.len(), config.n);
    let mut state = OptimizerState::new(config.optimizer, init.len());
    let ctx = StepContext {
        config,
        mode,
        validation,
    };

    let mut params = init.clone();
    let mut trace = Vec::with_capacity(total);
    let mut pref_batch = Vec::with_capacity(config.n);
    let mut meta_batch = Vec::with_capacity(config.m);
    for step in 0..total {
        pref_batch.clear();
        pref_batch.extend(batcher.next(&mut pref_rng).iter().map(|&i| dataset[i].clone()));
        meta_batch.clear();
        if !meta.is_empty() {
            meta_batch.extend(
                (0..config.m).map(|_| meta[meta_rng.random_range(0..meta.len())].clone()),
            );
        }
        let last = trace.last().map(|t: &StepTrace| t.accuracy);
        let (next, record) =
            metarm_step(&params, &pref_batch, &meta_batch, &ctx, &mut state, step, last)?;
        params = next;
        trace.push(record);
    }
    Ok(TrainOutput { params, trace })
}

/// First-order residuals for one step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub eta: f64,
    /// `|L_i(theta') - L_i(theta) - eta <grad L_i, grad J>|` per pair.
    pub residuals: Vec<f64>,
    /// `eta <grad L_i, grad J>` per pair.
    pub predicted: Vec<f64>,
    /// `|grad L_i(theta')| / |grad L_i(theta)|` per pair.
    pub grad_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `<grad L_i(theta), grad J(theta)>` per pair.
    pub pair_dots: Vec<f64>,
    /// `<grad L(X_t), grad J(X_s)>` for the whole batch.
    pub batch_dot: f64,
    pub grad_norm_j: f64,
    pub rows: Vec<ProbeRow>,
    /// Per step size: fraction of pairs where `grad_ratio > 1` agrees with
    /// `pair_dot > 0`.
    pub sign_agreement: Vec<f64>,
    /// Per step size: Pearson correlation of `pair_dot` with `ln grad_ratio`.
    pub dot_ratio_correlation: Vec<f64>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Measures how well `L(theta + eta grad J)` is predicted by its first-order
/// expansion around `theta`, pair by pair.
pub fn alignment_probe(
    params: &ParamVector,
    pref_batch: &[PreferencePair],
    meta_batch: &[MetaSample],
    eta_list: &[f64],
    norm: DiffNormalization,
) -> Result<ProbeReport> {
    if pref_batch.is_empty() {
        return Err(Error::EmptyBatch("preference batch"));
    }
    let (_, grad_j) = difference_loss(params, meta_batch, norm)?;
    let (_, batch_grad) = vanilla_loss(params, pref_batch)?;
    let base = pref_batch
        .iter()
        .map(|p| pair_loss_grad(params, p))
        .collect::<Result<Vec<_>>>()?;
    let pair_dots: Vec<f64> = base.iter().map(|(_, g)| g.dot(&grad_j)).collect();

    let mut rows = Vec::with_capacity(eta_list.len());
    let mut sign_agreement = Vec::with_capacity(eta_list.len());
    let mut dot_ratio_correlation = Vec::with_capacity(eta_list.len());
    for &eta in eta_list {
        let adapted = ascend(params, &grad_j, eta);
        let mut row = ProbeRow {
            eta,
            residuals: Vec::with_capacity(pref_batch.len()),
            predicted: Vec::with_capacity(pref_batch.len()),
            grad_ratio: Vec::with_capacity(pref_batch.len()),
        };
        for ((pair, (loss, grad)), dot) in pref_batch.iter().zip(&base).zip(&pair_dots) {
            let (loss_adapted, grad_adapted) = pair_loss_grad(&adapted, pair)?;
            let predicted = eta * dot;
            row.predicted.push(predicted);
            row.residuals.push((loss_adapted - loss - predicted).abs());
            let denom = grad.norm();
            row.grad_ratio.push(if denom > 0.0 {
                grad_adapted.norm() / denom
            } else {
                1.0
            });
        }
        let agree = pair_dots
            .iter()
            .zip(&row.grad_ratio)
            .filter(|(d, r)| (**d > 0.0) == (**r > 1.0))
            .count();
        sign_agreement.push(agree as f64 / pref_batch.len() as f64);
        let log_ratio: Vec<f64> = row.grad_ratio.iter().map(|r| r.ln()).collect();
        dot_ratio_correlation.push(pearson(&pair_dots, &log_ratio));
        rows.push(row);
    }
    Ok(ProbeReport {
        batch_dot: batch_grad.dot(&grad_j),
        grad_norm_j: grad_j.norm(),
        pair_dots,
        rows,
        sign_agreement,
        dot_ratio_correlation,
    })
}

/// Writes a probe report as pretty JSON.
pub fn write_probe_json(path: &Path, report: &ProbeReport) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, report).map_err(|e| Error::parse(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}
