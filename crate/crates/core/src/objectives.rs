//! Preference loss, difference loss, and preference accuracy.
//!
//! Batch values are arithmetic means over items, so loss magnitudes (and
//! therefore step sizes) do not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{accumulate_score_grad, score, FeatureInput, ParamVector};

/// A labelled comparison: `winner` is preferred over `loser` for `prompt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<f64>,
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
}

impl PreferencePair {
    pub fn winner_input(&self) -> FeatureInput<'_> {
        FeatureInput::new(&self.prompt, &self.winner)
    }

    pub fn loser_input(&self) -> FeatureInput<'_> {
        FeatureInput::new(&self.prompt, &self.loser)
    }

    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            winner: self.loser.clone(),
            loser: self.winner.clone(),
        }
    }
}

/// Unlabelled responses sampled for one prompt from the current policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSample {
    pub prompt: Vec<f64>,
    pub responses: Vec<Vec<f64>>,
}

impl MetaSample {
    pub fn k(&self) -> usize {
        self.responses.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.responses.len() < 2 {
            return Err(Error::InvalidSample(format!(
                "need at least 2 responses, got {}",
                self.responses.len()
            )));
        }
        let d = self.responses[0].len();
        if self.responses.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidSample(
                "responses have inconsistent dimensions".into(),
            ));
        }
        Ok(())
    }

    fn input(&self, i: usize) -> FeatureInput<'_> {
        FeatureInput::new(&self.prompt, &self.responses[i])
    }
}

/// Normalizing constant applied to the per-sample sum over response pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffNormalization {
    /// `2 / k^2`
    #[default]
    Verbatim,
    /// `2 / (k (k - 1))`, the mean over unordered pairs.
    ExactPairMean,
}

impl DiffNormalization {
    pub fn from_flag(exact_pair_mean: bool) -> Self {
        if exact_pair_mean {
            DiffNormalization::ExactPairMean
        } else {
            DiffNormalization::Verbatim
        }
    }

    pub fn constant(self, k: usize) -> f64 {
        let k = k as f64;
        match self {
            DiffNormalization::Verbatim => 2.0 / (k * k),
            DiffNormalization::ExactPairMean => 2.0 / (k * (k - 1.0)),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(delta)` without overflow for large `|delta|`.
#[inline]
pub fn pairwise_loss(delta: f64) -> f64 {
    if delta >= 0.0 {
        (-delta).exp().ln_1p()
    } else {
        -delta + delta.exp().ln_1p()
    }
}

/// `d pairwise_loss / d delta`
#[inline]
pub fn pairwise_loss_slope(delta: f64) -> f64 {
    sigmoid(delta) - 1.0
}

#[inline]
fn sign_with_zero_tie(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Difference value of one sample computed directly from its scores.
pub fn difference_value(scores: &[f64], norm: DiffNormalization) -> f64 {
    let k = scores.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += sigmoid((scores[i] - scores[j]).abs());
        }
    }
    norm.constant(k) * total
}

/// Gradient of [`difference_value`] with respect to each score.
pub fn difference_score_weights(scores: &[f64], norm: DiffNormalization) -> Vec<f64> {
    let k = scores.len();
    let c = norm.constant(k);
    let mut w = vec![0.0; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = scores[i] - scores[j];
            let s = sigmoid(d.abs());
            let g = c * s * (1.0 - s) * sign_with_zero_tie(d);
            w[i] += g;
            w[j] -= g;
        }
    }
    w
}

fn score_pair(params: &ParamVector, pair: &PreferencePair) -> Result<(f64, f64)> {
    Ok((
        score(params, pair.winner_input())?,
        score(params, pair.loser_input())?,
    ))
}

/// Loss of a single pair and its gradient.
pub fn pair_loss_grad(params: &ParamVector, pair: &PreferencePair) -> Result<(f64, ParamVector)> {
    vanilla_loss(params, std::slice::from_ref(pair))
}

pub fn vanilla_loss_value(params: &ParamVector, batch: &[PreferencePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("preference batch"));
    }
    let mut total = 0.0;
    for pair in batch {
        let (w, l) = score_pair(params, pair)?;
        total += pairwise_loss(w - l);
    }
    Ok(total / batch.len() as f64)
}

/// Mean preference loss over `batch` and its exact gradient.
pub fn vanilla_loss(params: &ParamVector, batch: &[PreferencePair]) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("preference batch"));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for pair in batch {
        let (w, l) = score_pair(params, pair)?;
        let delta = w - l;
        total += pairwise_loss(delta);
        let slope = pairwise_loss_slope(delta) * inv_n;
        accumulate_score_grad(params, pair.winner_input(), slope, grad.values_mut())?;
        accumulate_score_grad(params, pair.loser_input(), -slope, grad.values_mut())?;
    }
    Ok((total * inv_n, grad))
}

fn sample_scores(params: &ParamVector, sample: &MetaSample) -> Result<Vec<f64>> {
    sample.validate()?;
    (0..sample.k())
        .map(|i| score(params, sample.input(i)))
        .collect()
}

pub fn difference_loss_value(
    params: &ParamVector,
    batch: &[MetaSample],
    norm: DiffNormalization,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("meta batch"));
    }
    let mut total = 0.0;
    for sample in batch {
        total += difference_value(&sample_scores(params, sample)?, norm);
    }
    Ok(total / batch.len() as f64)
}

/// Mean difference loss `J` over `batch` and its gradient.
///
/// Tied responses contribute a zero subgradient through `|.|`.
pub fn difference_loss(
    params: &ParamVector,
    batch: &[MetaSample],
    norm: DiffNormalization,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("meta batch"));
    }
    let inv_m = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for sample in batch {
        let scores = sample_scores(params, sample)?;
        total += difference_value(&scores, norm);
        for (i, w) in difference_score_weights(&scores, norm).into_iter().enumerate() {
            if w != 0.0 {
                accumulate_score_grad(params, sample.input(i), w * inv_m, grad.values_mut())?;
            }
        }
    }
    Ok((total * inv_m, grad))
}

/// Fraction of pairs the model orders correctly; ties count as wrong.
pub fn rm_accuracy(params: &ParamVector, batch: &[PreferencePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("preference batch"));
    }
    let mut correct = 0usize;
    for pair in batch {
        let (w, l) = score_pair(params, pair)?;
        if w > l {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}
