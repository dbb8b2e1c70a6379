//! Reward-difference distributions and their summaries.
//!
//! For each query two responses are drawn from the policy and the absolute
//! difference of their reward-model scores is recorded. A reward model that
//! cannot tell responses apart produces a distribution collapsed near zero.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, GaussianPolicy, Scorer};
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: 0.0,
                variance: 0.0,
                max: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            count: n,
            mean,
            variance,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; the last bin is closed on the right.
    pub fn uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffDistribution {
    /// Absolute reward differences, or their normalized images.
    pub values: Vec<f64>,
    pub summary: Summary,
    pub histogram: Histogram,
    pub normalized: bool,
}

impl DiffDistribution {
    pub fn from_values(values: Vec<f64>) -> Self {
        let summary = Summary::of(&values);
        let histogram = Histogram::uniform(&values, 0.0, summary.max, HISTOGRAM_BINS);
        Self {
            values,
            summary,
            histogram,
            normalized: false,
        }
    }

    fn normalized_from(values: Vec<f64>) -> Self {
        let summary = Summary::of(&values);
        let histogram = Histogram::uniform(&values, 0.0, 1.0, HISTOGRAM_BINS);
        Self {
            values,
            summary,
            histogram,
            normalized: true,
        }
    }

    pub fn variance(&self) -> f64 {
        self.summary.variance
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::trainer::csv_io(path, e))?;
        let column = if self.normalized {
            "normalized_diff"
        } else {
            "abs_diff"
        };
        w.write_record([column])
            .map_err(|e| crate::trainer::csv_io(path, e))?;
        for v in &self.values {
            w.write_record([v.to_string()])
                .map_err(|e| crate::trainer::csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| crate::trainer::csv_io(path, e))?;
        let header = r.headers().map_err(|e| Error::parse(path, e))?;
        let normalized = match header.get(0) {
            Some("abs_diff") => false,
            Some("normalized_diff") => true,
            other => return Err(Error::parse(path, format!("unexpected column {other:?}"))),
        };
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::parse(path, e))?;
            values.push(rec[0].parse::<f64>().map_err(|e| Error::parse(path, e))?);
        }
        Ok(if normalized {
            Self::normalized_from(values)
        } else {
            Self::from_values(values)
        })
    }

    /// Summary and histogram (without raw values) as pretty JSON.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Export<'a> {
            normalized: bool,
            summary: &'a Summary,
            histogram: &'a Histogram,
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(
            &mut f,
            &Export {
                normalized: self.normalized,
                summary: &self.summary,
                histogram: &self.histogram,
            },
        )
        .map_err(|e| Error::parse(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

/// Samples `pairs_per_query` response pairs for each of `query_count`
/// prompts and records `|r(x, y1) - r(x, y2)|`.
pub fn reward_diff_distribution(
    rm: &dyn Scorer,
    policy: &GaussianPolicy,
    env: &EnvConfig,
    query_count: usize,
    pairs_per_query: usize,
    rng: &mut impl Rng,
) -> Result<DiffDistribution> {
    if query_count == 0 {
        return Err(Error::config("query_count", "must be >= 1"));
    }
    if pairs_per_query == 0 {
        return Err(Error::config("pairs_per_query", "must be >= 1"));
    }
    let mut values = Vec::with_capacity(query_count * pairs_per_query);
    for _ in 0..query_count {
        let x = env.sample_prompt(rng);
        for _ in 0..pairs_per_query {
            let y1 = policy.sample(&x, rng);
            let y2 = policy.sample(&x, rng);
            values.push((rm.reward(&x, &y1) - rm.reward(&x, &y2)).abs());
        }
    }
    Ok(DiffDistribution::from_values(values))
}

fn rescale(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let range = hi - lo;
    if range > 0.0 {
        values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

fn bounds(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Min-max rescale to `[0, 1]`; an all-equal input maps to all zeros.
pub fn normalize_distribution(dist: &DiffDistribution) -> Result<DiffDistribution> {
    if dist.values.is_empty() {
        return Err(Error::EmptyBatch("difference distribution"));
    }
    let (lo, hi) = bounds(&dist.values);
    Ok(DiffDistribution::normalized_from(rescale(&dist.values, lo, hi)))
}

/// Min-max rescale of several distributions onto one shared `[0, 1]` scale,
/// so their dispersions stay comparable.
pub fn normalize_jointly(dists: &[&DiffDistribution]) -> Result<Vec<DiffDistribution>> {
    if dists.iter().any(|d| d.values.is_empty()) {
        return Err(Error::EmptyBatch("difference distribution"));
    }
    let (lo, hi) = dists
        .iter()
        .map(|d| bounds(&d.values))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| {
            (a.min(c), b.max(d))
        });
    Ok(dists
        .iter()
        .map(|d| DiffDistribution::normalized_from(rescale(&d.values, lo, hi)))
        .collect())
}

/// `(round, variance)` in input order.
pub fn variance_trajectory(dists: &[DiffDistribution]) -> Result<Vec<(usize, f64)>> {
    if dists.is_empty() {
        return Err(Error::EmptyBatch("distribution list"));
    }
    Ok(dists.iter().map(|d| d.variance()).enumerate().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn normalize_small_examples() {
        let d = DiffDistribution::from_values(vec![0.0, 1.0, 2.0]);
        assert_eq!(normalize_distribution(&d).unwrap().values, vec![0.0, 0.5, 1.0]);
        let flat = DiffDistribution::from_values(vec![0.7; 4]);
        let n = normalize_distribution(&flat).unwrap();
        assert_eq!(n.values, vec![0.0; 4]);
        assert!(n.normalized);
        assert!(normalize_distribution(&DiffDistribution::from_values(vec![])).is_err());
    }

    #[test]
    fn trajectory_single_point() {
        let d = DiffDistribution::from_values(vec![1.0, 3.0]);
        assert_eq!(variance_trajectory(&[d]).unwrap(), vec![(0, 1.0)]);
        assert!(variance_trajectory(&[]).is_err());
    }

    #[test]
    fn zero_sigma_policy_gives_zero_differences() {
        let env = EnvConfig::new(2, 2);
        let policy = GaussianPolicy::centered(2, 2, 0.0);
        struct Linear;
        impl Scorer for Linear {
            fn reward(&self, x: &[f64], y: &[f64]) -> f64 {
                x[0] + 3.0 * y[0] - y[1]
            }
        }
        let d = reward_diff_distribution(&Linear, &policy, &env, 100, 2, &mut stream(0, 0)).unwrap();
        assert_eq!(d.values.len(), 200);
        assert!(d.values.iter().all(|&v| v == 0.0));
        assert_eq!(d.variance(), 0.0);
        assert_eq!(d.histogram.total(), 200);
    }

    #[test]
    fn joint_normalization_keeps_ordering_of_spread() {
        let a = DiffDistribution::from_values(vec![0.0, 1.0, 2.0]);
        let b = DiffDistribution::from_values(vec![0.0, 2.0, 4.0]);
        let n = normalize_jointly(&[&a, &b]).unwrap();
        assert_eq!(n[0].values, vec![0.0, 0.25, 0.5]);
        assert_eq!(n[1].values, vec![0.0, 0.5, 1.0]);
        assert!(n[1].variance() > n[0].variance());
    }

    #[test]
    fn csv_round_trip() {
        let d = DiffDistribution::from_values(vec![0.1, 0.25, 1.0 / 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        assert_eq!(DiffDistribution::read_csv(&p).unwrap(), d);
    }

    proptest! {
        #[test]
        fn histogram_invariants(values in prop::collection::vec(0.0f64..100.0, 1..300)) {
            let d = DiffDistribution::from_values(values.clone());
            prop_assert_eq!(d.histogram.total(), values.len());
            prop_assert_eq!(d.histogram.edges.len(), HISTOGRAM_BINS + 1);
            prop_assert!(d.histogram.edges.windows(2).all(|w| w[0] < w[1]));
            let n = normalize_distribution(&d).unwrap();
            prop_assert!(n.values.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(n.histogram.total(), values.len());
            // monotone map: ordering of samples is preserved
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(n.values[i] <= n.values[j]);
                    }
                }
            }
        }
    }
}
