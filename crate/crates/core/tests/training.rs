//! Training-loop behaviour on small hand-built problems.

use metarm::model::{init_params, ModelSpec, ParamVector};
use metarm::objectives::{difference_loss, rm_accuracy, DiffNormalization, MetaSample, PreferencePair};
use metarm::rng::stream;
use metarm::trainer::{
    meta_ascend, metarm_step, train, OptimizerState, OuterOptimizer, StepContext, TrainConfig,
    TrainMode,
};
use rand::Rng;
use rand_distr::StandardNormal;

fn gauss(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Pairs ordered by a fixed linear scorer with a margin, so a linear model
/// can rank all of them correctly.
fn separable(count: usize, seed: u64) -> Vec<PreferencePair> {
    let w = [1.0, -2.0, 0.5];
    let mut rng = stream(seed, 0);
    let mut out = Vec::new();
    while out.len() < count {
        let prompt = gauss(2, &mut rng);
        let a = gauss(3, &mut rng);
        let b = gauss(3, &mut rng);
        let s = |y: &[f64]| y.iter().zip(&w).map(|(u, v)| u * v).sum::<f64>();
        let gap = s(&a) - s(&b);
        if gap.abs() < 0.2 {
            continue;
        }
        let (winner, loser) = if gap > 0.0 { (a, b) } else { (b, a) };
        out.push(PreferencePair { prompt, winner, loser });
    }
    out
}

fn meta_set(count: usize, k: usize, seed: u64) -> Vec<MetaSample> {
    let mut rng = stream(seed, 1);
    (0..count)
        .map(|_| MetaSample {
            prompt: gauss(2, &mut rng),
            responses: (0..k).map(|_| gauss(3, &mut rng)).collect(),
        })
        .collect()
}

#[test]
fn vanilla_fits_a_separable_dataset() {
    let pairs = separable(200, 1);
    let spec = ModelSpec::new(2, 3, vec![]).with_seed(1);
    let cfg = TrainConfig {
        alpha: 0.5,
        steps: Some(500),
        ..TrainConfig::default()
    };
    let init = init_params(&spec).unwrap();
    let out = train(TrainMode::Vanilla, &init, &pairs, &[], &cfg, None).unwrap();
    assert_eq!(out.trace.len(), 500);
    assert_eq!(rm_accuracy(&out.params, &pairs).unwrap(), 1.0);
}

#[test]
fn zero_eta_metarm_equals_vanilla_bitwise() {
    let pairs = separable(100, 2);
    let meta = meta_set(20, 4, 2);
    let spec = ModelSpec::new(2, 3, vec![6]).with_seed(2);
    let init = init_params(&spec).unwrap();
    for optimizer in [OuterOptimizer::Sgd, OuterOptimizer::Adam] {
        let cfg = TrainConfig {
            eta: 0.0,
            alpha: 0.05,
            steps: Some(120),
            optimizer,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(TrainMode::Vanilla, &init, &pairs, &meta, &cfg, None).unwrap();
        let b = train(TrainMode::Metarm, &init, &pairs, &meta, &cfg, None).unwrap();
        assert_eq!(a.params.values(), b.params.values());
    }
}

#[test]
fn tiny_eta_step_is_continuous() {
    let pairs = separable(16, 3);
    let meta = meta_set(16, 5, 3);
    let spec = ModelSpec::new(2, 3, vec![8, 8]).with_seed(3);
    let params = init_params(&spec).unwrap();
    let step = |eta: f64| -> ParamVector {
        let cfg = TrainConfig {
            eta,
            ..TrainConfig::default()
        };
        let ctx = StepContext {
            config: &cfg,
            mode: TrainMode::Metarm,
            validation: None,
        };
        let mut state = OptimizerState::new(OuterOptimizer::Sgd, params.len());
        metarm_step(&params, &pairs, &meta, &ctx, &mut state, 0, None).unwrap().0
    };
    let base = step(0.0);
    let nudged = step(1e-8);
    let update = base.sub(&params).norm();
    assert!(update > 0.0);
    assert!(nudged.sub(&base).norm() <= 1e-6 * update);
}

#[test]
fn ascent_step_raises_the_difference_loss() {
    for seed in 0..10 {
        let spec = ModelSpec::new(2, 3, vec![5]).with_seed(seed);
        let params = init_params(&spec).unwrap();
        let meta = meta_set(6, 4, seed + 100);
        let norm = DiffNormalization::Verbatim;
        let before = difference_loss(&params, &meta, norm).unwrap().0;
        let mut eta = 1.0;
        let mut raised = false;
        for _ in 0..=20 {
            let adapted = meta_ascend(&params, &meta, eta, norm, 0).unwrap();
            if difference_loss(&adapted, &meta, norm).unwrap().0 >= before {
                raised = true;
                break;
            }
            eta /= 2.0;
        }
        assert!(raised, "seed {seed}");
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let pairs = separable(64, 4);
    let meta = meta_set(10, 3, 4);
    let spec = ModelSpec::new(2, 3, vec![4]).with_seed(4);
    let init = init_params(&spec).unwrap();
    let cfg = TrainConfig {
        eta: 0.05,
        alpha: 0.01,
        epochs: 3,
        optimizer: OuterOptimizer::Adam,
        ..TrainConfig::default()
    };
    let a = train(TrainMode::Metarm, &init, &pairs, &meta, &cfg, Some(&pairs)).unwrap();
    let b = train(TrainMode::Metarm, &init, &pairs, &meta, &cfg, Some(&pairs)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), 12);
}
