//! Reward-model training with a meta-learned difference objective.
//!
//! The crate provides an MLP reward model with hand-written backpropagation,
//! the pairwise preference loss and the multi-response difference loss, a
//! first-order meta-training loop, a synthetic preference environment with a
//! known oracle reward, iterative policy-improvement rounds, and diagnostics
//! over reward-difference distributions.

pub mod checkpoint;
pub mod cli;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{init_params, score, score_grad, Activation, FeatureInput, ModelSpec, ParamVector};
pub use objectives::{
    difference_loss, pairwise_loss, rm_accuracy, vanilla_loss, DiffNormalization, MetaSample,
    PreferencePair,
};
pub use trainer::{alignment_probe, metarm_step, train, TrainConfig, TrainMode};
