//! Synthetic data, the training objective, ablation runs and gradient certification.

mod data;
mod experiment;
mod gradcheck;
mod model;
mod train;

pub use data::{gen_synthetic, Dataset, Sample, SyntheticSpec};
pub use experiment::{
    feature_spread, run_experiment, run_variant, stabilization, ComparisonReport, DimensionSpread, ExperimentConfig,
    RunSummary, StabilizationReport, Variant, BALANCE_WINDOW,
};
pub use gradcheck::{gradcheck_suite, GradCheckCase, GradCheckOptions, SuiteReport};
pub use model::{AdamW, Model, ModelConfig, SampleVars};
pub use train::{
    accumulate_gradients, batch_objective, batch_objective_with, build_model, evaluate, objective_value, train, train_step, BatchLoss,
    EpochRecord, Metrics, StepRecord, TrainConfig, TrainTrace, DEFAULT_ALPHA,
};

use thiserror::Error;

use crate::dmc::DmcError;
use crate::numerics::NumericsError;
use crate::sics::SicsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sics(#[from] SicsError),
    #[error(transparent)]
    Dmc(#[from] DmcError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss at step {step}:\n{detail}")]
    NonFinite { step: usize, detail: String },
}
