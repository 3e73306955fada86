//! Pretraining, the three training modes, evaluation policies, and the
//! run loop.

pub mod config;
pub mod data;
pub mod divergence;
pub mod eval;
pub mod modes;
pub mod pretrain;
pub mod registry;
pub mod run;
pub mod steps;

pub use config::TrainConfig;
pub use data::{AugmentPool, TrainData};
pub use eval::{default_policies, evaluate, EvalContext, EvalOptions, EvalPolicy};
pub use modes::{default_modes, StepReport, TrainState, TrainingMode};
pub use pretrain::{pretrain, PretrainOutcome, Which};
pub use registry::Registry;
pub use run::{train, RunOptions, RunSummary};
pub use steps::{BiLevelStepReport, Models};
