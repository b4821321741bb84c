//! Tiny encoder, synthetic tasks and metrics used to exercise every method end to end.

pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod task;

pub use metrics::{accuracy, evaluate, pearson, Metric};
pub use model::{build_model, LossAndGrads, Targets, ToyModel, ToyModelConfig};
pub use pretrain::{pretrain, Pretrained, Pretraining};
pub use task::{Dataset, Example, Label, SyntheticTask, TaskKind};
