//! Fusion, the objective, the optimizer loop, inference and evaluation.

mod config;
mod eval;
mod losses;
mod run;
mod step;

pub use config::{LossWeights, Reduction, TrainConfig};
pub use eval::{
    evaluate, evaluate_store, infer, load_checkpoint, predict, sample_view, CheckpointMeta, EvalReport, Prediction,
    ViewAccuracy,
};
pub use losses::{argmax, classification_loss, fuse, total_loss, LossReport};
pub use run::{train, EpochSummary, MetricsLog, MetricsRow, TrainOutcome, METRICS_HEADER};
pub use step::{forward_batch, BatchInput, PrototypeBank, StepTerms};
