//! Training, evaluation protocols, ablations and prediction export.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod predict;
pub mod train;

pub use ablation::{ablate, audit, AblationReport, Variant};
pub use config::{DataConfig, OptimConfig, TrainConfig};
pub use eval::{evaluate, evaluate_dataset, EvalReport, Protocol};
pub use predict::{predict, predict_sample, PredictInput, Prediction};
pub use train::{fit, train, Adam, EpochLog, FitResult, Prepared, TrainSummary};
