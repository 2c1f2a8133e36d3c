//! Training orchestration, inference, metrics, ablations and plots.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod model;
pub mod plot;
pub mod train;

pub use config::{apply_overrides, ModelConfig, PitchVariant, Preset, TrainConfig};
pub use model::{Example, Inference, Model, ScoreInputs};
pub use train::{train_stage1, train_stage2, Checkpoint, LogRow, TrainLog};
pub use eval::{baselines, evaluate, evaluate_checkpoint, Baselines, EvalOptions, EvalReport, ModelEval, Prediction};
pub use ablation::{run_ablation, AblationConfig, AblationTable, Variant};
pub use plot::{plot, PlotTracks};
