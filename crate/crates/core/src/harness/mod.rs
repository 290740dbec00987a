//! Training, evaluation, ablation, checkpointing and rendering.

mod ablation;
mod checkpoint;
mod config;
mod eval;
mod render;
mod train;

pub use ablation::{ablation_configs, run_ablation, AblationKind, AblationReport, AblationRow, ClassScore};
pub use checkpoint::Checkpoint;
pub use config::{DataSource, DataSpec, LrSchedule, RunConfig, TrainConfig};
pub use eval::{evaluate, Detector, EvalReport, RuntimeStats};
pub use render::{render_bev, render_camera, render_detections, render_scene, RenderOutput};
pub use train::{derive_seed, train, EvalPoint, Pretrained, TrainMode, TrainOutcome};
