//! Two-stage conditional diffusion: dense coarse occupancy, then sparse
//! fine SDF and color.

pub mod corrupt;
pub mod sample;
pub mod schedule;
pub mod stage;
pub mod train;

pub use corrupt::corrupt_occupancy;
pub use sample::{ddim_sample, denormalize_fine, infer_pipeline, sample_stage1, sample_stage2, PipelineOutput, RunReport};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use stage::{AugmentConfig, Stage, StageConfig, StageMeta, StageModel, TrainConfig};
pub use train::{train_example, train_log_path, train_model, train_stage1, train_stage2, Augmented, TrainOutcome};
