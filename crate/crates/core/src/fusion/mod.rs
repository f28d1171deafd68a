//! Losses, the optimizer, teacher training and weight fusion.

mod loss;
mod optim;
mod rule;
mod train;

pub use loss::{cross_entropy, voxel_accuracy};
pub use optim::OptimState;
pub use rule::{compute_alpha, fuse_weights, Alpha, AlphaMode, FuseMode, ALPHA_CEIL, ALPHA_FLOOR};
pub use train::{
    ablation_alpha, ablation_csv, default_ablation_alphas, evaluate, metrics_csv, train_fuse,
    train_step, train_teacher, AblationRow, FuseRun, FusionState, MetricRow, StepStats, TeacherMode,
    TrainOptions, CSV_HEADER,
};
