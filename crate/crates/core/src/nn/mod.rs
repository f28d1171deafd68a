//! Residual blocks, the global attention block and the 3D-DenseUNet built from them.

mod config;
mod layers;
mod model;
mod weights;

pub use config::ModelConfig;
pub use layers::{attention_block, downsample, residual_block, Attention, Ctx, QTransform};
pub use model::{
    argmax_classes, build_model, forward, infer_logits, layout, param_counts, predict, Init,
    ParamSpec,
};
pub use weights::{is_running_stat, NamedWeights};
