//! Dual encoder: frozen seeded text anchors with a trainable projector, and
//! a small trainable visual tower.

mod anchors;
pub mod checkpoint;
mod encoder;

pub use anchors::{anchor_base, anchor_matrix, AnchorConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use encoder::{
    encode_image, encode_images, encode_pooled, encode_text, encode_texts, init_params, pool_image,
    pool_images, project_anchors, visual_pre_norm, ModelConfig, ModelParams, ParamNodes,
    PARAM_NAMES, TAU_MAX, TAU_MIN,
};
