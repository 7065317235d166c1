//! The point-query segmentation network shared by student and teacher.
//!
//! Points are embedded independently by a small perceptron. A fixed set of
//! queries, each a content vector plus a 3D position, is refined by
//! transformer decoder layers that cross-attend to the point features.
//! Masks are the sigmoid of query-feature dot products and classes come
//! from a linear head over the refined content.
//!
//! The student keeps its positions in a learnable bank. The teacher
//! instead derives them from the instance centers of the scene it is
//! labeling, and re-projects them onto those centers after every layer.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use config::ModelConfig;
pub use forward::{
    decoder_forward, encode_points, forward, forward_frozen, init_student_queries, init_teacher_position,
    positional_encoding, predict_classes, predict_masks, refine_teacher_position, CenterMode, ForwardOutput,
    Queries, SceneInputs,
};
pub use params::{param_shapes, BoundParams, ModelParams, POSITION_BANK};

use crate::assign::AssignError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("teacher position queries need at least one instance center")]
    NoInstances,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
}
