//! Dense-tensor math with reverse-mode differentiation and Adam, sized for
//! training small MLPs and pushing gradients through a frozen policy into a
//! dynamics model.

pub mod adam;
pub mod checkpoint;
pub mod linalg;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mlp::{Activation, Mlp};
pub use tape::{GradTape, GradientMap, NodeId, ParamKind};
pub use tensor::{l2_distance, l2_norm, Tensor};
