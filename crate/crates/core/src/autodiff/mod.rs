//! Reverse-mode differentiation over small dense networks, and Adam.

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState, ParamSlot};
pub use mlp::{build_mlp, mlp_forward, Activation, MlpParams};
pub(crate) use tape::masked_log_softmax;
pub use tape::{GradientMap, ParamId, Tape, Var};
pub use tensor::Tensor;
