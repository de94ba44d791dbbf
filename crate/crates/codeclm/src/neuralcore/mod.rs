//! Minimal dense-tensor math with reverse-mode differentiation and the
//! transformer building blocks used by every network in the crate.

mod block;
mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use block::{
    init_lora, init_stack, lora_apply, normal, normal_tensor, ones_tensor, stack_forward, swiglu,
    BlockConfig, LayerParams, LoraParams, StackParams, INIT_STD,
};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_MAX_COORDS, GRAD_CHECK_STEP};
pub use graph::{Gradients, Graph, NodeId, Param, ParamId, ParamStore};
pub use kernels::AttnMask;
pub use scalar::Scalar;
pub use tensor::Tensor;
