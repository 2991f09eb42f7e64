//! Tensors, a reverse-mode autodiff tape, and the primitives the networks are
//! built from.

mod attention;
pub mod gradcheck;
pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use attention::{multi_head_self_attention, AttentionOutput};
pub use gradcheck::{central_difference, grad_check, grad_check_params, GradCheckReport};
pub use params::{GradBuffer, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tape::{Binary, Params, Tape, Unary, Var};
pub use tensor::Tensor;
