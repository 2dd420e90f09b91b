//! Minimal dense tensor core with reverse-mode automatic differentiation.
//!
//! Values live in plain [`Tensor`]s. A forward pass registers tensors on a
//! [`Tape`] as leaves, applies differentiable operations that return [`Var`]
//! handles, and [`Tape::backward`] walks the recorded nodes in reverse
//! construction order to accumulate gradients into every leaf that asked
//! for one.
//!
//! Broadcasting is deliberately narrow: the right-hand operand of an
//! elementwise op may match the full shape, a trailing suffix of it (a bias
//! repeated over leading batch dimensions), or be a scalar. Anything else
//! needs an explicit reshape.

mod error;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, ParamGradError};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
