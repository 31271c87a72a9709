//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: row-major [`Tensor`] storage, a recording
//! [`Tape`] holding the operator sequence of one forward pass, the operator
//! set needed by convolutional correspondence models (convolution, matrix
//! product, activations, rearrangement helpers), pixel-level losses, SGD with
//! momentum, and a bit-exact named-tensor archive.
//!
//! Everything is computed in `f64`. There is no implicit broadcasting: shape
//! mismatches are errors, and the few broadcasts that exist ([`Tensor::mul_gate`])
//! are dedicated operators. Custom differentiable operators plug in through
//! [`Tensor::from_op`].

pub mod checkpoint;
mod error;
pub mod losses;
mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use ops::Conv2d;
pub use tape::{OpCtx, RecordingGuard, Tape};
pub use tensor::{Data, Tensor};
