//! Minimal dense tensor library with a reverse-mode automatic differentiation tape.
//!
//! Values live in row-major [`Tensor`]s. A [`Tape`] records every operation applied
//! to its [`Var`] handles and replays them in reverse to produce gradients. A tape
//! built with [`Tape::no_grad`] records nothing and never allocates gradient
//! buffers, which is what inference and non-differentiated forward passes use.
//!
//! Precision is a type parameter: `f32` for training, `f64` for gradient checks.

mod error;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use ops::Normalization;
pub use scalar::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
