//! Minimal dense tensor algebra with reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` buffers. Every forward kernel is sequential, so
//! results are bitwise reproducible for fixed inputs. A [`Tape`] records the
//! operations applied to its [`Var`] handles and replays them in reverse to
//! produce gradients.

mod error;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use ops::{apply, Op};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
