//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Build a computation on a [`Tape`], then call [`Tape::backward`] on a `1 x 1`
//! result:
//!
//! ```
//! use glassvae_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
//! let loss = tape.sum(tape.square(x));
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, gradient_check, numeric_gradients, relative_error};
pub use tape::{clip_global_norm, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
