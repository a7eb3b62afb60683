//! Minimal reverse-mode differentiation over dense arrays.
//!
//! Only the operations the editing network needs are provided: embedding
//! lookup, 1-D convolution, GLU, linear maps, dot-product attention
//! (`matmul_nt` + `softmax` + `matmul`), elementwise add/scale/mul and
//! summed cross-entropy. Values are recorded on a [`Tape`] that borrows the
//! parameter slots; [`Tape::backward`] returns a gradient for every slot.
//!
//! ```
//! use quickedit::autodiff::{Array, Tape};
//!
//! // loss = ½‖θ‖²  ⇒  ∇loss = θ
//! let params = vec![Array::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap()];
//! let mut tape = Tape::new(&params);
//! let theta = tape.param(0);
//! let sq = tape.mul(theta, theta).unwrap();
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum(half);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(0).data(), &[1.0, -2.0, 0.5]);
//! ```

mod array;
pub mod kernels;
mod tape;

pub use array::{Array, Scalar};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("tape was created without gradient recording")]
    GradDisabled,
}
