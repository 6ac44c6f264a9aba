//! Dense `f64` tensors and a recording tape for reverse-mode differentiation.
//!
//! The primitive set is the one a small convolutional network needs: elementwise
//! arithmetic, matrix product, grouped/dilated/strided convolution, pooling,
//! batch normalisation, (log-)softmax and cross-entropy, channel concatenation,
//! and the handful of shape and reduction ops around them.
//!
//! ```
//! use advnas_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use kernels::{Conv2dAttrs, Pool2dAttrs};
pub use tape::{sign, BatchNormOut, BatchNormStats, Gradients, Tape, Var};
pub use tensor::Tensor;
