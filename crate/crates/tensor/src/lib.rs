//! Dense tensors of rank ≤ 3 with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is an owned value with an identity. A [`Tape`] records one
//! forward pass: bind tensors as leaves, apply operations to the returned
//! [`Var`] handles, then call [`Tape::backward`] on a one-element loss.
//!
//! ```
//! use sfa_tensor::{Init, Tape, Tensor};
//!
//! let x = Tensor::<f64>::create(&[2], Init::Data(vec![1.0, 2.0])).unwrap().with_grad();
//! let mut tape = Tape::new();
//! let v = tape.leaf(&x);
//! let sq = tape.mul(v, v).unwrap();
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&x).unwrap(), &[2.0, 4.0]);
//! ```

pub mod check;
mod error;
mod real;
mod shape;
mod tape;
mod tensor;

pub use check::{check_gradients, compare, finite_diff_gradient, relative_error, GradCheck};
pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{BinaryKind, Elementwise, Gradients, ReduceKind, Tape, UnaryKind, Var};
pub use tensor::{Init, Tensor, TensorId};
