//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records forward operations; [`Tape::backward`] returns
//! [`Gradients`] for every tracked leaf. Parameters live in a [`ParamSet`],
//! are placed on a tape with [`ParamSet::bind`], and are updated by
//! [`optimizer_step`].
//!
//! ```
//! use lot_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{
    apply_update, optimizer_step, BoundParams, OptimizerConfig, OptimizerKind, OptimizerState, ParamSet,
};
pub use tape::{Gradients, OpKind, Tape, Var, LOG_PROB_FLOOR};
pub use tensor::Tensor;
