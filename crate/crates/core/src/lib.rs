//! Learning from Teaching regularization: datasets, models, training loops,
//! PPO with an imitability regularizer, and experiment recipes.

pub mod data;
pub mod harness;
mod error;
pub mod metrics;
pub mod model;
pub mod rl;
pub mod seed;
pub mod train;

pub use error::{LotError, Result};
