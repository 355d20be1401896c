//! Masked self-attention sequence models for multivariate time series.
//!
//! The model embeds each step with a 1-D convolution, adds a fixed random
//! positional table, and runs `N` attention modules whose self-attention is
//! restricted to a causal band of `r` past steps. A dense interpolation
//! layer folds the `T × d` sequence into a `d · M` vector for sequence-level
//! heads; per-step heads read the causal representations directly.

pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod interp;
mod kernels;
pub mod kv;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
