//! Probabilistic time-series forecasting with an encoder-decoder transformer
//! that conditions a one-step average-velocity flow head.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
