pub mod binning;
pub mod codec;
pub mod datasets;
pub mod diagnostics;
pub mod entropy;
pub mod error;
pub mod lloyd;
pub mod mlp;
pub mod param_store;
pub mod regularizer;
pub mod rng;
pub mod trainer;

pub use error::{HempError, Result};
