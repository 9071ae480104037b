//! Fixed-point neural network inference with low-resolution, wrapping
//! accumulators.

pub mod cli;
pub mod cyclic;
pub mod error;
pub mod fxp;
pub mod kernels;
pub mod netgraph;
pub mod packing;
pub mod train;

pub use error::{Error, Result};
