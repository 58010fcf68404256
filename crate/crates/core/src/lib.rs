//! Convolutional networks whose layers draw their kernels from shared template
//! banks, with tools to measure layer similarity, fold trained networks into
//! explicit loops, and benchmark on a synthetic shortest-path task.

pub mod autodiff;
pub mod error;
pub mod folding;
pub mod gradcheck;
pub mod model;
pub mod sharing;
pub mod task;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
