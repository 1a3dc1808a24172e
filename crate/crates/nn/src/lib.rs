//! Small dense neural-network engine and the direction / watershed networks
//! built on it.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use graph::{Conv, Layer, Model, NodeId, Param};
pub use tensor::{Real, Tensor};
