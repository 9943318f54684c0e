pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod luminance;
pub mod metrics;
pub mod mirror;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{IamlError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
