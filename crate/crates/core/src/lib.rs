pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gcn;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod segmentation;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
