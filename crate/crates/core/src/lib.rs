//! Binary image classifier built from a YOLOv8-style Conv/C2f backbone, with
//! hand-written backpropagation, four first-order optimizers, evaluation
//! metrics and an exact t-SNE for dataset visualization.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod plot;
pub mod tensor;
pub mod train;
pub mod tsne;

pub use error::{Error, Result};
pub use tensor::Tensor;
