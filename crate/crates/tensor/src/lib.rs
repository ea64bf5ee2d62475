//! Dense `f64` tensors, a reverse-mode differentiation tape, and the handful
//! of layers (attention, feed-forward, layer norm, GRU) the translation model
//! and reward teacher are built from.

mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{cosine_similarity, softmax_rows, Gradients, Graph, Var};
pub use optim::{adam_step, Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
