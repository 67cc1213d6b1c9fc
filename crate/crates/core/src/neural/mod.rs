//! Small reverse-mode differentiation kernel: dense layers, GRU cells, 1-D
//! convolution and softmax cross-entropy over `f64` matrices, plus Adam,
//! checkpoints and a reproducible random stream.

mod graph;
mod params;
mod rng;

pub use graph::{Gradients, Graph, Padding, Var};
pub(crate) use graph::{gru_cell_forward, matmul, matmul_acc};
pub use params::{AdamConfig, ParamId, ParameterSet};
pub use rng::{sample_categorical, RngStream};
