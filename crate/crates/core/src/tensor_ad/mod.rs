//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with the layers and optimizer used by the signal models.

mod graph;
mod layers;
mod optim;

pub use graph::{sigmoid, Gradients, Graph, Tensor, Var};
pub use layers::{dense, dropout, glorot_uniform, lstm_step, LstmVars, ParamId, Parameters};
pub use optim::{clip_gradient_norm, global_norm, AdamState};
