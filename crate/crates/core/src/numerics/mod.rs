//! Tensors, reverse-mode differentiation, dense layers and Adam.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, Adam};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::{sigmoid, softmax_in_place};
pub use params::{forward_mlp, Activation, AdamState, Dense, ParamSet};
pub use rng::Rng;
pub use tensor::Tensor;
