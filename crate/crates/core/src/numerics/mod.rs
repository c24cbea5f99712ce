//! Dense tensors, reverse-mode autodiff and the layers built on it.

mod adam;
pub mod checkpoint;
pub mod crf;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use graph::{sigmoid, softmax_in_place, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, INIT_SCALE};
pub use tensor::{cosine, log_sum_exp, Tensor};
