//! Dense tensors, a tape-style reverse-mode gradient graph, and the training
//! utilities built on it (parameter store, clipping, Adam, checkpoints,
//! finite-difference checks).

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use conv::Padding;
pub use graph::{Gradients, Graph, Var};
pub use params::{GradStore, ParamStore};
pub use tensor::{broadcast_shapes, Tensor};
