//! Tensor arithmetic, reverse-mode differentiation and the supporting
//! training plumbing (parameters, optimizer, random streams, checkpoints).

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Container;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use optim::Adam;
pub use params::ParamStore;
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};
