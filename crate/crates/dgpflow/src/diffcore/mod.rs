//! Dense `f64` tensors, a reverse-mode tape, nets, and Adam.
//!
//! Everything downstream differentiates through this module: the tape records
//! eagerly-evaluated ops over [`Tensor`] values and replays them backwards
//! with fixed accumulation order, so gradients are deterministic for a given
//! graph. The op set deliberately stops at first-order reverse mode; where a
//! derivative-of-derivative is needed (the divergence of a velocity field),
//! the forward-mode linearisation is laid down as ordinary ops instead — see
//! [`nn::Mlp::jvp_graph`].

pub mod graph;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use nn::{time_features, Binding, Mlp, ParamId, ParamStore};
pub use optim::Adam;
pub use tensor::Tensor;
