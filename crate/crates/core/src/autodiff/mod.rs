//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

pub mod gradcheck;
mod kernels;
pub mod optim;
mod tape;

pub use optim::Adam;
pub use tape::{Gradients, LeafInfo, OpKind, Tape, Var};
