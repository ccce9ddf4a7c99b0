//! Minimal tensor, autodiff tape, and optimizer used by the network.

pub(crate) mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

pub use optim::Adam;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
