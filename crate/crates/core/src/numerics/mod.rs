//! Dense tensors and a reverse-mode tape covering what the MAE graph needs.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
