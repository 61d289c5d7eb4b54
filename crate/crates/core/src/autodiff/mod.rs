//! Tensors, a reverse-mode differentiation tape and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, SparseMatrix, Var};
pub use real::Real;
pub use rng::RngStream;
pub use tensor::Tensor;
