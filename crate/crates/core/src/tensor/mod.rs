//! Dense matrices and a small reverse-mode autodiff engine.

mod gradcheck;
mod graph;
mod matrix;

pub use gradcheck::{grad_check, grad_check_with_fault, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use matrix::{argmax, softmax, Matrix};
