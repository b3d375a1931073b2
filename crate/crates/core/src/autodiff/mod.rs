//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every evaluation (define-by-run). Leaves are
//! created with [`Graph::param`] or [`Graph::constant`]; every primitive
//! appends one node whose output shape is fully determined by its inputs.
//! Shape mismatches are programming errors and panic.

mod check;
mod graph;
mod tensor;

pub use check::{check_gradients, finite_diff_check, FiniteDiffReport, ABS_FALLBACK};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
