//! Deterministic dense math with reverse-mode gradients.

mod blocks;
mod gradcheck;
mod graph;
mod matrix;
mod params;

pub use blocks::{embedding, glorot, mhca, mhsa, perceptron_forward, AttentionBlock, Linear, PerceptronBlock};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, WorstCoordinate};
pub use graph::{Gradients, Graph, Var};
pub use matrix::{exact_sum, matmul, softmax_rows, Matrix};
pub use params::Parameterized;

