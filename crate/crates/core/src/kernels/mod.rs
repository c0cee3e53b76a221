//! Dense matrix primitives and the reverse-mode tape built on them.

pub mod matrix;
pub mod tape;

pub use matrix::{
    argmax, cross_entropy_from_logits, finite_difference_gradient, log_sum_exp, matmul, matmul_at, matmul_bt,
    matmul_with, row_softmax, softmax, tanh_map, Matrix,
};
pub use tape::{Gradients, Tape, Var};
