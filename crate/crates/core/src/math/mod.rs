//! Dense numeric substrate: matrices, transformer kernels with explicit
//! backward passes, factorizations, and the optimizer.

mod kernels;
mod linalg;
mod matrix;
mod optim;

pub use kernels::{
    attention, attention_backward, attention_forward, gelu, gelu_backward, gelu_forward, gelu_grad, layer_norm,
    layer_norm_backward, linear, linear_backward, softmax_row, LayerNormCache, LAYER_NORM_EPS,
};
pub use linalg::{cholesky, cholesky_solve, cholesky_solve_vec, householder_qr, svd, Svd};
pub use matrix::{matmul, BoolMatrix, Matrix};
pub(crate) use matrix::{axpy, dot};
pub use optim::{AdamWConfig, LrSchedule, OptimState};
