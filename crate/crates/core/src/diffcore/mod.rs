//! Dense tensors, reverse-mode differentiation, and the SGD/Adam update rules.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, sgd_step, Adam, AdamState};
pub use tape::{concat, grad, Tape, Var};
pub use tensor::{Tensor, WMT1_MAGIC};

pub(crate) use tape::{gemm, sign};

use rand::Rng as _;

use crate::rng::Rng;

/// `[fan_in, fan_out]` weight drawn uniformly from `±1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// `out = x * w` for row-major `x: [rows, k]`, `w: [k, n]`, without a tape.
pub fn matmul(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), rows * k);
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, (k, 1), w.data(), (n, 1), &mut out, false);
    out
}
