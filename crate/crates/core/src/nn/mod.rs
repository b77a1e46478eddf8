//! Small f64 reverse-mode autodiff and optimizers for the learned models.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{AdamW, Sgd};
pub use tensor::{matmul, Tensor};

use rand::Rng;

/// Linear layer weights (`in x out`) and bias (`1 x out`), uniform
/// Kaiming-style init as in common deep-learning frameworks.
pub fn init_linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (
        Tensor::uniform(fan_in, fan_out, bound, rng),
        Tensor::uniform(1, fan_out, bound, rng),
    )
}

/// Sum of squared entries over all tensors, then square root.
pub fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    n
}

#[cfg(test)]
mod tests;
