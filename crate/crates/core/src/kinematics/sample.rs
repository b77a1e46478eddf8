use rand::Rng;

use super::chain::{JointVector, KinematicChain};

/// Uniform sample over a box of per-joint intervals. Degenerate intervals
/// `[a, a]` always yield `a`.
pub fn sample_in_limits<R: Rng + ?Sized>(limits: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    limits
        .iter()
        .map(|&(lo, hi)| {
            let u: f64 = rng.random();
            if hi > lo {
                (lo + u * (hi - lo)).min(hi)
            } else {
                lo
            }
        })
        .collect()
}

/// Configuration drawn uniformly from the chain's joint limits.
pub fn sample_feasible_config<R: Rng + ?Sized>(chain: &KinematicChain, rng: &mut R) -> JointVector {
    JointVector(sample_in_limits(&chain.limits(), rng))
}
