use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::chain::{JointVector, KinematicChain};
use super::sample::sample_feasible_config;

/// Outcome of the node-sufficiency check.
#[derive(Debug, Clone, Serialize)]
pub struct SufficiencyReport {
    pub samples: usize,
    pub full_rank: usize,
    /// Configurations where the node Jacobian lost rank, with the rank found.
    pub deficient: Vec<(JointVector, usize)>,
    pub min_rank: usize,
}

impl SufficiencyReport {
    /// At least 99% of sampled configurations have full column rank.
    pub fn sufficient(&self) -> bool {
        self.full_rank * 100 >= self.samples * 99
    }

    pub fn fraction_full_rank(&self) -> f64 {
        self.full_rank as f64 / self.samples.max(1) as f64
    }
}

pub const SUFFICIENCY_SAMPLES: usize = 1000;

/// Numerical rank of the node Jacobian at sampled configurations.
pub fn validate_node_sufficiency(chain: &KinematicChain) -> SufficiencyReport {
    validate_node_sufficiency_with(chain, SUFFICIENCY_SAMPLES, 0x5eed)
}

pub fn validate_node_sufficiency_with(
    chain: &KinematicChain,
    samples: usize,
    seed: u64,
) -> SufficiencyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.n_dof();
    let mut full_rank = 0;
    let mut min_rank = n;
    let mut deficient = Vec::new();
    for _ in 0..samples {
        let q = sample_feasible_config(chain, &mut rng);
        let jac = chain.jacobian_unchecked(&q.0);
        let sv = jac.singular_values();
        let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
        let tol = (smax * 1e-9).max(1e-12);
        let rank = sv.iter().filter(|s| **s > tol).count();
        min_rank = min_rank.min(rank);
        if rank == n {
            full_rank += 1;
        } else {
            deficient.push((q, rank));
        }
    }
    SufficiencyReport {
        samples,
        full_rank,
        deficient,
        min_rank,
    }
}
