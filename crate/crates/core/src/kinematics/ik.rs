//! Whole-body inverse kinematics over the node set.
//!
//! Minimizes `sum_i w_i^2 * |fk_i(q) - target_i|^2` subject to box joint
//! limits with damped Gauss-Newton (Levenberg-Marquardt) steps. Joints that
//! sit on a bound with the gradient pushing outward are frozen for the step
//! and every candidate is projected back onto the box, so iterates never
//! leave the limits.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::chain::{IkWeights, JointVector, KinematicChain, NodeState};
use super::sample::sample_in_limits;
use crate::error::{ensure, Result};

/// Per-node residual below which a node set counts as kinematically feasible.
pub const FEASIBILITY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct IkOptions {
    pub max_iters: usize,
    /// Convergence threshold on the infinity norm of the projected gradient.
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Extra random-start solves attempted when the first one is unconverged.
    pub restarts: usize,
    pub restart_seed: u64,
    pub initial_damping: f64,
    /// Keep the objective after every accepted step in the report.
    pub record_trace: bool,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            max_iters: 200,
            grad_tol: 1e-14,
            step_tol: 1e-12,
            restarts: 1,
            restart_seed: 0x6b61_6470,
            initial_damping: 1e-3,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkReport {
    pub q: JointVector,
    /// Weighted squared residual at `q`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Number of random restarts that were run.
    pub restarts_used: usize,
    /// Objective after each accepted step (only with `record_trace`).
    pub trace: Vec<f64>,
}

impl IkReport {
    pub fn unconverged(&self) -> bool {
        !self.converged
    }
}

/// Reusable solver bound to a chain, weights and options.
#[derive(Debug, Clone)]
pub struct IkSolver<'a> {
    chain: &'a KinematicChain,
    weights: Vec<f64>,
    opts: IkOptions,
}

impl<'a> IkSolver<'a> {
    pub fn new(chain: &'a KinematicChain, weights: &IkWeights, opts: IkOptions) -> Result<Self> {
        weights.validate(chain.n_nodes())?;
        Ok(IkSolver {
            chain,
            weights: weights.0.clone(),
            opts,
        })
    }

    pub fn with_defaults(chain: &'a KinematicChain) -> Self {
        IkSolver {
            chain,
            weights: chain.default_weights().0,
            opts: IkOptions::default(),
        }
    }

    pub fn chain(&self) -> &KinematicChain {
        self.chain
    }

    pub fn options(&self) -> &IkOptions {
        &self.opts
    }

    pub fn solve(&self, target: &NodeState, q_init: &JointVector) -> Result<IkReport> {
        ensure!(
            target.len() == self.chain.n_nodes(),
            "target has {} nodes, chain has {}",
            target.len(),
            self.chain.n_nodes()
        );
        ensure!(target.is_finite(), "IK target is not finite");
        self.solve_flat(&target.flat(), &q_init.0)
    }

    /// Solve against a flat `[x0, y0, z0, ...]` target.
    pub fn solve_flat(&self, target: &[f64], q_init: &[f64]) -> Result<IkReport> {
        let n = self.chain.n_dof();
        ensure!(
            target.len() == 3 * self.chain.n_nodes(),
            "flat target has {} values, expected {}",
            target.len(),
            3 * self.chain.n_nodes()
        );
        ensure!(
            target.iter().all(|v| v.is_finite()),
            "IK target is not finite"
        );
        ensure!(
            q_init.len() == n,
            "initial guess has {} entries, chain has {} joints",
            q_init.len(),
            n
        );
        ensure!(
            q_init.iter().all(|v| v.is_finite()),
            "initial guess is not finite"
        );

        let mut start = q_init.to_vec();
        self.chain.clamp(&mut start);
        let mut best = self.descend(target, start);
        if best.converged || self.opts.restarts == 0 {
            return Ok(best);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.restart_seed);
        let limits = self.chain.limits();
        let init = JointVector(q_init.to_vec());
        let mut total_iters = best.iterations;
        for r in 0..self.opts.restarts {
            let start = sample_in_limits(&limits, &mut rng);
            let cand = self.descend(target, start);
            total_iters += cand.iterations;
            best.restarts_used = r + 1;
            let better = cand.objective < best.objective - 1e-12;
            let tie = (cand.objective - best.objective).abs() < 1e-12
                && cand.q.distance(&init) < best.q.distance(&init);
            if better || tie {
                let used = best.restarts_used;
                best = cand;
                best.restarts_used = used;
            }
        }
        best.iterations = total_iters;
        Ok(best)
    }

    fn residual(&self, q: &[f64], target: &[f64], r: &mut [f64]) -> f64 {
        self.chain.fk_flat_into(q, r);
        let mut f = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            for c in 0..3 {
                let i = 3 * k + c;
                r[i] = w * (r[i] - target[i]);
                f += r[i] * r[i];
            }
        }
        f
    }

    fn descend(&self, target: &[f64], mut q: Vec<f64>) -> IkReport {
        let n = self.chain.n_dof();
        let rows = 3 * self.chain.n_nodes();
        let (lo, hi): (Vec<f64>, Vec<f64>) = self.chain.limits().into_iter().unzip();

        let mut r = vec![0.0; rows];
        let mut r_new = vec![0.0; rows];
        let mut f = self.residual(&q, target, &mut r);
        let mut trace = Vec::new();
        if self.opts.record_trace {
            trace.push(f);
        }

        let mut damping = self.opts.initial_damping;
        let mut converged = false;
        let mut iterations = 0;
        let mut need_jac = true;
        let mut jac = DMatrix::zeros(rows, n);
        let mut grad = vec![0.0; n];
        let mut free = vec![true; n];

        while iterations < self.opts.max_iters {
            iterations += 1;
            if need_jac {
                jac = self.chain.jacobian_unchecked(&q);
                for (k, w) in self.weights.iter().enumerate() {
                    for c in 0..3 {
                        jac.row_mut(3 * k + c).scale_mut(*w);
                    }
                }
                for j in 0..n {
                    grad[j] = (0..rows).map(|i| jac[(i, j)] * r[i]).sum();
                }
                let mut gmax: f64 = 0.0;
                for j in 0..n {
                    let at_lo = q[j] <= lo[j] && grad[j] > 0.0;
                    let at_hi = q[j] >= hi[j] && grad[j] < 0.0;
                    free[j] = !(at_lo || at_hi);
                    if free[j] {
                        gmax = gmax.max(grad[j].abs());
                    }
                }
                if gmax <= self.opts.grad_tol {
                    converged = true;
                    break;
                }
                need_jac = false;
            }

            let idx: Vec<usize> = (0..n).filter(|&j| free[j]).collect();
            let nf = idx.len();
            let mut a = DMatrix::zeros(nf, nf);
            let mut b = DVector::zeros(nf);
            for (ai, &i) in idx.iter().enumerate() {
                b[ai] = -grad[i];
                for (aj, &j) in idx.iter().enumerate().skip(ai) {
                    let v: f64 = (0..rows).map(|row| jac[(row, i)] * jac[(row, j)]).sum();
                    a[(ai, aj)] = v;
                    a[(aj, ai)] = v;
                }
            }
            for d in 0..nf {
                a[(d, d)] += damping;
            }
            let delta = match a.cholesky() {
                Some(ch) => ch.solve(&b),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };

            let mut q_new = q.clone();
            for (ai, &i) in idx.iter().enumerate() {
                q_new[i] = (q[i] + delta[ai]).clamp(lo[i], hi[i]);
            }
            let step: f64 = q_new
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if step <= self.opts.step_tol {
                converged = true;
                break;
            }
            let f_new = self.residual(&q_new, target, &mut r_new);
            if f_new < f {
                q = q_new;
                std::mem::swap(&mut r, &mut r_new);
                f = f_new;
                damping = (damping * 0.3).max(1e-15);
                need_jac = true;
                if self.opts.record_trace {
                    trace.push(f);
                }
            } else {
                damping *= 4.0;
                if damping > 1e16 {
                    // No descent direction left at machine precision.
                    converged = true;
                    break;
                }
            }
        }

        IkReport {
            q: JointVector(q),
            objective: f,
            iterations,
            converged,
            restarts_used: 0,
            trace,
        }
    }

    /// Mean unweighted per-node distance at the solve_ik solution.
    pub fn ik_error(&self, target: &NodeState, q_init: &JointVector) -> Result<(f64, IkReport)> {
        let report = self.solve(target, q_init)?;
        let reached = self.chain.forward_kinematics(&report.q)?;
        Ok((reached.mean_distance(target), report))
    }
}

/// Solve the weighted, limit-constrained node IK problem with default options.
pub fn solve_ik(
    chain: &KinematicChain,
    target: &NodeState,
    weights: &IkWeights,
    q_init: &JointVector,
) -> Result<IkReport> {
    IkSolver::new(chain, weights, IkOptions::default())?.solve(target, q_init)
}

/// Mean per-node Euclidean residual (meters) after solving IK for `target`.
pub fn ik_error(
    chain: &KinematicChain,
    target: &NodeState,
    weights: &IkWeights,
    q_init: &JointVector,
) -> Result<f64> {
    let solver = IkSolver::new(chain, weights, IkOptions::default())?;
    Ok(solver.ik_error(target, q_init)?.0)
}
