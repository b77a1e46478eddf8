//! Diffusion over action chunks with the noise defined on a lifted variable.
//!
//! For node actions the variable is the joint vector: actions are lifted
//! with IK, noised or denoised in joint space, clamped to the limits and
//! projected back with forward kinematics, so every emitted chunk is
//! reachable. The gripper channel is diffused as a plain scalar.

mod schedule;
mod space;

pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use space::{ActionSpace, AffineSpace, ExactIkSpace, MlpIkSpace};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::kinematics::{IkSolver, NodeState};

/// `steps` consecutive actions of `dim` coordinates plus a gripper value each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub steps: usize,
    pub dim: usize,
    pub coords: Vec<f64>,
    pub gripper: Vec<f64>,
}

impl ActionChunk {
    pub fn zeros(steps: usize, dim: usize) -> Self {
        ActionChunk {
            steps,
            dim,
            coords: vec![0.0; steps * dim],
            gripper: vec![0.0; steps],
        }
    }

    pub fn new(steps: usize, dim: usize, coords: Vec<f64>, gripper: Vec<f64>) -> Result<Self> {
        ensure!(
            coords.len() == steps * dim && gripper.len() == steps,
            "chunk of {steps} x {dim} got {} coordinates and {} gripper values",
            coords.len(),
            gripper.len()
        );
        Ok(ActionChunk {
            steps,
            dim,
            coords,
            gripper,
        })
    }

    pub fn from_node_states(states: &[NodeState]) -> Result<Self> {
        ensure!(!states.is_empty(), "empty chunk");
        let dim = 3 * states[0].len();
        let mut coords = Vec::with_capacity(states.len() * dim);
        for s in states {
            ensure!(3 * s.len() == dim, "node count differs within a chunk");
            coords.extend(s.flat());
        }
        let gripper = states.iter().map(|s| f64::from(u8::from(s.gripper))).collect();
        ActionChunk::new(states.len(), dim, coords, gripper)
    }

    pub fn step(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn step_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gripper_bit(&self, i: usize) -> bool {
        self.gripper[i] >= 0.5
    }

    pub fn node_state(&self, i: usize) -> NodeState {
        NodeState::from_flat(self.step(i), self.gripper_bit(i))
    }

    /// Per-step rows `[coords..., gripper]`, concatenated.
    pub fn interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps * (self.dim + 1));
        for i in 0..self.steps {
            out.extend_from_slice(self.step(i));
            out.push(self.gripper[i]);
        }
        out
    }

    pub fn from_interleaved(steps: usize, dim: usize, data: &[f64]) -> Result<Self> {
        ensure!(
            data.len() == steps * (dim + 1),
            "interleaved chunk has {} values, expected {}",
            data.len(),
            steps * (dim + 1)
        );
        let mut c = ActionChunk::zeros(steps, dim);
        for i in 0..steps {
            let row = &data[i * (dim + 1)..(i + 1) * (dim + 1)];
            c.step_mut(i).copy_from_slice(&row[..dim]);
            c.gripper[i] = row[dim];
        }
        Ok(c)
    }

    /// Mean over steps of the mean per-node distance to `other`.
    pub fn mean_node_distance(&self, other: &ActionChunk) -> f64 {
        let mut total = 0.0;
        let nodes = self.dim / 3;
        for i in 0..self.steps {
            let (a, b) = (self.step(i), other.step(i));
            for n in 0..nodes {
                let d: f64 = (0..3).map(|c| (a[3 * n + c] - b[3 * n + c]).powi(2)).sum();
                total += d.sqrt();
            }
        }
        total / (self.steps * nodes).max(1) as f64
    }
}

/// Standard-normal draws for the lifted variable and the gripper channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub var: Vec<f64>,
    pub gripper: Vec<f64>,
}

impl Noise {
    pub fn zeros(steps: usize, var_dim: usize) -> Self {
        Noise {
            var: vec![0.0; steps * var_dim],
            gripper: vec![0.0; steps],
        }
    }

    pub fn sample<R: Rng + ?Sized>(steps: usize, var_dim: usize, rng: &mut R) -> Self {
        let var = (0..steps * var_dim).map(|_| rng.sample(StandardNormal)).collect();
        let gripper = (0..steps).map(|_| rng.sample(StandardNormal)).collect();
        Noise { var, gripper }
    }
}

/// A chunk together with the admissible variable it was projected from.
#[derive(Debug, Clone, PartialEq)]
pub struct Lifted {
    pub chunk: ActionChunk,
    pub var: Vec<f64>,
}

/// Output of the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct Noised {
    pub lifted: Lifted,
    /// The variable before it was moved into the admissible set.
    pub pre: Vec<f64>,
}

fn check_space<S: ActionSpace + ?Sized>(space: &S, chunk: &ActionChunk) -> Result<()> {
    ensure!(
        chunk.dim == space.act_dim(),
        "chunk has {} coordinates per step, action space expects {}",
        chunk.dim,
        space.act_dim()
    );
    Ok(())
}

/// Lift every chunk step; `warm` holds one initial variable per step.
pub fn lift_chunk<S: ActionSpace + ?Sized>(
    space: &S,
    chunk: &ActionChunk,
    warm: &[f64],
) -> Result<Vec<f64>> {
    check_space(space, chunk)?;
    let d = space.var_dim();
    ensure!(
        warm.len() == chunk.steps * d,
        "warm start has {} values, expected {}",
        warm.len(),
        chunk.steps * d
    );
    let mut out = vec![0.0; chunk.steps * d];
    for i in 0..chunk.steps {
        space.lift(chunk.step(i), &warm[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d])?;
    }
    Ok(out)
}

/// Settle and project a variable chunk; gripper values pass through.
pub fn project_chunk<S: ActionSpace + ?Sized>(space: &S, mut var: Vec<f64>, gripper: Vec<f64>) -> Lifted {
    let (d, a) = (space.var_dim(), space.act_dim());
    let steps = gripper.len();
    let mut chunk = ActionChunk::zeros(steps, a);
    chunk.gripper = gripper;
    for i in 0..steps {
        let v = &mut var[i * d..(i + 1) * d];
        space.settle(v);
        space.project(v, chunk.step_mut(i));
    }
    Lifted { chunk, var }
}

fn check_step(schedule: &NoiseSchedule, k: usize, allow_zero: bool) -> Result<()> {
    let lo = usize::from(!allow_zero);
    ensure!(
        k >= lo && k <= schedule.steps(),
        "diffusion step {k} outside {lo}..={}",
        schedule.steps()
    );
    Ok(())
}

fn check_noise(noise: &Noise, steps: usize, d: usize) -> Result<()> {
    ensure!(
        noise.var.len() == steps * d && noise.gripper.len() == steps,
        "noise has {}+{} values, expected {}+{}",
        noise.var.len(),
        noise.gripper.len(),
        steps * d,
        steps
    );
    Ok(())
}

/// Noise an already lifted clean chunk directly to step `k`.
pub fn forward_noise_lifted<S: ActionSpace + ?Sized>(
    schedule: &NoiseSchedule,
    space: &S,
    q0: &[f64],
    g0: &[f64],
    k: usize,
    noise: &Noise,
) -> Result<Noised> {
    check_step(schedule, k, true)?;
    let steps = g0.len();
    let d = space.var_dim();
    ensure!(q0.len() == steps * d, "lifted chunk has wrong size");
    check_noise(noise, steps, d)?;
    let ab = schedule.alpha_bar(k);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let pre: Vec<f64> = q0.iter().zip(&noise.var).map(|(q, e)| a * q + s * e).collect();
    let gripper = g0.iter().zip(&noise.gripper).map(|(g, e)| a * g + s * e).collect();
    let lifted = project_chunk(space, pre.clone(), gripper);
    Ok(Noised { lifted, pre })
}

/// Lift `a0` (from `warm`) and noise it directly to step `k`.
pub fn forward_noise<S: ActionSpace + ?Sized>(
    schedule: &NoiseSchedule,
    space: &S,
    a0: &ActionChunk,
    warm: &[f64],
    k: usize,
    noise: &Noise,
) -> Result<Noised> {
    let q0 = lift_chunk(space, a0, warm)?;
    forward_noise_lifted(schedule, space, &q0, &a0.gripper, k, noise)
}

/// One Markov step of the forward process on the raw variable:
/// `sqrt(1 - beta_k) q + sqrt(beta_k) eps`.
pub fn forward_step(schedule: &NoiseSchedule, q_prev: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    check_step(schedule, k, false)?;
    ensure!(q_prev.len() == eps.len(), "noise size mismatch");
    let b = schedule.beta(k);
    Ok(q_prev
        .iter()
        .zip(eps)
        .map(|(q, e)| (1.0 - b).sqrt() * q + b.sqrt() * e)
        .collect())
}

/// Posterior mean and variance of step `k - 1` given the clean and noisy
/// variables.
pub fn posterior_mean(schedule: &NoiseSchedule, q0: &[f64], qk: &[f64], k: usize) -> Result<(Vec<f64>, f64)> {
    check_step(schedule, k, false)?;
    ensure!(q0.len() == qk.len(), "posterior inputs differ in size");
    let (c0, ck) = (schedule.c0(k), schedule.ck(k));
    let mu = q0.iter().zip(qk).map(|(a, b)| c0 * a + ck * b).collect();
    Ok((mu, schedule.beta_tilde(k)))
}

/// Ancestral sampling step `k -> k - 1`. Returns the new state and the lift
/// of `a0_hat`, which warm-starts the next step's lift.
pub fn reverse_step<S: ActionSpace + ?Sized>(
    schedule: &NoiseSchedule,
    space: &S,
    ak: &Lifted,
    a0_hat: &ActionChunk,
    a0_warm: &[f64],
    k: usize,
    z: &Noise,
) -> Result<(Lifted, Vec<f64>)> {
    check_step(schedule, k, false)?;
    let steps = ak.chunk.steps;
    check_noise(z, steps, space.var_dim())?;
    ensure!(a0_hat.steps == steps, "prediction has {} steps, state has {steps}", a0_hat.steps);
    let qk = lift_chunk(space, &ak.chunk, &ak.var)?;
    let q0 = lift_chunk(space, a0_hat, a0_warm)?;
    let (mu, bt) = posterior_mean(schedule, &q0, &qk, k)?;
    let sd = bt.sqrt();
    let pre: Vec<f64> = mu.iter().zip(&z.var).map(|(m, e)| m + sd * e).collect();
    let (c0, ck) = (schedule.c0(k), schedule.ck(k));
    let gripper = (0..steps)
        .map(|i| c0 * a0_hat.gripper[i] + ck * ak.chunk.gripper[i] + sd * z.gripper[i])
        .collect();
    Ok((project_chunk(space, pre, gripper), q0))
}

fn ddim_update(ab_k: f64, ab_p: f64, eta: f64, q0: f64, qk: f64, z: f64) -> f64 {
    let eps = (qk - ab_k.sqrt() * q0) / (1.0 - ab_k).sqrt();
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_k) * (1.0 - ab_k / ab_p)).max(0.0).sqrt();
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    ab_p.sqrt() * q0 + dir * eps + sigma * z
}

/// Non-Markovian step `k -> k_prev` in the lifted variable. `eta = 0` is
/// deterministic; `eta = 1` with `k_prev = k - 1` has the ancestral
/// step's mean and variance.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<S: ActionSpace + ?Sized>(
    schedule: &NoiseSchedule,
    space: &S,
    ak: &Lifted,
    a0_hat: &ActionChunk,
    a0_warm: &[f64],
    k: usize,
    k_prev: usize,
    eta: f64,
    z: &Noise,
) -> Result<(Lifted, Vec<f64>)> {
    check_step(schedule, k, false)?;
    ensure!(k_prev < k, "DDIM needs k_prev < k (got {k_prev} >= {k})");
    ensure!((0.0..=1.0).contains(&eta), "DDIM eta must lie in [0, 1]");
    let steps = ak.chunk.steps;
    check_noise(z, steps, space.var_dim())?;
    ensure!(a0_hat.steps == steps, "prediction has {} steps, state has {steps}", a0_hat.steps);
    let qk = lift_chunk(space, &ak.chunk, &ak.var)?;
    let q0 = lift_chunk(space, a0_hat, a0_warm)?;
    let (ab_k, ab_p) = (schedule.alpha_bar(k), schedule.alpha_bar(k_prev));
    let pre = (0..qk.len())
        .map(|i| ddim_update(ab_k, ab_p, eta, q0[i], qk[i], z.var[i]))
        .collect();
    let gripper = (0..steps)
        .map(|i| ddim_update(ab_k, ab_p, eta, a0_hat.gripper[i], ak.chunk.gripper[i], z.gripper[i]))
        .collect();
    Ok((project_chunk(space, pre, gripper), q0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplerKind {
    /// Full ancestral chain over all `K` steps.
    Ddpm,
    /// Uniform-stride subsequence of `steps` steps.
    Ddim { steps: usize, eta: f64 },
}

impl Default for SamplerKind {
    fn default() -> Self {
        SamplerKind::Ddim { steps: 10, eta: 0.0 }
    }
}

/// Training-time diffusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Number of diffusion steps `K`.
    pub steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 100,
            schedule: ScheduleKind::SquaredCosine,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.schedule)
    }
}

/// Result of a full reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Final chunk; gripper values are raw (threshold with `gripper_bit`).
    pub lifted: Lifted,
    /// Number of denoiser evaluations.
    pub evaluations: usize,
}

/// Run the reverse process from pure noise. `denoise(A^k, k)` predicts the
/// clean chunk; `warm` seeds the first lift of each prediction.
pub fn sample_action<S, F, R>(
    schedule: &NoiseSchedule,
    space: &S,
    mut denoise: F,
    steps: usize,
    warm: &[f64],
    sampler: SamplerKind,
    rng: &mut R,
) -> Result<Sample>
where
    S: ActionSpace + ?Sized,
    F: FnMut(&ActionChunk, usize) -> Result<ActionChunk>,
    R: Rng + ?Sized,
{
    let d = space.var_dim();
    ensure!(steps >= 1, "chunk needs at least one step");
    ensure!(warm.len() == steps * d, "warm start has wrong size");
    let start = Noise::sample(steps, d, rng);
    let mut state = project_chunk(space, start.var, start.gripper);
    let mut a0_warm = warm.to_vec();
    let mut evaluations = 0;
    let ks: Vec<(usize, usize)> = match sampler {
        SamplerKind::Ddpm => (1..=schedule.steps()).rev().map(|k| (k, k - 1)).collect(),
        SamplerKind::Ddim { steps: n, .. } => {
            let ts = schedule.ddim_timesteps(n)?;
            ts.iter()
                .enumerate()
                .map(|(i, &k)| (k, ts.get(i + 1).copied().unwrap_or(0)))
                .collect()
        }
    };
    for (k, k_prev) in ks {
        let a0_hat = denoise(&state.chunk, k)?;
        evaluations += 1;
        let (next, q0) = match sampler {
            SamplerKind::Ddpm => {
                let z = if k > 1 {
                    Noise::sample(steps, d, rng)
                } else {
                    Noise::zeros(steps, d)
                };
                reverse_step(schedule, space, &state, &a0_hat, &a0_warm, k, &z)?
            }
            SamplerKind::Ddim { eta, .. } => {
                let z = if eta > 0.0 && k_prev > 0 {
                    Noise::sample(steps, d, rng)
                } else {
                    Noise::zeros(steps, d)
                };
                ddim_step(schedule, space, &state, &a0_hat, &a0_warm, k, k_prev, eta, &z)?
            }
        };
        state = next;
        a0_warm = q0;
    }
    Ok(Sample {
        lifted: state,
        evaluations,
    })
}

/// Mean per-node IK error of every chunk step. `warm` is either one joint
/// vector, chained from step to step, or one vector per step.
pub fn chunk_ik_errors(solver: &IkSolver<'_>, chunk: &ActionChunk, warm: &[f64]) -> Result<Vec<f64>> {
    let n = solver.chain().n_dof();
    let per_step = warm.len() == chunk.steps * n && chunk.steps > 1;
    ensure!(
        warm.len() == n || per_step,
        "warm start must hold one joint vector or one per step"
    );
    let mut q = crate::kinematics::JointVector(warm[..n].to_vec());
    let mut out = Vec::with_capacity(chunk.steps);
    for i in 0..chunk.steps {
        if per_step {
            q = crate::kinematics::JointVector(warm[i * n..(i + 1) * n].to_vec());
        }
        let (err, rep) = solver.ik_error(&chunk.node_state(i), &q)?;
        out.push(err);
        q = rep.q;
    }
    Ok(out)
}

/// Uniform `k` and fresh noise for one training example.
pub fn training_example<S, R>(
    schedule: &NoiseSchedule,
    space: &S,
    q0: &[f64],
    g0: &[f64],
    rng: &mut R,
) -> Result<(usize, Noised)>
where
    S: ActionSpace + ?Sized,
    R: Rng + ?Sized,
{
    let k = rng.random_range(1..=schedule.steps());
    let noise = Noise::sample(g0.len(), space.var_dim(), rng);
    Ok((k, forward_noise_lifted(schedule, space, q0, g0, k, &noise)?))
}

#[cfg(test)]
mod tests;
