//! Receding-horizon execution: observe, sample a chunk, turn its first
//! steps into joint commands, step the environment, repeat.

mod layout;
mod train;

pub use layout::{baseline_action_adapter, pose_features, pose_from_features, ActionLayout, Command};
pub use train::{build_training_set, train_policy, PolicyTraining, TrainingItem};

use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserModel, Obs};
use crate::diffusion::{sample_action, ActionChunk, DiffusionConfig, NoiseSchedule, SamplerKind};
use crate::env::{dequantize, ActionRepr, Demonstration, Env, WorldState};
use crate::error::{ensure, Error, Result};
use crate::kinematics::JointVector;

/// How clean node chunks are lifted into joint space during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IkLift {
    /// The pretrained network surrogate.
    #[default]
    Mlp,
    /// The optimization solver, warm-started from the recorded command.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub obs_horizon: usize,
    pub action_horizon: usize,
    /// Chunk steps executed before re-planning.
    pub exec_horizon: usize,
    pub sampler: SamplerKind,
    pub representation: ActionRepr,
    /// Chain nodes a node policy predicts; every node when absent.
    pub node_subset: Option<Vec<usize>>,
    /// Diffuse node actions through joint space.
    pub constrained: bool,
    pub train_lift: IkLift,
    pub gripper_threshold: f64,
    /// Width of the band around the threshold in which the gripper keeps
    /// its current state.
    pub gripper_deadband: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            obs_horizon: 2,
            action_horizon: 8,
            exec_horizon: 4,
            sampler: SamplerKind::default(),
            representation: ActionRepr::Node,
            node_subset: None,
            constrained: true,
            train_lift: IkLift::Mlp,
            gripper_threshold: 0.5,
            gripper_deadband: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.obs_horizon == 0 {
            return bad("policy.obs_horizon must be at least 1".into());
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.action_horizon {
            return bad(format!(
                "policy.exec_horizon must lie in 1..={} (the action horizon), got {}",
                self.action_horizon, self.exec_horizon
            ));
        }
        if !(self.gripper_deadband >= 0.0 && self.gripper_deadband < 1.0) {
            return bad("policy.gripper_deadband must lie in [0, 1)".into());
        }
        if let SamplerKind::Ddim { steps, eta } = self.sampler {
            if steps == 0 || !(eta >= 0.0) {
                return bad("DDIM sampler needs steps >= 1 and eta >= 0".into());
            }
        }
        Ok(())
    }

    /// Check that a trained model matches the horizons.
    pub fn check_model(&self, model: &DenoiserModel) -> Result<()> {
        if model.config.obs_horizon != self.obs_horizon || model.config.action_horizon != self.action_horizon {
            return Err(Error::Mismatch(format!(
                "model horizons (T_o {}, T_a {}) differ from the policy config (T_o {}, T_a {})",
                model.config.obs_horizon, model.config.action_horizon, self.obs_horizon, self.action_horizon
            )));
        }
        Ok(())
    }
}

/// Gripper bit with hysteresis around the threshold.
fn gripper_update(cfg: &PolicyConfig, closed: bool, value: f64) -> bool {
    let half = 0.5 * cfg.gripper_deadband;
    if closed {
        value >= cfg.gripper_threshold - half
    } else {
        value > cfg.gripper_threshold + half
    }
}

/// Outcome of one closed-loop episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    /// IK error of every executed action.
    pub ik_errors: Vec<f64>,
    pub collision: bool,
    /// Executed actions whose conversion to joints was best effort.
    pub flagged: usize,
    pub wall_s: f64,
}

/// Wall time is excluded: two runs with equal seeds compare equal.
impl PartialEq for EpisodeResult {
    fn eq(&self, other: &Self) -> bool {
        self.success == other.success
            && self.steps == other.steps
            && self.ik_errors == other.ik_errors
            && self.collision == other.collision
            && self.flagged == other.flagged
    }
}

impl EpisodeResult {
    pub fn mean_ik_error(&self) -> f64 {
        if self.ik_errors.is_empty() {
            0.0
        } else {
            self.ik_errors.iter().sum::<f64>() / self.ik_errors.len() as f64
        }
    }
}

/// Produces action chunks in a layout's coordinates.
pub trait ActionSource {
    fn propose(&mut self, obs: &Obs, q: &JointVector) -> Result<ActionChunk>;
}

/// A trained denoiser sampled through the diffusion chain.
pub struct DiffusionSource<'a> {
    model: &'a DenoiserModel,
    layout: &'a ActionLayout,
    schedule: NoiseSchedule,
    sampler: SamplerKind,
    rng: ChaCha8Rng,
}

impl<'a> DiffusionSource<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        layout: &'a ActionLayout,
        diffusion: &DiffusionConfig,
        sampler: SamplerKind,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            model.act_dim == layout.act_dim(),
            "model predicts {} coordinates, layout has {}",
            model.act_dim,
            layout.act_dim()
        );
        Ok(DiffusionSource {
            model,
            layout,
            schedule: diffusion.schedule()?,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl ActionSource for DiffusionSource<'_> {
    fn propose(&mut self, obs: &Obs, q: &JointVector) -> Result<ActionChunk> {
        let cond = self.model.encode_observation(obs)?;
        let space = self.layout.sampling_space(&self.model.norm)?;
        let steps = self.model.config.action_horizon;
        let warm = self.layout.warm_start(&q.0, steps, space.var_dim());
        let model = self.model;
        let sample = sample_action(
            &self.schedule,
            space.as_ref(),
            |ak, k| model.predict_sample(ak, &cond, k),
            steps,
            &warm,
            self.sampler,
            &mut self.rng,
        )?;
        Ok(sample.lifted.chunk)
    }
}

/// Replays the recorded actions of a demonstration.
pub struct ReplaySource<'a> {
    demo: &'a Demonstration,
    layout: &'a ActionLayout,
    steps: usize,
}

impl<'a> ReplaySource<'a> {
    pub fn new(demo: &'a Demonstration, layout: &'a ActionLayout, steps: usize) -> Self {
        ReplaySource { demo, layout, steps }
    }
}

impl ActionSource for ReplaySource<'_> {
    fn propose(&mut self, obs: &Obs, _q: &JointVector) -> Result<ActionChunk> {
        let idx = self.demo.chunk_indices(obs.t_index, self.steps);
        let mut coords = Vec::with_capacity(self.steps * self.layout.act_dim());
        let mut gripper = Vec::with_capacity(self.steps);
        for i in idx {
            let s = &self.demo.steps[i];
            coords.extend(self.layout.action_coords(s));
            gripper.push(if s.action_gripper { 1.0 } else { 0.0 });
        }
        ActionChunk::new(self.steps, self.layout.act_dim(), coords, gripper)
    }
}

/// Run one episode. The task state and point-cloud noise come from
/// `task_seed`; `episode` selects the anchor of grid placements.
pub fn run_episode(
    env: &Env,
    source: &mut dyn ActionSource,
    layout: &ActionLayout,
    cfg: &PolicyConfig,
    points: usize,
    episode: Option<usize>,
    task_seed: u64,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    ensure!(
        layout.chain().content_hash() == env.chain().content_hash(),
        "policy layout and environment use different chains"
    );
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let mut state = env.reset_episode(episode, &mut rng)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(cfg.obs_horizon);
    let mut plan: VecDeque<(Command, f64)> = VecDeque::new();
    let mut last_command = state.q.clone();
    let mut result = EpisodeResult {
        success: false,
        steps: 0,
        ik_errors: Vec::new(),
        collision: false,
        flagged: 0,
        wall_s: 0.0,
    };
    while state.steps < env.task.max_steps {
        let frame = observe(env, layout, &state, points, &mut rng)?;
        if history.is_empty() {
            history.extend(std::iter::repeat_n(frame, cfg.obs_horizon));
        } else {
            history.pop_front();
            history.push_back(frame);
        }
        if plan.is_empty() {
            let obs = Obs {
                frames: cfg.obs_horizon,
                points_per_frame: points,
                points: history.iter().flat_map(|f| f.0.iter().copied()).collect(),
                proprio: history.iter().flat_map(|f| f.1.iter().copied()).collect(),
                t_index: state.steps,
            };
            let chunk = source.propose(&obs, &state.q)?;
            ensure!(
                chunk.steps >= cfg.exec_horizon && chunk.dim == layout.act_dim(),
                "proposed chunk is {} x {}, expected at least {} x {}",
                chunk.steps,
                chunk.dim,
                cfg.exec_horizon,
                layout.act_dim()
            );
            let commands = baseline_action_adapter(layout, &chunk, cfg.exec_horizon, &last_command)?;
            plan.extend(commands.into_iter().zip(chunk.gripper.iter().copied()));
        }
        let (cmd, g) = plan.pop_front().expect("plan was refilled");
        let gripper = gripper_update(cfg, state.gripper, g);
        state = env.step(&state, &cmd.q, gripper)?;
        last_command = cmd.q;
        result.ik_errors.push(cmd.ik_error);
        result.flagged += usize::from(cmd.flagged);
        if env.check_success(&state) {
            result.success = true;
            break;
        }
        if state.collision {
            break;
        }
    }
    result.steps = state.steps;
    result.collision = state.collision;
    result.wall_s = start.elapsed().as_secs_f64();
    Ok(result)
}

fn observe(
    env: &Env,
    layout: &ActionLayout,
    state: &WorldState,
    points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pts = env
        .render_quantized(state, points, rng)?
        .into_iter()
        .map(dequantize)
        .collect();
    Ok((pts, layout.proprio(&state.q.0, state.gripper)))
}

/// Representation tag stored in model metadata.
pub fn parse_representation(s: &str) -> Result<ActionRepr> {
    match s {
        "node" => Ok(ActionRepr::Node),
        "joint" => Ok(ActionRepr::Joint),
        "ee" => Ok(ActionRepr::Ee),
        other => Err(Error::Config(format!(
            "unknown representation '{other}' (expected node, joint or ee)"
        ))),
    }
}
