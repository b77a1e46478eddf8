//! Hand-coded demonstrators: waypoint paths in node space executed through
//! warm-started IK.

use nalgebra::{Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{finger_targets, gripper_pose, DemoStep, Demonstration, Env, TaskId, WorldState};
use crate::error::{Error, Result};
use crate::kinematics::{IkSolver, IkWeights, JointVector};
use crate::seed::derive_seed;

/// Seeds tried before an expert gives up on an episode.
pub const EXPERT_ATTEMPTS: u64 = 10;

/// Extra steps spent holding the final waypoint.
const SETTLE_STEPS: usize = 5;

struct Rollout<'a> {
    env: &'a Env,
    state: WorldState,
    steps: Vec<DemoStep>,
    rng: ChaCha8Rng,
    points: usize,
    done: bool,
    success: bool,
}

impl Rollout<'_> {
    fn act(&mut self, solver: &IkSolver<'_>, target: &[f64], gripper: bool) -> Result<()> {
        if self.done {
            return Ok(());
        }
        let chain = self.env.chain();
        let rep = solver.solve_flat(target, &self.state.q.0)?;
        let mut cmd = rep.q.0;
        chain.clamp(&mut cmd);
        let points = self.env.render_quantized(&self.state, self.points, &mut self.rng)?;
        let next = self.env.step(&self.state, &JointVector(cmd.clone()), gripper)?;
        self.steps.push(DemoStep {
            points,
            nodes: chain.fk_flat(&self.state.q.0),
            gripper: self.state.gripper,
            q: self.state.q.0.clone(),
            action: chain.fk_flat(&cmd),
            command: cmd,
            action_gripper: gripper,
        });
        self.state = next;
        if self.env.check_success(&self.state) {
            self.done = true;
            self.success = true;
        } else if self.state.collision || self.state.steps >= self.env.task.max_steps {
            self.done = true;
        }
        Ok(())
    }

    /// Current gripper position and planar heading.
    fn hand(&self) -> (Vector3<f64>, f64) {
        let (p, r) = gripper_pose(self.env.chain(), &self.state.q.0);
        (p, r[(1, 0)].atan2(r[(0, 0)]))
    }

    /// Move the gripper along a straight line while turning about z.
    fn move_hand(&mut self, solver: &IkSolver<'_>, goal: Vector3<f64>, heading: f64, gripper: bool) -> Result<()> {
        let (p0, h0) = self.hand();
        let dh = wrap(heading - h0);
        let spec = &self.env.task.expert;
        let n = ((goal - p0).norm() / spec.step)
            .ceil()
            .max((dh.abs() / spec.turn).ceil())
            .max(1.0) as usize;
        let chain = self.env.chain();
        for i in 1..=n {
            let a = i as f64 / n as f64;
            let p = p0 + (goal - p0) * a;
            let r = *Rotation3::from_axis_angle(&Vector3::z_axis(), h0 + dh * a).matrix();
            let mut target = chain.fk_flat(&self.state.q.0);
            for (f, t) in finger_targets(chain, &p, &r) {
                target[3 * f..3 * f + 3].copy_from_slice(t.as_slice());
            }
            self.act(solver, &target, gripper)?;
        }
        Ok(())
    }

    /// Interpolate every node linearly to the node set of `goal`.
    fn move_nodes(&mut self, solver: &IkSolver<'_>, goal: &[f64], gripper: bool) -> Result<()> {
        let chain = self.env.chain();
        let start = chain.fk_flat(&self.state.q.0);
        let end = chain.fk_flat(goal);
        let max_d = (0..chain.n_nodes())
            .map(|k| {
                (0..3)
                    .map(|c| (end[3 * k + c] - start[3 * k + c]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let n = (max_d / self.env.task.expert.step).ceil().max(1.0) as usize;
        for i in 1..=n {
            let a = i as f64 / n as f64;
            let target: Vec<f64> = start.iter().zip(&end).map(|(s, e)| s + (e - s) * a).collect();
            self.act(solver, &target, gripper)?;
        }
        for _ in 0..SETTLE_STEPS {
            self.act(solver, &end, gripper)?;
        }
        Ok(())
    }

    /// Hold the current hand pose for a number of steps.
    fn hold(&mut self, solver: &IkSolver<'_>, steps: usize, gripper: bool) -> Result<()> {
        let (p, h) = self.hand();
        for _ in 0..steps {
            self.move_hand(solver, p, h, gripper)?;
        }
        Ok(())
    }
}

fn wrap(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

fn radial(p: &Vector3<f64>) -> f64 {
    p.y.atan2(p.x)
}

fn finger_weights(env: &Env) -> IkWeights {
    let chain = env.chain();
    let mut w = vec![0.0; chain.n_nodes()];
    for f in chain.finger_nodes() {
        w[f] = 1.0;
    }
    IkWeights(w)
}

fn run_plan(env: &Env, r: &mut Rollout<'_>) -> Result<()> {
    let task = &env.task;
    let primary = task.primary_object().expect("validated task");
    let target = r.state.object_position(primary);
    let spec = task.expert.clone();
    match task.id {
        TaskId::Reach => {
            let solver = env.execution_solver(env.chain(), &finger_weights(env))?;
            r.move_hand(&solver, target, radial(&target), false)?;
            r.hold(&solver, SETTLE_STEPS, false)?;
        }
        TaskId::ObstacleReach => {
            let solver = env.execution_solver(env.chain(), &finger_weights(env))?;
            let approach = target - Vector3::new(spec.approach, 0.0, 0.0);
            r.move_hand(&solver, approach, 0.0, false)?;
            r.move_hand(&solver, target, 0.0, false)?;
            r.hold(&solver, SETTLE_STEPS, false)?;
        }
        TaskId::PickAnalog => {
            let solver = env.execution_solver(env.chain(), &finger_weights(env))?;
            let goal = r
                .state
                .object_position(task.goal_object().expect("validated pick task"));
            r.move_hand(&solver, target, radial(&target), false)?;
            r.hold(&solver, spec.grasp_steps, true)?;
            r.move_hand(&solver, goal, radial(&goal), true)?;
            r.hold(&solver, SETTLE_STEPS, true)?;
        }
        TaskId::ElbowPush => {
            let goal_q = r
                .state
                .goal_q
                .clone()
                .ok_or_else(|| Error::Expert("elbow-push needs a node-motion placement".into()))?;
            let solver = env.execution_solver(env.chain(), &env.chain().default_weights())?;
            r.move_nodes(&solver, &goal_q.0, false)?;
        }
    }
    Ok(())
}

/// Record one successful demonstration for `episode`, trying up to
/// [`EXPERT_ATTEMPTS`] seeds derived from `(seed, episode)`.
pub fn scripted_expert(env: &Env, seed: u64, episode: usize, points: usize) -> Result<Demonstration> {
    for attempt in 0..EXPERT_ATTEMPTS {
        let s = derive_seed(derive_seed(seed, episode as u64), attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let state = env.reset_episode(Some(episode), &mut rng)?;
        let mut r = Rollout {
            env,
            state,
            steps: Vec::new(),
            rng,
            points,
            done: false,
            success: false,
        };
        run_plan(env, &mut r)?;
        if r.success {
            return Ok(Demonstration {
                task: env.task.id,
                episode,
                seed: s,
                success: true,
                steps: r.steps,
            });
        }
        log::debug!("expert attempt {attempt} for episode {episode} failed");
    }
    Err(Error::Expert(format!(
        "{} consecutive expert attempts failed on task {} (episode {episode})",
        EXPERT_ATTEMPTS, env.task.id
    )))
}
