//! Kinematic benchmark worlds: randomized scenes, substepped capsule
//! collision checking, synthetic point clouds, scripted experts and
//! demonstration datasets.

mod dataset;
mod expert;
mod geometry;
mod pointcloud;
mod tasks;

pub use dataset::{
    chunk_at, Dataset, DemoStep, Demonstration, ActionRepr, DATASET_FORMAT, DATASET_VERSION,
};
pub use expert::{scripted_expert, EXPERT_ATTEMPTS};
pub use geometry::{point_segment_distance, Capsule, Shape};
pub use pointcloud::{dequantize, farthest_point_sample, quantize, POINT_QUANTUM};
pub use tasks::{task_preset, TASK_NAMES};

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::kinematics::{presets, IkOptions, IkSolver, IkWeights, JointVector, KinematicChain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Reach,
    ObstacleReach,
    ElbowPush,
    PickAnalog,
}

impl TaskId {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::ObstacleReach => "obstacle-reach",
            TaskId::ElbowPush => "elbow-push",
            TaskId::PickAnalog => "pick-analog",
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectRole {
    /// Marker the robot has to reach or press; never collides.
    Target,
    /// Collides with every link.
    Obstacle,
    /// Can be grasped and carried; never collides.
    Movable,
    /// Region a movable object has to end up in; never collides.
    Goal,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub role: ObjectRole,
    pub shape: Shape,
    /// Nominal center.
    pub position: [f64; 3],
    /// Per-axis offset range added to the nominal center at reset.
    #[serde(default)]
    pub range: [[f64; 2]; 3],
    /// Reuse the random offset drawn for another object.
    #[serde(default)]
    pub follow: Option<String>,
    /// Whether the object shows up in point clouds.
    #[serde(default = "yes")]
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Placement {
    /// Independent uniform offsets.
    #[default]
    Uniform,
    /// The first target or movable object sits on a regular grid over its
    /// range; episode `i` uses anchor `i mod anchors`.
    Grid { counts: [usize; 3] },
    /// The first target or movable object sits at a cell center between the
    /// grid anchors.
    Midpoints { counts: [usize; 3] },
    /// The first target sits where `node` lands when the arm moves that node
    /// by a random offset from its home position while the `hold` nodes stay
    /// put.
    NodeMotion {
        node: usize,
        offset_range: [[f64; 2]; 3],
        hold: Vec<usize>,
        /// Redraw placements whose node moved less than this.
        min_motion: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessSpec {
    /// Reach distance between the grasp point (or the press node) and the
    /// target center.
    pub radius: f64,
    /// Node that has to press the target; `None` uses the grasp point.
    #[serde(default)]
    pub node: Option<usize>,
    /// Minimum distance of every finger node from the target while pressing.
    #[serde(default)]
    pub clearance: f64,
    /// Grasp point to object distance at which closing the gripper attaches.
    #[serde(default)]
    pub grasp_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSpec {
    /// Gaussian position noise per coordinate (m).
    pub noise_std: f64,
    /// Raw surface samples before downsampling.
    pub surface_points: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            noise_std: 1e-3,
            surface_points: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertSpec {
    /// Maximum waypoint displacement per control step (m).
    pub step: f64,
    /// Maximum heading change per control step (rad).
    pub turn: f64,
    /// Standoff of the approach waypoint in front of the target.
    pub approach: f64,
    /// Steps spent closing the gripper before carrying.
    pub grasp_steps: usize,
}

impl Default for ExpertSpec {
    fn default() -> Self {
        ExpertSpec {
            step: 0.02,
            turn: 0.1,
            approach: 0.17,
            grasp_steps: 2,
        }
    }
}

/// Task description; also the on-disk task config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Chain preset name.
    pub chain: String,
    pub home: Vec<f64>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub placement: Placement,
    pub success: SuccessSpec,
    pub max_steps: usize,
    pub link_radius: f64,
    #[serde(default)]
    pub render: RenderSpec,
    #[serde(default)]
    pub expert: ExpertSpec,
}

impl TaskSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn object(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    fn first_with(&self, roles: &[ObjectRole]) -> Option<usize> {
        self.objects.iter().position(|o| roles.contains(&o.role))
    }

    /// The object the task is about: the first target, or the movable object.
    pub fn primary_object(&self) -> Option<usize> {
        match self.id {
            TaskId::PickAnalog => self.first_with(&[ObjectRole::Movable]),
            _ => self.first_with(&[ObjectRole::Target]),
        }
    }

    pub fn goal_object(&self) -> Option<usize> {
        self.first_with(&[ObjectRole::Goal])
    }

    /// Check the spec against the chain it runs on.
    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task {}: {m}", self.id)));
        if self.home.len() != chain.n_dof() {
            return bad(format!("home has {} joints, chain has {}", self.home.len(), chain.n_dof()));
        }
        if !chain.within_limits(&JointVector(self.home.clone())) {
            return bad("home configuration violates joint limits".into());
        }
        if self.max_steps == 0 || self.link_radius < 0.0 || self.success.radius <= 0.0 {
            return bad("max_steps, link_radius and success radius must be positive".into());
        }
        if self.render.noise_std < 0.0 || self.expert.step <= 0.0 || self.expert.turn <= 0.0 {
            return bad("render noise and expert step sizes must be positive".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|p| p.name == o.name) {
                return bad(format!("duplicate object name '{}'", o.name));
            }
            if o.range.iter().any(|r| r[0] > r[1]) {
                return bad(format!("object '{}' has a decreasing range", o.name));
            }
            if let Some(f) = &o.follow {
                match self.objects[..i].iter().find(|p| &p.name == f) {
                    None => return bad(format!("object '{}' follows unknown or later object '{f}'", o.name)),
                    Some(p) if p.follow.is_some() => {
                        return bad(format!("object '{}' follows '{f}', which itself follows", o.name))
                    }
                    _ => {}
                }
            }
            let ok_shape = match o.shape {
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !ok_shape {
                return bad(format!("object '{}' has a degenerate shape", o.name));
            }
        }
        if self.primary_object().is_none() {
            return bad("task has no target or movable object".into());
        }
        if self.id == TaskId::PickAnalog && self.goal_object().is_none() {
            return bad("pick task needs a goal object".into());
        }
        if let Some(n) = self.success.node {
            if n >= chain.n_nodes() {
                return bad(format!("success node {n} out of range"));
            }
        }
        if chain.finger_nodes().is_empty() {
            return bad("chain has no finger nodes to define a grasp point".into());
        }
        // Every placement of the task objects must lie within reach.
        let reach = max_reach(chain);
        let base = chain.base().translation.vector;
        for o in &self.objects {
            if matches!(o.role, ObjectRole::Obstacle) {
                continue;
            }
            for corner in 0..8 {
                let p = Vector3::from_fn(|i, _| o.position[i] + o.range[i][(corner >> i) & 1]);
                if (p - base).norm() > reach {
                    return bad(format!("object '{}' can be placed out of reach", o.name));
                }
            }
        }
        match &self.placement {
            Placement::Grid { counts } | Placement::Midpoints { counts } => {
                if counts.iter().any(|c| *c == 0) {
                    return bad("grid counts must be positive".into());
                }
            }
            Placement::NodeMotion {
                node,
                offset_range,
                hold,
                ..
            } => {
                if *node >= chain.n_nodes() || hold.iter().any(|h| *h >= chain.n_nodes()) {
                    return bad("node-motion placement references a missing node".into());
                }
                if offset_range.iter().any(|r| r[0] > r[1]) {
                    return bad("node-motion offset range is decreasing".into());
                }
            }
            Placement::Uniform => {}
        }
        Ok(())
    }
}

/// Upper bound on the distance from the base to any node.
fn max_reach(chain: &KinematicChain) -> f64 {
    let links: f64 = chain.joints().iter().map(|j| j.offset.norm()).sum();
    let node: f64 = chain.nodes().iter().map(|n| n.offset.norm()).fold(0.0, f64::max);
    links + node
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: usize,
    /// Object center minus grasp point at the moment of grasping.
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub q: JointVector,
    pub objects: Vec<[f64; 3]>,
    pub gripper: bool,
    pub attached: Option<Attachment>,
    pub collision: bool,
    pub steps: usize,
    /// Configuration the placement was derived from, when there is one.
    pub goal_q: Option<JointVector>,
}

impl WorldState {
    pub fn object_position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.objects[i])
    }
}

/// Pose of the gripper frame: the last joint frame moved to the finger
/// midpoint.
pub fn gripper_pose(chain: &KinematicChain, q: &[f64]) -> (Vector3<f64>, Matrix3<f64>) {
    let frames = chain.frames_unchecked(q);
    let last = frames.last().expect("chain has joints");
    let mid = finger_anchor_mean(chain);
    (last.origin + last.rotation * mid, last.rotation)
}

fn finger_anchor_mean(chain: &KinematicChain) -> Vector3<f64> {
    let fingers = chain.finger_nodes();
    let mut mid = Vector3::zeros();
    for &f in &fingers {
        mid += chain.nodes()[f].offset;
    }
    mid / fingers.len().max(1) as f64
}

/// Finger node positions for a gripper pose. Only finger nodes anchored on
/// the last joint are supported.
pub fn finger_targets(chain: &KinematicChain, p: &Vector3<f64>, r: &Matrix3<f64>) -> Vec<(usize, Vector3<f64>)> {
    let mid = finger_anchor_mean(chain);
    chain
        .finger_nodes()
        .into_iter()
        .map(|f| (f, p + r * (chain.nodes()[f].offset - mid)))
        .collect()
}

/// Mean position of the finger nodes.
pub fn grasp_point(chain: &KinematicChain, q: &[f64]) -> Vector3<f64> {
    let flat = chain.fk_flat(q);
    let fingers = chain.finger_nodes();
    let mut g = Vector3::zeros();
    for &f in &fingers {
        g += Vector3::new(flat[3 * f], flat[3 * f + 1], flat[3 * f + 2]);
    }
    g / fingers.len().max(1) as f64
}

/// Link capsules: consecutive joint origins, then the last joint origin to
/// every node anchored on the last joint.
pub fn link_capsules(chain: &KinematicChain, q: &[f64], radius: f64) -> Vec<Capsule> {
    let frames = chain.frames_unchecked(q);
    let mut out = Vec::with_capacity(frames.len() + 2);
    for w in frames.windows(2) {
        out.push(Capsule {
            a: w[0].origin,
            b: w[1].origin,
            radius,
        });
    }
    let last_j = frames.len() - 1;
    let last = &frames[last_j];
    for n in chain.nodes().iter().filter(|n| n.joint == last_j) {
        out.push(Capsule {
            a: last.origin,
            b: last.origin + last.rotation * n.offset,
            radius,
        });
    }
    out
}

/// Number of linear interpolation substeps checked per control step.
pub const SUBSTEPS: usize = 10;

/// A task bound to the chain it runs on.
#[derive(Debug, Clone)]
pub struct Env {
    pub task: TaskSpec,
    chain: KinematicChain,
}

impl Env {
    pub fn new(task: TaskSpec) -> Result<Self> {
        let chain = presets::preset(&task.chain)?;
        Self::with_chain(task, chain)
    }

    pub fn with_chain(task: TaskSpec, chain: KinematicChain) -> Result<Self> {
        task.validate(&chain)?;
        Ok(Env { task, chain })
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    /// Solver used to execute node targets: warm-started, no random restarts.
    pub fn execution_solver<'a>(&self, chain: &'a KinematicChain, weights: &IkWeights) -> Result<IkSolver<'a>> {
        IkSolver::new(
            chain,
            weights,
            IkOptions {
                restarts: 0,
                ..IkOptions::default()
            },
        )
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<WorldState> {
        self.reset_episode(None, rng)
    }

    /// Reset; `episode` selects the grid anchor for grid placements and is
    /// drawn at random when absent.
    pub fn reset_episode<R: Rng + ?Sized>(&self, episode: Option<usize>, rng: &mut R) -> Result<WorldState> {
        let t = &self.task;
        let primary = t.primary_object().expect("validated task has a primary object");
        let mut offsets: Vec<[f64; 3]> = Vec::with_capacity(t.objects.len());
        let mut goal_q = None;
        for (i, o) in t.objects.iter().enumerate() {
            let off = if let Some(f) = &o.follow {
                offsets[t.object(f).expect("validated follow target")]
            } else if i == primary {
                match &t.placement {
                    Placement::Uniform | Placement::NodeMotion { .. } => uniform_offset(&o.range, rng),
                    Placement::Grid { counts } => {
                        let n: usize = counts.iter().product();
                        let idx = episode.unwrap_or_else(|| rng.random_range(0..n)) % n;
                        grid_offset(&o.range, counts, idx, false)
                    }
                    Placement::Midpoints { counts } => {
                        let cells: [usize; 3] = counts.map(|c| c.saturating_sub(1).max(1));
                        let n: usize = cells.iter().product();
                        let idx = rng.random_range(0..n);
                        grid_offset(&o.range, counts, idx, true)
                    }
                }
            } else {
                uniform_offset(&o.range, rng)
            };
            offsets.push(off);
        }
        let mut objects: Vec<[f64; 3]> = t
            .objects
            .iter()
            .zip(&offsets)
            .map(|(o, d)| [o.position[0] + d[0], o.position[1] + d[1], o.position[2] + d[2]])
            .collect();
        if let Placement::NodeMotion {
            node,
            offset_range,
            hold,
            min_motion,
        } = &t.placement
        {
            let (q, p) = self.place_by_motion(*node, offset_range, hold, *min_motion, rng)?;
            objects[primary] = [p.x, p.y, p.z];
            goal_q = Some(q);
        }
        Ok(WorldState {
            q: JointVector(t.home.clone()),
            objects,
            gripper: false,
            attached: None,
            collision: false,
            steps: 0,
            goal_q,
        })
    }

    fn place_by_motion<R: Rng + ?Sized>(
        &self,
        node: usize,
        range: &[[f64; 2]; 3],
        hold: &[usize],
        min_motion: f64,
        rng: &mut R,
    ) -> Result<(JointVector, Vector3<f64>)> {
        let chain = &self.chain;
        let home = self.task.home.clone();
        let start = chain.fk_flat(&home);
        let mut weights = vec![0.0; chain.n_nodes()];
        weights[node] = 1.0;
        for &h in hold {
            weights[h] = 10.0;
        }
        let solver = self.execution_solver(chain, &IkWeights(weights))?;
        for _ in 0..100 {
            let d = uniform_offset(range, rng);
            let mut target = start.clone();
            for c in 0..3 {
                target[3 * node + c] += d[c];
            }
            let rep = solver.solve_flat(&target, &home)?;
            let reached = chain.fk_flat(&rep.q.0);
            let moved = (0..3)
                .map(|c| (reached[3 * node + c] - start[3 * node + c]).powi(2))
                .sum::<f64>()
                .sqrt();
            let held = hold.iter().all(|&h| {
                (0..3)
                    .map(|c| (reached[3 * h + c] - start[3 * h + c]).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    < 0.01
            });
            if moved >= min_motion && held {
                let p = Vector3::new(reached[3 * node], reached[3 * node + 1], reached[3 * node + 2]);
                return Ok((rep.q, p));
            }
        }
        Err(Error::Config(format!(
            "task {}: node-motion placement found no configuration moving node {node} by {min_motion} m",
            self.task.id
        )))
    }

    /// Capsules of the arm at `q`.
    pub fn capsules(&self, q: &[f64]) -> Vec<Capsule> {
        link_capsules(&self.chain, q, self.task.link_radius)
    }

    /// Whether any link touches an obstacle at `q`.
    pub fn in_collision(&self, state: &WorldState, q: &[f64]) -> bool {
        let caps = self.capsules(q);
        self.task
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.role == ObjectRole::Obstacle)
            .any(|(i, o)| {
                let c = state.object_position(i);
                caps.iter().any(|cap| cap.intersects(&o.shape, &c))
            })
    }

    pub fn step(&self, state: &WorldState, command: &JointVector, gripper: bool) -> Result<WorldState> {
        self.step_with(state, command, gripper, SUBSTEPS)
    }

    /// Step with a custom substep count.
    pub fn step_with(
        &self,
        state: &WorldState,
        command: &JointVector,
        gripper: bool,
        substeps: usize,
    ) -> Result<WorldState> {
        ensure!(
            command.len() == self.chain.n_dof() && command.is_finite(),
            "command has {} joints, chain has {}",
            command.len(),
            self.chain.n_dof()
        );
        for (i, (v, (lo, hi))) in command.0.iter().zip(self.chain.limits()).enumerate() {
            ensure!(
                *v >= lo - 1e-9 && *v <= hi + 1e-9,
                "command for joint {i} is {v}, outside [{lo}, {hi}]"
            );
        }
        let mut next = state.clone();
        next.steps += 1;
        if state.collision {
            return Ok(next);
        }
        let substeps = substeps.max(1);
        let q0 = &state.q.0;
        for s in 1..=substeps {
            let a = s as f64 / substeps as f64;
            let q: Vec<f64> = q0
                .iter()
                .zip(&command.0)
                .map(|(x, y)| x + (y - x) * a)
                .collect();
            if self.in_collision(&next, &q) {
                next.collision = true;
                break;
            }
            next.q = JointVector(q);
            if let Some(att) = &next.attached {
                let g = grasp_point(&self.chain, &next.q.0);
                next.objects[att.object] = [g.x + att.offset[0], g.y + att.offset[1], g.z + att.offset[2]];
            }
        }
        next.gripper = gripper;
        if !gripper {
            next.attached = None;
        } else if next.attached.is_none() {
            let g = grasp_point(&self.chain, &next.q.0);
            let r = self.task.success.grasp_radius;
            let hit = self
                .task
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.role == ObjectRole::Movable)
                .map(|(i, _)| (i, (next.object_position(i) - g).norm()))
                .filter(|(_, d)| *d <= r)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = hit {
                let d = next.object_position(i) - g;
                next.attached = Some(Attachment {
                    object: i,
                    offset: [d.x, d.y, d.z],
                });
            }
        }
        Ok(next)
    }

    pub fn check_success(&self, state: &WorldState) -> bool {
        if state.collision {
            return false;
        }
        let t = &self.task;
        let primary = t.primary_object().expect("validated task");
        let target = state.object_position(primary);
        match t.id {
            TaskId::Reach | TaskId::ObstacleReach => {
                (grasp_point(&self.chain, &state.q.0) - target).norm() <= t.success.radius
            }
            TaskId::ElbowPush => {
                let flat = self.chain.fk_flat(&state.q.0);
                let node = t.success.node.unwrap_or(0);
                let at = |k: usize| Vector3::new(flat[3 * k], flat[3 * k + 1], flat[3 * k + 2]);
                (at(node) - target).norm() <= t.success.radius
                    && self
                        .chain
                        .finger_nodes()
                        .iter()
                        .all(|&f| (at(f) - target).norm() >= t.success.clearance)
            }
            TaskId::PickAnalog => {
                let goal = t.goal_object().expect("validated pick task");
                t.objects[goal].shape.contains(&state.object_position(goal), &target)
            }
        }
    }

    /// Noisy surface points of the visible objects, downsampled to `p`.
    pub fn render_pointcloud<R: Rng + ?Sized>(
        &self,
        state: &WorldState,
        p: usize,
        rng: &mut R,
    ) -> Result<Vec<Vector3<f64>>> {
        ensure!(p >= 1, "point count must be positive");
        let solids: Vec<(Shape, Vector3<f64>)> = self
            .task
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.visible)
            .map(|(i, o)| (o.shape, state.object_position(i)))
            .collect();
        ensure!(!solids.is_empty(), "task {} has no visible objects", self.task.id);
        let raw = pointcloud::sample_surfaces(
            &solids,
            self.task.render.surface_points.max(2 * p),
            self.task.render.noise_std,
            rng,
        );
        farthest_point_sample(&raw, p, rng)
    }

    /// A rendered frame as stored in datasets: points quantized to 0.1 mm.
    pub fn render_quantized<R: Rng + ?Sized>(&self, state: &WorldState, p: usize, rng: &mut R) -> Result<Vec<i32>> {
        Ok(self
            .render_pointcloud(state, p, rng)?
            .iter()
            .flat_map(|v| [quantize(v.x), quantize(v.y), quantize(v.z)])
            .collect())
    }
}

fn uniform_offset<R: Rng + ?Sized>(range: &[[f64; 2]; 3], rng: &mut R) -> [f64; 3] {
    let mut d = [0.0; 3];
    for i in 0..3 {
        let [lo, hi] = range[i];
        d[i] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    d
}

/// Offset of grid anchor `idx` (x fastest), or of the cell center after it
/// when `between` is set.
fn grid_offset(range: &[[f64; 2]; 3], counts: &[usize; 3], idx: usize, between: bool) -> [f64; 3] {
    let dims: [usize; 3] = if between {
        counts.map(|c| c.saturating_sub(1).max(1))
    } else {
        *counts
    };
    let mut rest = idx;
    let mut d = [0.0; 3];
    for i in 0..3 {
        let k = rest % dims[i];
        rest /= dims[i];
        let [lo, hi] = range[i];
        d[i] = if counts[i] <= 1 {
            0.5 * (lo + hi)
        } else {
            let pos = if between { k as f64 + 0.5 } else { k as f64 };
            lo + (hi - lo) * pos / (counts[i] - 1) as f64
        };
    }
    d
}

#[cfg(test)]
mod tests;
