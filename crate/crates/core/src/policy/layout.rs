use nalgebra::{Matrix3, Vector3};

use super::{parse_representation, IkLift, PolicyConfig};
use crate::denoiser::{ModelMeta, Normalization};
use crate::diffusion::{ActionChunk, ActionSpace, AffineSpace, ExactIkSpace, MlpIkSpace};
use crate::env::{finger_targets, gripper_pose, ActionRepr, DemoStep};
use crate::error::{ensure, Error, Result};
use crate::ikmlp::MlpIkModel;
use crate::kinematics::{
    validate_node_sufficiency, IkOptions, IkSolver, IkWeights, JointVector, KinematicChain, FEASIBILITY_TOL,
};

/// Gripper position followed by the first two rotation columns.
pub fn pose_features(p: &Vector3<f64>, r: &Matrix3<f64>) -> [f64; 9] {
    [
        p.x,
        p.y,
        p.z,
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

/// Inverse of [`pose_features`]; the two columns are re-orthonormalized.
pub fn pose_from_features(v: &[f64]) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    ensure!(v.len() == 9, "pose features need 9 values, got {}", v.len());
    let p = Vector3::new(v[0], v[1], v[2]);
    let a = Vector3::new(v[3], v[4], v[5]);
    let b = Vector3::new(v[6], v[7], v[8]);
    let c0 = a
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Contract("degenerate rotation feature".into()))?;
    let c1 = (b - c0 * c0.dot(&b))
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Contract("degenerate rotation feature".into()))?;
    let c2 = c0.cross(&c1);
    Ok((p, Matrix3::from_columns(&[c0, c1, c2])))
}

/// A representation bound to a chain: which coordinates a policy predicts
/// and observes, and how they map to joint commands.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionLayout {
    pub repr: ActionRepr,
    /// Chain nodes covered by node actions and node proprioception.
    pub nodes: Vec<usize>,
    /// Whether node actions are diffused through joint space.
    pub constrained: bool,
    /// Why constraints were switched off, when they were.
    pub note: Option<String>,
    chain: KinematicChain,
    sub: KinematicChain,
}

/// One joint command derived from a predicted action.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub q: JointVector,
    /// Mean distance between the predicted targets and the nodes reached.
    pub ik_error: f64,
    /// The conversion could not match the prediction.
    pub flagged: bool,
}

impl ActionLayout {
    /// Bind a policy config to a chain. Constraints are disabled for node
    /// subsets whose Jacobian is rank deficient, since no node-to-joint
    /// map exists for them.
    pub fn resolve(cfg: &PolicyConfig, chain: &KinematicChain) -> Result<Self> {
        Self::build(cfg.representation, cfg.node_subset.as_deref(), cfg.constrained, chain)
    }

    /// Rebuild the layout a model was trained with.
    pub fn from_meta(meta: &ModelMeta, chain: &KinematicChain) -> Result<Self> {
        if meta.chain_hash != chain.content_hash() {
            return Err(Error::Mismatch(format!(
                "model was trained on a different chain than '{}'",
                chain.name()
            )));
        }
        let repr = parse_representation(&meta.representation)?;
        let mut layout = Self::build(repr, meta.node_subset.as_deref(), meta.constrained, chain)?;
        // The stored flag is already the effective one.
        layout.constrained = meta.constrained;
        Ok(layout)
    }

    fn build(repr: ActionRepr, subset: Option<&[usize]>, constrained: bool, chain: &KinematicChain) -> Result<Self> {
        let nodes: Vec<usize> = match subset {
            Some(s) => {
                let mut sorted = s.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != s.len() || s.iter().any(|&i| i >= chain.n_nodes()) || s.is_empty() {
                    return Err(Error::Config(format!(
                        "node subset {s:?} is not a set of distinct nodes of chain '{}' ({} nodes)",
                        chain.name(),
                        chain.n_nodes()
                    )));
                }
                s.to_vec()
            }
            None => (0..chain.n_nodes()).collect(),
        };
        let full = nodes.len() == chain.n_nodes() && nodes.iter().enumerate().all(|(i, &n)| i == n);
        let sub = if full { chain.clone() } else { chain.with_node_subset(&nodes)? };
        let mut note = None;
        let effective = match repr {
            ActionRepr::Node if constrained => {
                let report = validate_node_sufficiency(&sub);
                if report.sufficient() {
                    true
                } else {
                    let msg = format!(
                        "node subset {nodes:?} determines the joints in only {:.1}% of sampled \
configurations; no node-to-joint map exists, so kinematic constraints are disabled",
                        100.0 * report.fraction_full_rank()
                    );
                    log::warn!("{msg}");
                    note = Some(msg);
                    false
                }
            }
            _ => false,
        };
        Ok(ActionLayout {
            repr,
            nodes,
            constrained: effective,
            note,
            chain: chain.clone(),
            sub,
        })
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    /// The chain restricted to the layout's nodes.
    pub fn sub_chain(&self) -> &KinematicChain {
        &self.sub
    }

    pub fn is_full_node_set(&self) -> bool {
        self.sub == self.chain
    }

    pub fn act_dim(&self) -> usize {
        match self.repr {
            ActionRepr::Node => 3 * self.nodes.len(),
            ActionRepr::Joint => self.chain.n_dof(),
            ActionRepr::Ee => 9,
        }
    }

    /// Proprioception: the layout's own coordinates at `q`, then the gripper.
    pub fn proprio_dim(&self) -> usize {
        self.act_dim() + 1
    }

    fn coords_at(&self, q: &[f64]) -> Vec<f64> {
        match self.repr {
            ActionRepr::Node => self.sub.fk_flat(q),
            ActionRepr::Joint => q.to_vec(),
            ActionRepr::Ee => {
                let (p, r) = gripper_pose(&self.chain, q);
                pose_features(&p, &r).to_vec()
            }
        }
    }

    pub fn proprio(&self, q: &[f64], gripper: bool) -> Vec<f64> {
        let mut v = self.coords_at(q);
        v.push(if gripper { 1.0 } else { 0.0 });
        v
    }

    /// Recorded action of a demonstration step in this layout.
    pub fn action_coords(&self, step: &DemoStep) -> Vec<f64> {
        match self.repr {
            ActionRepr::Node => self
                .nodes
                .iter()
                .flat_map(|&k| step.action[3 * k..3 * k + 3].iter().copied())
                .collect(),
            _ => self.coords_at(&step.command),
        }
    }

    /// Initial lift variables for a chunk of `steps` starting near `q`.
    pub fn warm_start(&self, q: &[f64], steps: usize, var_dim: usize) -> Vec<f64> {
        if self.constrained {
            q.iter().copied().cycle().take(steps * q.len()).collect()
        } else {
            vec![0.0; steps * var_dim]
        }
    }

    fn affine(&self, norm: &Normalization) -> Result<AffineSpace> {
        let d = self.act_dim();
        ensure!(
            norm.act_center.len() == d + 1,
            "normalization covers {} coordinates, layout has {}",
            norm.act_center.len().saturating_sub(1),
            d
        );
        Ok(AffineSpace {
            center: norm.act_center[..d].to_vec(),
            scale: norm.act_scale[..d].to_vec(),
        })
    }

    /// The diffused variable during training.
    pub fn training_space<'a>(
        &'a self,
        norm: &Normalization,
        lift: IkLift,
        ik_mlp: Option<&'a MlpIkModel>,
    ) -> Result<Box<dyn ActionSpace + 'a>> {
        if !self.constrained {
            return Ok(Box::new(self.affine(norm)?));
        }
        match lift {
            IkLift::Exact => Ok(Box::new(ExactIkSpace::new(IkSolver::with_defaults(&self.sub)))),
            IkLift::Mlp => {
                let model = ik_mlp.ok_or_else(|| {
                    Error::Config(
                        "constrained node training with the MLP lift needs an IK MLP checkpoint \
(pass one, set policy.train_lift = \"exact\", or disable constraints)"
                            .into(),
                    )
                })?;
                model.check_chain(&self.sub)?;
                Ok(Box::new(MlpIkSpace::new(&self.sub, model)?))
            }
        }
    }

    /// The diffused variable during sampling; constrained layouts lift with
    /// the optimization solver.
    pub fn sampling_space<'a>(&'a self, norm: &Normalization) -> Result<Box<dyn ActionSpace + 'a>> {
        if self.constrained {
            Ok(Box::new(ExactIkSpace::new(IkSolver::with_defaults(&self.sub))))
        } else {
            Ok(Box::new(self.affine(norm)?))
        }
    }
}

fn finger_weights(chain: &KinematicChain) -> IkWeights {
    let mut w = vec![0.0; chain.n_nodes()];
    for f in chain.finger_nodes() {
        w[f] = 1.0;
    }
    IkWeights(w)
}

fn execution_options() -> IkOptions {
    IkOptions {
        restarts: 0,
        ..IkOptions::default()
    }
}

/// Convert the first `steps` actions of a chunk into joint commands, each
/// solve warm-started from the previous command.
///
/// Node actions go through the solver on the layout's nodes; joint actions
/// are clamped to the limits; pose actions become finger targets solved
/// with weights only on the fingers.
pub fn baseline_action_adapter(
    layout: &ActionLayout,
    chunk: &ActionChunk,
    steps: usize,
    q_prev: &JointVector,
) -> Result<Vec<Command>> {
    ensure!(
        chunk.dim == layout.act_dim() && steps <= chunk.steps,
        "chunk of {} x {} cannot supply {} steps of {} coordinates",
        chunk.steps,
        chunk.dim,
        steps,
        layout.act_dim()
    );
    let chain = layout.chain();
    ensure!(q_prev.len() == chain.n_dof(), "previous command has wrong length");
    let mut q = q_prev.clone();
    let mut out = Vec::with_capacity(steps);
    match layout.repr {
        ActionRepr::Node => {
            let sub = layout.sub_chain();
            let solver = IkSolver::new(sub, &sub.default_weights(), execution_options())?;
            for i in 0..steps {
                let target = chunk.node_state(i);
                let (err, rep) = solver.ik_error(&target, &q)?;
                q = rep.q;
                out.push(Command {
                    q: q.clone(),
                    ik_error: err,
                    flagged: err > FEASIBILITY_TOL,
                });
            }
        }
        ActionRepr::Joint => {
            for i in 0..steps {
                let raw = JointVector(chunk.step(i).to_vec());
                let clamped = chain.clamped(&raw);
                out.push(Command {
                    flagged: clamped != raw,
                    q: clamped,
                    ik_error: 0.0,
                });
            }
        }
        ActionRepr::Ee => {
            let weights = finger_weights(chain);
            let solver = IkSolver::new(chain, &weights, execution_options())?;
            let fingers = chain.finger_nodes();
            ensure!(!fingers.is_empty(), "pose actions need a chain with finger nodes");
            for i in 0..steps {
                let (p, r) = pose_from_features(chunk.step(i))?;
                let targets = finger_targets(chain, &p, &r);
                let mut flat = chain.fk_flat(&q.0);
                for (f, t) in &targets {
                    flat[3 * f..3 * f + 3].copy_from_slice(t.as_slice());
                }
                let rep = solver.solve_flat(&flat, &q.0)?;
                q = rep.q;
                let reached = chain.fk_flat(&q.0);
                let err = targets
                    .iter()
                    .map(|(f, t)| (Vector3::new(reached[3 * f], reached[3 * f + 1], reached[3 * f + 2]) - t).norm())
                    .sum::<f64>()
                    / targets.len() as f64;
                out.push(Command {
                    q: q.clone(),
                    ik_error: err,
                    flagged: err > FEASIBILITY_TOL,
                });
            }
        }
    }
    Ok(out)
}
