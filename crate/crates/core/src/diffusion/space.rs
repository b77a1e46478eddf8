//! The variable the noise is defined on, and its maps to and from action
//! coordinates.

use crate::error::{ensure, Result};
use crate::ikmlp::MlpIkModel;
use crate::kinematics::{IkSolver, KinematicChain};

pub trait ActionSpace {
    /// Diffused variable size per chunk step.
    fn var_dim(&self) -> usize;
    /// Action coordinate size per chunk step (gripper excluded).
    fn act_dim(&self) -> usize;
    /// Move a variable into the admissible set (joint limits).
    fn settle(&self, v: &mut [f64]);
    /// Admissible variable to action coordinates.
    fn project(&self, v: &[f64], out: &mut [f64]);
    /// Action coordinates to a variable, starting from `warm` when iterative.
    fn lift(&self, a: &[f64], warm: &[f64], out: &mut [f64]) -> Result<()>;
    /// Whether projected actions are kinematically feasible by construction.
    fn constrained(&self) -> bool;
}

/// Joint space of a chain, lifted with the optimization IK solver.
pub struct ExactIkSpace<'a> {
    solver: IkSolver<'a>,
}

impl<'a> ExactIkSpace<'a> {
    pub fn new(solver: IkSolver<'a>) -> Self {
        ExactIkSpace { solver }
    }

    pub fn with_defaults(chain: &'a KinematicChain) -> Self {
        ExactIkSpace {
            solver: IkSolver::with_defaults(chain),
        }
    }

    pub fn chain(&self) -> &KinematicChain {
        self.solver.chain()
    }
}

impl ActionSpace for ExactIkSpace<'_> {
    fn var_dim(&self) -> usize {
        self.chain().n_dof()
    }

    fn act_dim(&self) -> usize {
        3 * self.chain().n_nodes()
    }

    fn settle(&self, v: &mut [f64]) {
        self.chain().clamp(v);
    }

    fn project(&self, v: &[f64], out: &mut [f64]) {
        self.chain().fk_flat_into(v, out);
    }

    fn lift(&self, a: &[f64], warm: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.solver.solve_flat(a, warm)?;
        out.copy_from_slice(&r.q.0);
        Ok(())
    }

    fn constrained(&self) -> bool {
        true
    }
}

/// Joint space of a chain, lifted with the learned surrogate.
pub struct MlpIkSpace<'a> {
    chain: &'a KinematicChain,
    model: &'a MlpIkModel,
}

impl<'a> MlpIkSpace<'a> {
    pub fn new(chain: &'a KinematicChain, model: &'a MlpIkModel) -> Result<Self> {
        model.check_chain(chain)?;
        Ok(MlpIkSpace { chain, model })
    }
}

impl ActionSpace for MlpIkSpace<'_> {
    fn var_dim(&self) -> usize {
        self.chain.n_dof()
    }

    fn act_dim(&self) -> usize {
        3 * self.chain.n_nodes()
    }

    fn settle(&self, v: &mut [f64]) {
        self.chain.clamp(v);
    }

    fn project(&self, v: &[f64], out: &mut [f64]) {
        self.chain.fk_flat_into(v, out);
    }

    fn lift(&self, a: &[f64], _warm: &[f64], out: &mut [f64]) -> Result<()> {
        ensure!(
            a.len() == self.model.input_dim(),
            "surrogate expects {} coordinates, got {}",
            self.model.input_dim(),
            a.len()
        );
        out.copy_from_slice(&self.model.apply_flat(a));
        Ok(())
    }

    fn constrained(&self) -> bool {
        true
    }
}

/// Unconstrained coordinates, diffused after per-dimension affine
/// normalization `v = (a - center) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSpace {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineSpace {
    pub fn identity(dim: usize) -> Self {
        AffineSpace {
            center: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Map the per-dimension data range onto `[-1, 1]`.
    pub fn from_range(lo: &[f64], hi: &[f64]) -> Self {
        let center = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let scale = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| {
                let s = 0.5 * (b - a);
                if s > 1e-6 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        AffineSpace { center, scale }
    }
}

impl ActionSpace for AffineSpace {
    fn var_dim(&self) -> usize {
        self.center.len()
    }

    fn act_dim(&self) -> usize {
        self.center.len()
    }

    fn settle(&self, _v: &mut [f64]) {}

    fn project(&self, v: &[f64], out: &mut [f64]) {
        for (((o, x), c), s) in out.iter_mut().zip(v).zip(&self.center).zip(&self.scale) {
            *o = c + s * x;
        }
    }

    fn lift(&self, a: &[f64], _warm: &[f64], out: &mut [f64]) -> Result<()> {
        for (((o, x), c), s) in out.iter_mut().zip(a).zip(&self.center).zip(&self.scale) {
            *o = (x - c) / s;
        }
        Ok(())
    }

    fn constrained(&self) -> bool {
        false
    }
}
