use nalgebra::{DMatrix, Matrix3, Vector3};

use super::chain::{axis_rotation, JointVector, KinematicChain, NodeState};
use crate::error::{ensure, Result};

/// World pose of one joint frame (after applying that joint's rotation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointFrame {
    pub rotation: Matrix3<f64>,
    pub origin: Vector3<f64>,
}

impl KinematicChain {
    /// World frames of every joint. No dimension check; callers validate.
    pub(crate) fn frames_unchecked(&self, q: &[f64]) -> Vec<JointFrame> {
        let mut frames = Vec::with_capacity(self.n_dof());
        let mut rotation = *self.base().rotation.to_rotation_matrix().matrix();
        let mut origin = self.base().translation.vector;
        let joints = self.joints();
        for (i, joint) in joints.iter().enumerate() {
            if i > 0 {
                origin += rotation * joints[i - 1].offset;
            }
            rotation *= axis_rotation(&joint.axis, q[i]);
            frames.push(JointFrame { rotation, origin });
        }
        frames
    }

    pub fn joint_frames(&self, q: &JointVector) -> Result<Vec<JointFrame>> {
        self.check_q(q)?;
        Ok(self.frames_unchecked(&q.0))
    }

    fn check_q(&self, q: &JointVector) -> Result<()> {
        ensure!(
            q.len() == self.n_dof(),
            "joint vector has {} entries, chain has {} joints",
            q.len(),
            self.n_dof()
        );
        ensure!(q.is_finite(), "joint vector is not finite");
        Ok(())
    }

    /// Flat node positions `[x0, y0, z0, ...]` written into `out` (length 3m).
    pub(crate) fn fk_flat_into(&self, q: &[f64], out: &mut [f64]) {
        let frames = self.frames_unchecked(q);
        for (k, anchor) in self.nodes().iter().enumerate() {
            let f = &frames[anchor.joint];
            let p = f.origin + f.rotation * anchor.offset;
            out[3 * k] = p.x;
            out[3 * k + 1] = p.y;
            out[3 * k + 2] = p.z;
        }
    }

    pub(crate) fn fk_flat(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 3 * self.n_nodes()];
        self.fk_flat_into(q, &mut out);
        out
    }

    /// Node positions for configuration `q`. The gripper bit is left open;
    /// use [`forward_kinematics_with_gripper`] to carry one through.
    pub fn forward_kinematics(&self, q: &JointVector) -> Result<NodeState> {
        self.forward_kinematics_with_gripper(q, false)
    }

    pub fn forward_kinematics_with_gripper(
        &self,
        q: &JointVector,
        gripper: bool,
    ) -> Result<NodeState> {
        self.check_q(q)?;
        Ok(NodeState::from_flat(&self.fk_flat(&q.0), gripper))
    }

    /// Jacobian of the flat node vector w.r.t. q, shape (3m, n).
    pub fn node_jacobian(&self, q: &JointVector) -> Result<DMatrix<f64>> {
        self.check_q(q)?;
        Ok(self.jacobian_unchecked(&q.0))
    }

    pub(crate) fn jacobian_unchecked(&self, q: &[f64]) -> DMatrix<f64> {
        let frames = self.frames_unchecked(q);
        let n = self.n_dof();
        let mut jac = DMatrix::zeros(3 * self.n_nodes(), n);
        let axes: Vec<Vector3<f64>> = frames
            .iter()
            .zip(self.joints())
            .map(|(f, j)| f.rotation * j.axis)
            .collect();
        for (k, anchor) in self.nodes().iter().enumerate() {
            let f = &frames[anchor.joint];
            let p = f.origin + f.rotation * anchor.offset;
            for j in 0..=anchor.joint {
                let col = axes[j].cross(&(p - frames[j].origin));
                jac[(3 * k, j)] = col.x;
                jac[(3 * k + 1, j)] = col.y;
                jac[(3 * k + 2, j)] = col.z;
            }
        }
        jac
    }

    /// World positions of each joint origin (useful for link geometry).
    pub fn joint_origins(&self, q: &JointVector) -> Result<Vec<Vector3<f64>>> {
        Ok(self.joint_frames(q)?.iter().map(|f| f.origin).collect())
    }
}

/// Free-function form of [`KinematicChain::forward_kinematics`].
pub fn forward_kinematics(chain: &KinematicChain, q: &JointVector) -> Result<NodeState> {
    chain.forward_kinematics(q)
}

/// Free-function form of [`KinematicChain::node_jacobian`].
pub fn node_jacobian(chain: &KinematicChain, q: &JointVector) -> Result<DMatrix<f64>> {
    chain.node_jacobian(q)
}
