//! Serial revolute chains and the node sets attached to them.
//!
//! Every joint frame is aligned with its parent at zero angle, so a chain is
//! fully described by per-joint rotation axes (in the joint's own frame), the
//! fixed translation from each joint to the next, and the node anchors.

use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

/// Angle configuration of an n-joint chain, radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVector(pub Vec<f64>);

impl JointVector {
    pub fn zeros(n: usize) -> Self {
        JointVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &JointVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(v: Vec<f64>) -> Self {
        JointVector(v)
    }
}

/// Node positions (meters) plus the binary gripper channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub positions: Vec<Vector3<f64>>,
    /// `true` when the gripper is closed.
    pub gripper: bool,
}

impl NodeState {
    pub fn new(positions: Vec<Vector3<f64>>, gripper: bool) -> Self {
        NodeState { positions, gripper }
    }

    /// Builds a node state from a flat `[x0, y0, z0, x1, ...]` slice.
    pub fn from_flat(flat: &[f64], gripper: bool) -> Self {
        let positions = flat
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        NodeState { positions, gripper }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.positions.len() * 3);
        for p in &self.positions {
            out.extend_from_slice(&[p.x, p.y, p.z]);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn translated(&self, delta: Vector3<f64>) -> Self {
        NodeState {
            positions: self.positions.iter().map(|p| p + delta).collect(),
            gripper: self.gripper,
        }
    }

    /// Mean Euclidean distance between corresponding nodes.
    pub fn mean_distance(&self, other: &NodeState) -> f64 {
        let n = self.positions.len().max(1) as f64;
        self.positions
            .iter()
            .zip(&other.positions)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / n
    }
}

/// What a node is used for beyond plain position tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    #[default]
    Body,
    /// Gripper finger; the pair of finger nodes defines the gripper frame.
    Finger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: Vector3<f64>,
    /// Translation from this joint's frame to the next joint's frame.
    pub offset: Vector3<f64>,
    pub limits: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAnchor {
    pub joint: usize,
    pub offset: Vector3<f64>,
    pub role: NodeRole,
    /// Default IK weight for this node.
    pub weight: f64,
}

/// Per-node IK weights (the diagonal of the weight matrix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkWeights(pub Vec<f64>);

impl IkWeights {
    pub fn uniform(m: usize) -> Self {
        IkWeights(vec![1.0; m])
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        ensure!(
            self.0.len() == m,
            "weights have length {}, chain has {} nodes",
            self.0.len(),
            m
        );
        ensure!(
            self.0.iter().all(|w| w.is_finite() && *w >= 0.0),
            "weights must be finite and nonnegative"
        );
        ensure!(
            self.0.iter().any(|w| *w > 0.0),
            "at least one weight must be positive"
        );
        Ok(())
    }
}

/// Immutable description of a revolute serial chain and its tracked nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    name: String,
    base: Isometry3<f64>,
    joints: Vec<Joint>,
    nodes: Vec<NodeAnchor>,
}

impl KinematicChain {
    pub fn new(
        name: impl Into<String>,
        base: Isometry3<f64>,
        joints: Vec<Joint>,
        nodes: Vec<NodeAnchor>,
    ) -> Result<Self> {
        let chain = KinematicChain {
            name: name.into(),
            base,
            joints,
            nodes,
        };
        chain.check()?;
        Ok(chain)
    }

    fn check(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Config("chain has no joints".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Config("chain has no nodes".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "joint {i} axis is not unit length (norm {})",
                    j.axis.norm()
                )));
            }
            if !(j.limits.0 < j.limits.1) {
                return Err(Error::Config(format!(
                    "joint {i} limits [{}, {}] are not increasing",
                    j.limits.0, j.limits.1
                )));
            }
        }
        for (k, a) in self.nodes.iter().enumerate() {
            if a.joint >= self.joints.len() {
                return Err(Error::Config(format!(
                    "node {k} references joint {} but chain has {} joints",
                    a.joint,
                    self.joints.len()
                )));
            }
            if !(a.weight.is_finite() && a.weight >= 0.0) {
                return Err(Error::Config(format!("node {k} weight must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> &Isometry3<f64> {
        &self.base
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn nodes(&self) -> &[NodeAnchor] {
        &self.nodes
    }

    /// Joint count n.
    pub fn n_dof(&self) -> usize {
        self.joints.len()
    }

    /// Node count m.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn limits_min(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.limits.0).collect()
    }

    pub fn limits_max(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.limits.1).collect()
    }

    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.joints.iter().map(|j| j.limits).collect()
    }

    /// Box projection onto the joint limits.
    pub fn clamp(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits.0, j.limits.1);
        }
    }

    pub fn clamped(&self, q: &JointVector) -> JointVector {
        let mut out = q.clone();
        self.clamp(&mut out.0);
        out
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.0.len() == self.n_dof()
            && q
                .0
                .iter()
                .zip(&self.joints)
                .all(|(v, j)| *v >= j.limits.0 && *v <= j.limits.1)
    }

    /// Default per-node IK weights from the chain description.
    pub fn default_weights(&self) -> IkWeights {
        IkWeights(self.nodes.iter().map(|a| a.weight).collect())
    }

    /// Indices of finger nodes.
    pub fn finger_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.role == NodeRole::Finger)
            .map(|(i, _)| i)
            .collect()
    }

    /// A chain identical to this one but tracking only the given nodes.
    pub fn with_node_subset(&self, subset: &[usize]) -> Result<Self> {
        ensure!(!subset.is_empty(), "node subset is empty");
        let mut nodes = Vec::with_capacity(subset.len());
        for &i in subset {
            ensure!(
                i < self.nodes.len(),
                "node subset index {i} out of range for {} nodes",
                self.nodes.len()
            );
            nodes.push(self.nodes[i].clone());
        }
        let name = format!(
            "{}[{}]",
            self.name,
            subset
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        KinematicChain::new(name, self.base, self.joints.clone(), nodes)
    }

    /// Same geometry with the joint limits replaced (e.g. a branch region).
    pub fn with_limits(&self, limits: &[(f64, f64)]) -> Result<Self> {
        ensure!(
            limits.len() == self.n_dof(),
            "expected {} limit pairs, got {}",
            self.n_dof(),
            limits.len()
        );
        let mut joints = self.joints.clone();
        for (j, l) in joints.iter_mut().zip(limits) {
            j.limits = *l;
        }
        KinematicChain::new(self.name.clone(), self.base, joints, self.nodes.clone())
    }

    /// Stable content hash of the chain geometry, limits, and nodes.
    pub fn content_hash(&self) -> String {
        let cfg = ChainConfig::from_chain(self);
        let text = serde_json::to_string(&cfg).expect("chain config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_config(&self) -> ChainConfig {
        ChainConfig::from_chain(self)
    }

    pub fn from_config(cfg: &ChainConfig) -> Result<Self> {
        cfg.build()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ChainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.build()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(&self.to_config())
            .map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// On-disk chain description. Key names are a stable file-format contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(default = "default_chain_name")]
    pub name: String,
    #[serde(default)]
    pub base: BaseConfig,
    pub joints: Vec<JointConfig>,
    pub nodes: Vec<NodeConfig>,
}

fn default_chain_name() -> String {
    "chain".into()
}

/// Base pose: translation in meters, rotation as roll/pitch/yaw in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    /// Zero-based joint index the node is rigidly attached to.
    pub joint: usize,
    pub offset: [f64; 3],
    #[serde(default)]
    pub role: NodeRole,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl ChainConfig {
    fn from_chain(chain: &KinematicChain) -> Self {
        let t = chain.base.translation.vector;
        let (r, p, y) = chain.base.rotation.euler_angles();
        ChainConfig {
            name: chain.name.clone(),
            base: BaseConfig {
                translation: [t.x, t.y, t.z],
                rotation: [r, p, y],
            },
            joints: chain
                .joints
                .iter()
                .map(|j| JointConfig {
                    axis: [j.axis.x, j.axis.y, j.axis.z],
                    offset: [j.offset.x, j.offset.y, j.offset.z],
                    limits: [j.limits.0, j.limits.1],
                })
                .collect(),
            nodes: chain
                .nodes
                .iter()
                .map(|a| NodeConfig {
                    joint: a.joint,
                    offset: [a.offset.x, a.offset.y, a.offset.z],
                    role: a.role,
                    weight: a.weight,
                })
                .collect(),
        }
    }

    pub fn build(&self) -> Result<KinematicChain> {
        let [r, p, y] = self.base.rotation;
        let base = Isometry3::from_parts(
            Translation3::from(Vector3::from(self.base.translation)),
            UnitQuaternion::from_euler_angles(r, p, y),
        );
        let joints = self
            .joints
            .iter()
            .map(|j| Joint {
                axis: Vector3::from(j.axis),
                offset: Vector3::from(j.offset),
                limits: (j.limits[0], j.limits[1]),
            })
            .collect();
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeAnchor {
                joint: n.joint,
                offset: Vector3::from(n.offset),
                role: n.role,
                weight: n.weight,
            })
            .collect();
        KinematicChain::new(self.name.clone(), base, joints, nodes)
    }
}

/// Rotation matrix for `angle` about the unit `axis`.
pub(crate) fn axis_rotation(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let k = axis;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * s + kx * kx * (1.0 - c)
}
