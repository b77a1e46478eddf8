//! Built-in chains.

use std::f64::consts::PI;

use nalgebra::{Isometry3, Vector3};

use super::chain::{Joint, KinematicChain, NodeAnchor, NodeRole};
use crate::error::{Error, Result};

fn joint(axis: [f64; 3], offset: [f64; 3], limits: (f64, f64)) -> Joint {
    Joint {
        axis: Vector3::from(axis),
        offset: Vector3::from(offset),
        limits,
    }
}

fn node(joint: usize, offset: [f64; 3]) -> NodeAnchor {
    NodeAnchor {
        joint,
        offset: Vector3::from(offset),
        role: NodeRole::Body,
        weight: 1.0,
    }
}

fn finger(joint: usize, offset: [f64; 3], weight: f64) -> NodeAnchor {
    NodeAnchor {
        joint,
        offset: Vector3::from(offset),
        role: NodeRole::Finger,
        weight,
    }
}

/// Two unit links in the xy-plane with a node at the end of each link.
pub fn planar_2link() -> KinematicChain {
    KinematicChain::new(
        "planar2",
        Isometry3::identity(),
        vec![
            joint([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], (-PI, PI)),
            joint([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], (-PI, PI)),
        ],
        vec![node(0, [1.0, 0.0, 0.0]), node(1, [1.0, 0.0, 0.0])],
    )
    .expect("planar2 preset is valid")
}

/// Planar 2-link arm with the elbow restricted to (0, pi): one IK branch.
pub fn planar_2link_single_branch() -> KinematicChain {
    KinematicChain::new(
        "planar2-elbow-up",
        Isometry3::identity(),
        vec![
            joint([0.0, 0.0, 1.0], [0.5, 0.0, 0.0], (-2.5, 2.5)),
            joint([0.0, 0.0, 1.0], [0.4, 0.0, 0.0], (0.05, PI - 0.05)),
        ],
        vec![node(0, [0.5, 0.0, 0.0]), node(1, [0.4, 0.0, 0.0])],
    )
    .expect("planar2 single-branch preset is valid")
}

/// Desk-scale planar arm: two links and a short hand with two finger nodes.
/// Nodes: elbow, wrist, left finger, right finger.
pub fn planar_3link() -> KinematicChain {
    KinematicChain::new(
        "planar3",
        Isometry3::identity(),
        vec![
            joint([0.0, 0.0, 1.0], [0.35, 0.0, 0.0], (-2.6, 2.6)),
            joint([0.0, 0.0, 1.0], [0.30, 0.0, 0.0], (-2.6, 2.6)),
            joint([0.0, 0.0, 1.0], [0.12, 0.0, 0.0], (-2.6, 2.6)),
        ],
        vec![
            node(0, [0.35, 0.0, 0.0]),
            node(1, [0.30, 0.0, 0.0]),
            finger(2, [0.12, 0.03, 0.0], 1.0),
            finger(2, [0.12, -0.03, 0.0], 1.0),
        ],
    )
    .expect("planar3 preset is valid")
}

/// A single revolute joint with one node; used for miniature configs.
pub fn one_dof() -> KinematicChain {
    KinematicChain::new(
        "one-dof",
        Isometry3::identity(),
        vec![joint([0.0, 0.0, 1.0], [0.5, 0.0, 0.0], (-2.5, 2.5))],
        vec![node(0, [0.5, 0.0, 0.0])],
    )
    .expect("one-dof preset is valid")
}

/// Panda-equivalent 7-DoF arm with eight nodes: base, shoulder, upper arm,
/// elbow, wrist, a point on the last joint axis, and two fingertips.
///
/// Geometry follows the published modified-DH parameters, re-expressed with
/// every joint frame aligned to the world at zero angle.
pub fn panda() -> KinematicChain {
    let finger_z = -0.2104;
    let d = 0.04 * std::f64::consts::FRAC_1_SQRT_2;
    KinematicChain::new(
        "panda",
        Isometry3::identity(),
        vec![
            joint([0.0, 0.0, 1.0], [0.0, 0.0, 0.333], (-2.8973, 2.8973)),
            joint([0.0, 1.0, 0.0], [0.0, 0.0, 0.316], (-1.7628, 1.7628)),
            joint([0.0, 0.0, 1.0], [0.0825, 0.0, 0.0], (-2.8973, 2.8973)),
            joint([0.0, -1.0, 0.0], [-0.0825, 0.0, 0.384], (-3.0718, -0.0698)),
            joint([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], (-2.8973, 2.8973)),
            joint([0.0, -1.0, 0.0], [0.088, 0.0, 0.0], (-0.0175, 3.7525)),
            joint([0.0, 0.0, -1.0], [0.0, 0.0, -0.107], (-2.8973, 2.8973)),
        ],
        vec![
            node(0, [0.0, 0.0, 0.0]),
            node(1, [0.0, 0.0, 0.0]),
            node(2, [0.0, 0.0, 0.0]),
            node(3, [0.0, 0.0, 0.0]),
            node(4, [0.0, 0.0, 0.0]),
            node(5, [0.088, 0.0, 0.0]),
            finger(6, [d, -d, finger_z], 2.0),
            finger(6, [-d, d, finger_z], 2.0),
        ],
    )
    .expect("panda preset is valid")
}

/// Panda "ready" configuration.
pub fn panda_ready() -> Vec<f64> {
    vec![0.0, -PI / 4.0, 0.0, -3.0 * PI / 4.0, 0.0, PI / 2.0, PI / 4.0]
}

/// Node subsets used by the node-count ablation on the Panda preset:
/// the wrist-only set (node on joint 6 plus fingers) and the set adding the
/// base and elbow nodes.
pub fn panda_node3() -> Vec<usize> {
    vec![5, 6, 7]
}

pub fn panda_node5() -> Vec<usize> {
    vec![0, 3, 5, 6, 7]
}

pub const PRESET_NAMES: [&str; 5] = ["planar2", "planar2-elbow-up", "planar3", "one-dof", "panda"];

pub fn preset(name: &str) -> Result<KinematicChain> {
    match name {
        "planar2" => Ok(planar_2link()),
        "planar2-elbow-up" => Ok(planar_2link_single_branch()),
        "planar3" => Ok(planar_3link()),
        "one-dof" => Ok(one_dof()),
        "panda" => Ok(panda()),
        other => Err(Error::Config(format!(
            "unknown chain preset '{other}' (known: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}
