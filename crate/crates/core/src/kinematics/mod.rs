//! Serial-chain kinematics: forward kinematics to the node set, analytic
//! node Jacobians, and the limit-constrained whole-body IK solver.

mod chain;
mod fk;
mod ik;
pub mod presets;
mod sample;
mod sufficiency;

pub use chain::{
    BaseConfig, ChainConfig, IkWeights, Joint, JointConfig, JointVector, KinematicChain,
    NodeAnchor, NodeConfig, NodeRole, NodeState,
};
pub use fk::{forward_kinematics, node_jacobian, JointFrame};
pub use ik::{ik_error, solve_ik, IkOptions, IkReport, IkSolver, FEASIBILITY_TOL};
pub use sample::{sample_feasible_config, sample_in_limits};
pub use sufficiency::{
    validate_node_sufficiency, validate_node_sufficiency_with, SufficiencyReport,
    SUFFICIENCY_SAMPLES,
};
