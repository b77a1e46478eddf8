//! Built-in task specs.

use super::{ExpertSpec, ObjectRole, ObjectSpec, Placement, RenderSpec, Shape, SuccessSpec, TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::kinematics::presets::panda_ready;

pub const TASK_NAMES: [&str; 4] = ["reach", "obstacle-reach", "elbow-push", "pick-analog"];

/// Planar arm folded up and to the left of every workspace region.
const PLANAR_HOME: [f64; 3] = [1.6, -1.2, -0.9];

fn sphere(name: &str, role: ObjectRole, radius: f64, position: [f64; 3], range: [[f64; 2]; 3]) -> ObjectSpec {
    ObjectSpec {
        name: name.into(),
        role,
        shape: Shape::Sphere { radius },
        position,
        range,
        follow: None,
        visible: true,
    }
}

fn aabb(name: &str, role: ObjectRole, half_extents: [f64; 3], position: [f64; 3], follow: Option<&str>) -> ObjectSpec {
    ObjectSpec {
        name: name.into(),
        role,
        shape: Shape::Box { half_extents },
        position,
        range: [[0.0; 2]; 3],
        follow: follow.map(Into::into),
        visible: true,
    }
}

/// Reach a randomly placed marker with the grasp point.
pub fn reach() -> TaskSpec {
    TaskSpec {
        id: TaskId::Reach,
        chain: "planar3".into(),
        home: PLANAR_HOME.to_vec(),
        objects: vec![sphere(
            "goal",
            ObjectRole::Target,
            0.02,
            [0.475, 0.0, 0.0],
            [[-0.125, 0.125], [-0.25, 0.25], [0.0, 0.0]],
        )],
        placement: Placement::Uniform,
        success: SuccessSpec {
            radius: 0.03,
            node: None,
            clearance: 0.0,
            grasp_radius: 0.0,
        },
        max_steps: 60,
        link_radius: 0.01,
        render: RenderSpec::default(),
        expert: ExpertSpec::default(),
    }
}

/// Insert the hand through a slot in a wall to a marker behind it. The slot
/// is 4 cm wider than the hand including its capsule radius.
pub fn obstacle_reach() -> TaskSpec {
    let mut wall_range = [[0.0; 2]; 3];
    wall_range[1] = [-0.1, 0.1];
    let mut upper = aabb("wall-upper", ObjectRole::Obstacle, [0.015, 0.175, 0.05], [0.535, 0.225, 0.0], None);
    upper.range = wall_range;
    TaskSpec {
        id: TaskId::ObstacleReach,
        chain: "planar3".into(),
        home: PLANAR_HOME.to_vec(),
        objects: vec![
            upper,
            aabb(
                "wall-lower",
                ObjectRole::Obstacle,
                [0.015, 0.175, 0.05],
                [0.535, -0.225, 0.0],
                Some("wall-upper"),
            ),
            ObjectSpec {
                follow: Some("wall-upper".into()),
                ..sphere("goal", ObjectRole::Target, 0.015, [0.62, 0.0, 0.0], [[0.0; 2]; 3])
            },
        ],
        placement: Placement::Uniform,
        success: SuccessSpec {
            radius: 0.03,
            node: None,
            clearance: 0.0,
            grasp_radius: 0.0,
        },
        max_steps: 80,
        link_radius: 0.01,
        render: RenderSpec::default(),
        expert: ExpertSpec::default(),
    }
}

/// Press a button with the elbow node of the 7-DoF arm while the gripper
/// stays where it is.
pub fn elbow_push() -> TaskSpec {
    TaskSpec {
        id: TaskId::ElbowPush,
        chain: "panda".into(),
        home: panda_ready(),
        objects: vec![sphere("button", ObjectRole::Target, 0.03, [0.0, 0.0, 0.6], [[0.0; 2]; 3])],
        placement: Placement::NodeMotion {
            node: 3,
            offset_range: [[-0.15, 0.15], [-0.15, 0.15], [-0.05, 0.05]],
            hold: vec![6, 7],
            min_motion: 0.08,
        },
        success: SuccessSpec {
            radius: 0.025,
            node: Some(3),
            clearance: 0.1,
            grasp_radius: 0.0,
        },
        max_steps: 40,
        link_radius: 0.04,
        render: RenderSpec::default(),
        expert: ExpertSpec::default(),
    }
}

/// Grasp a ball and carry it into a goal box.
pub fn pick_analog() -> TaskSpec {
    let mut goal = aabb("goal", ObjectRole::Goal, [0.05, 0.05, 0.05], [0.475, 0.2, 0.0], None);
    goal.range = [[-0.05, 0.05], [-0.05, 0.05], [0.0, 0.0]];
    TaskSpec {
        id: TaskId::PickAnalog,
        chain: "planar3".into(),
        home: PLANAR_HOME.to_vec(),
        objects: vec![
            sphere(
                "ball",
                ObjectRole::Movable,
                0.02,
                [0.475, -0.2, 0.0],
                [[-0.075, 0.075], [-0.08, 0.08], [0.0, 0.0]],
            ),
            goal,
        ],
        placement: Placement::Uniform,
        success: SuccessSpec {
            radius: 0.03,
            node: None,
            clearance: 0.0,
            grasp_radius: 0.025,
        },
        max_steps: 100,
        link_radius: 0.01,
        render: RenderSpec::default(),
        expert: ExpertSpec::default(),
    }
}

pub fn task_preset(name: &str) -> Result<TaskSpec> {
    match name {
        "reach" => Ok(reach()),
        "obstacle-reach" => Ok(obstacle_reach()),
        "elbow-push" => Ok(elbow_push()),
        "pick-analog" => Ok(pick_analog()),
        other => Err(Error::Config(format!(
            "unknown task '{other}' (known: {})",
            TASK_NAMES.join(", ")
        ))),
    }
}
