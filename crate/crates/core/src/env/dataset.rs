use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dequantize, TaskId, TaskSpec};
use crate::artifact;
use crate::error::{ensure, Result};

pub const DATASET_FORMAT: &str = "kadp-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One control step of a demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    /// Observed points, quantized to 0.1 mm.
    pub points: Vec<i32>,
    /// Node positions of the full chain at observation time.
    pub nodes: Vec<f64>,
    pub gripper: bool,
    /// Measured joint configuration at observation time.
    pub q: Vec<f64>,
    /// Commanded joint configuration.
    pub command: Vec<f64>,
    /// Node positions of the commanded configuration.
    pub action: Vec<f64>,
    pub action_gripper: bool,
}

impl DemoStep {
    pub fn points_f64(&self) -> Vec<f64> {
        self.points.iter().map(|&v| dequantize(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: TaskId,
    pub episode: usize,
    /// Seed of the attempt that produced this demonstration.
    pub seed: u64,
    pub success: bool,
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    /// Step indices of the observation window ending at `t`, oldest first;
    /// the first step repeats before the start.
    pub fn obs_indices(&self, t: usize, frames: usize) -> Vec<usize> {
        (0..frames).map(|i| (t + i + 1).saturating_sub(frames)).collect()
    }

    /// Step indices of the action chunk starting at `t`; the last step
    /// repeats past the end.
    pub fn chunk_indices(&self, t: usize, steps: usize) -> Vec<usize> {
        let last = self.steps.len().saturating_sub(1);
        (0..steps).map(|i| (t + i).min(last)).collect()
    }
}

/// Chunk indices as a free function, for callers without a demonstration.
pub fn chunk_at(len: usize, t: usize, steps: usize) -> Vec<usize> {
    let last = len.saturating_sub(1);
    (0..steps).map(|i| (t + i).min(last)).collect()
}

/// Versioned container of demonstrations for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskSpec,
    pub chain_hash: String,
    pub points_per_frame: usize,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save(path, DATASET_FORMAT, DATASET_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: Dataset = artifact::load(path, "dataset", DATASET_FORMAT, DATASET_VERSION)?;
        d.check()?;
        Ok(d)
    }

    pub fn check(&self) -> Result<()> {
        for (i, demo) in self.demos.iter().enumerate() {
            ensure!(!demo.steps.is_empty(), "demonstration {i} has no steps");
            for s in &demo.steps {
                ensure!(
                    s.points.len() == 3 * self.points_per_frame,
                    "demonstration {i} has a frame with {} coordinates, expected {}",
                    s.points.len(),
                    3 * self.points_per_frame
                );
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        artifact::hash_json(self)
    }

    pub fn total_steps(&self) -> usize {
        self.demos.iter().map(|d| d.steps.len()).sum()
    }
}

/// Which action coordinates a policy predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ActionRepr {
    /// Node positions of the (possibly subset) chain.
    #[default]
    Node,
    /// Joint angles.
    Joint,
    /// Gripper position and the first two rotation columns.
    Ee,
}

impl ActionRepr {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionRepr::Node => "node",
            ActionRepr::Joint => "joint",
            ActionRepr::Ee => "ee",
        }
    }
}

impl std::fmt::Display for ActionRepr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
