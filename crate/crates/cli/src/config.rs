//! Run configuration: defaults, merged with section files and `--set`
//! overrides, then deserialized with unknown keys rejected.

use std::path::{Path, PathBuf};

use kadp::denoiser::DenoiserConfig;
use kadp::diffusion::DiffusionConfig;
use kadp::env::{task_preset, Env, Placement, TaskSpec};
use kadp::error::{Error, Result};
use kadp::ikmlp::IkMlpConfig;
use kadp::kinematics::{presets, KinematicChain};
use kadp::policy::PolicyConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SECTIONS: [&str; 9] = [
    "chain", "task", "demos", "ikmlp", "diffusion", "denoiser", "policy", "eval", "bench",
];

/// Which chain the run uses. Without either key the task's chain preset
/// applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub preset: Option<String>,
    /// Chain description file (TOML).
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub preset: String,
    /// Task description file (TOML); replaces the preset.
    pub file: Option<PathBuf>,
    pub placement: Option<Placement>,
    pub max_steps: Option<usize>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            preset: "reach".into(),
            file: None,
            placement: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub count: usize,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection { count: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkSection {
    /// Random configurations drawn for training and validation.
    pub samples: usize,
    /// Padding (rad) around the dataset's joint range when a dataset
    /// supplies the sampling region.
    pub branch_pad: f64,
    pub train: IkMlpConfig,
}

impl Default for IkSection {
    fn default() -> Self {
        IkSection {
            samples: 50_000,
            branch_pad: 0.3,
            train: IkMlpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// Placement used for evaluation instead of the task's own.
    pub placement: Option<Placement>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seeds: vec![0, 1, 2],
            episodes: 50,
            placement: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub targets: usize,
    /// Half-width (rad) of the uniform warm-start perturbation.
    pub perturbation: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            targets: 10_000,
            perturbation: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub chain: ChainSection,
    pub task: TaskSection,
    pub demos: DemoSection,
    pub ikmlp: IkSection,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub policy: PolicyConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            chain: ChainSection::default(),
            task: TaskSection::default(),
            demos: DemoSection::default(),
            ikmlp: IkSection::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Where the resolved configuration came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub files: Vec<PathBuf>,
    pub overrides: Vec<String>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Merge `src` into `dst`. Tables merge key by key, except that a table
/// whose `kind` tag changes is replaced wholesale.
fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) if d.get("kind") == s.get("kind") || s.get("kind").is_none() => {
                merge(d, s)
            }
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Apply one `path.to.key=value` override. The value is read as TOML and
/// falls back to a bare string.
fn apply_override(tree: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override '{spec}' is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override '{spec}' has an empty key")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut node = tree;
    for k in parents {
        let entry = node.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(config_err(format!("override '{spec}': '{k}' is not a table"))),
        };
    }
    if *last == "kind" && node.get("kind") != Some(&value) {
        node.clear();
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn read_table(path: &Path) -> Result<Table> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            kind: "config file",
            path: path.to_path_buf(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<Table>()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Defaults, then each file in order, then each override. A file whose
    /// stem names a section holds that section's keys; any other file holds
    /// a whole tree.
    pub fn resolve(files: &[PathBuf], overrides: &[String]) -> Result<(Self, Provenance)> {
        let mut tree = match Value::try_from(RunConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("the default config serializes to a table"),
        };
        for f in files {
            let t = read_table(f)?;
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if SECTIONS.contains(&stem) {
                let mut wrapped = Table::new();
                wrapped.insert(stem.to_string(), Value::Table(t));
                merge(&mut tree, wrapped);
            } else {
                merge(&mut tree, t);
            }
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok((
            cfg,
            Provenance {
                files: files.to_vec(),
                overrides: overrides.to_vec(),
            },
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.chain.preset.is_some() && self.chain.file.is_some() {
            return Err(config_err("set at most one of chain.preset and chain.file"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let mut spec = match &self.task.file {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact {
                        kind: "task file",
                        path: p.clone(),
                    });
                }
                TaskSpec::load(p)?
            }
            None => task_preset(&self.task.preset)?,
        };
        if let Some(pl) = &self.task.placement {
            spec.placement = pl.clone();
        }
        if let Some(m) = self.task.max_steps {
            spec.max_steps = m;
        }
        Ok(spec)
    }

    pub fn chain_for(&self, task: &TaskSpec) -> Result<KinematicChain> {
        match (&self.chain.file, &self.chain.preset) {
            (Some(p), _) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact {
                        kind: "chain file",
                        path: p.clone(),
                    });
                }
                KinematicChain::load(p)
            }
            (None, Some(name)) => presets::preset(name),
            (None, None) => presets::preset(&task.chain),
        }
    }

    pub fn env(&self) -> Result<Env> {
        let task = self.task_spec()?;
        let chain = self.chain_for(&task)?;
        Env::with_chain(task, chain)
    }

    /// The environment used for evaluation.
    pub fn eval_env(&self) -> Result<Env> {
        let mut task = self.task_spec()?;
        if let Some(pl) = &self.eval.placement {
            task.placement = pl.clone();
        }
        let chain = self.chain_for(&task)?;
        Env::with_chain(task, chain)
    }
}
