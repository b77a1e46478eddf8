//! Experiment grids: every cell evaluates one policy on one task over
//! several seeds, one persisted row per episode. Tables are pure
//! aggregations of those rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::denoiser::DenoiserModel;
use crate::diffusion::DiffusionConfig;
use crate::env::{Dataset, Env, TaskSpec};
use crate::error::{Error, Result};
use crate::kinematics::ChainConfig;
use crate::policy::{run_episode, ActionLayout, DiffusionSource, EpisodeResult, PolicyConfig, ReplaySource};
use crate::seed::derive_seed;

/// Part of every cache key; bump when episode semantics change.
pub const CODE_VERSION: &str = concat!("kadp-", env!("CARGO_PKG_VERSION"), "-eval1");

const TASK_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;

/// What produces the actions of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CellSource {
    /// A trained denoiser checkpoint.
    Checkpoint { path: PathBuf },
    /// Replay of a dataset's demonstrations on their own seeds; episode `i`
    /// replays demonstration `i`.
    Replay { dataset: PathBuf },
}

impl CellSource {
    fn path(&self) -> (&Path, &'static str) {
        match self {
            CellSource::Checkpoint { path } => (path, "denoiser checkpoint"),
            CellSource::Replay { dataset } => (dataset, "dataset"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub label: String,
    pub task: TaskSpec,
    /// Chain description; the task's chain preset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainConfig>,
    pub source: CellSource,
    /// Execution settings; representation and node subset come from the
    /// checkpoint.
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    pub eval_seeds: Vec<u64>,
    pub episodes: usize,
}

impl CellSpec {
    pub fn env(&self) -> Result<Env> {
        match &self.chain {
            Some(c) => Env::with_chain(self.task.clone(), c.build()?),
            None => Env::new(self.task.clone()),
        }
    }
}

/// Minimum evaluation runs per cell.
pub const MIN_RUNS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub cells: Vec<CellSpec>,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if !seen.insert(c.label.as_str()) {
                return Err(Error::Config(format!("duplicate cell label '{}'", c.label)));
            }
            if c.eval_seeds.len() < MIN_RUNS {
                return Err(Error::Config(format!(
                    "cell '{}' has {} evaluation seeds, at least {MIN_RUNS} are required",
                    c.label,
                    c.eval_seeds.len()
                )));
            }
            if c.episodes == 0 {
                return Err(Error::Config(format!("cell '{}' has no episodes", c.label)));
            }
            c.policy.validate()?;
        }
        Ok(())
    }
}

/// One evaluated episode. Column names are part of the results CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub cell: String,
    pub task: String,
    pub representation: String,
    pub constrained: bool,
    pub seed: u64,
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
    pub collision: bool,
    pub flagged: usize,
    pub mean_ik_error: f64,
}

fn row(cell: &CellSpec, layout: &ActionLayout, seed: u64, episode: usize, r: &EpisodeResult) -> EpisodeRow {
    EpisodeRow {
        cell: cell.label.clone(),
        task: cell.task.id.to_string(),
        representation: layout.repr.to_string(),
        constrained: layout.constrained,
        seed,
        episode,
        success: r.success,
        steps: r.steps,
        collision: r.collision,
        flagged: r.flagged,
        mean_ik_error: r.mean_ik_error(),
    }
}

/// Seeds of episode `episode` in evaluation run `seed`.
pub fn episode_seeds(seed: u64, episode: usize) -> (u64, u64) {
    (
        derive_seed(derive_seed(seed, TASK_STREAM), episode as u64),
        derive_seed(derive_seed(seed, POLICY_STREAM), episode as u64),
    )
}

fn require(path: &Path, kind: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            kind,
            path: path.to_path_buf(),
        })
    }
}

/// Evaluate one cell from scratch.
pub fn run_cell(cell: &CellSpec) -> Result<Vec<EpisodeRow>> {
    let env = cell.env()?;
    let mut rows = Vec::with_capacity(cell.eval_seeds.len() * cell.episodes);
    match &cell.source {
        CellSource::Checkpoint { path } => {
            let model = DenoiserModel::load(path)?;
            cell.policy.check_model(&model)?;
            let layout = ActionLayout::from_meta(&model.meta, env.chain())?;
            for &seed in &cell.eval_seeds {
                for ep in 0..cell.episodes {
                    let (task_seed, policy_seed) = episode_seeds(seed, ep);
                    let mut src =
                        DiffusionSource::new(&model, &layout, &cell.diffusion, cell.policy.sampler, policy_seed)?;
                    let r = run_episode(&env, &mut src, &layout, &cell.policy, model.config.points, Some(ep), task_seed)?;
                    rows.push(row(cell, &layout, seed, ep, &r));
                }
                log::info!("cell {} seed {seed} done", cell.label);
            }
        }
        CellSource::Replay { dataset } => {
            let ds = Dataset::load(dataset)?;
            if ds.chain_hash != env.chain().content_hash() {
                return Err(Error::Mismatch(format!(
                    "dataset {} was recorded on a different chain",
                    dataset.display()
                )));
            }
            if cell.episodes > ds.demos.len() {
                return Err(Error::Config(format!(
                    "replay cell '{}' asks for {} episodes, dataset holds {} demonstrations",
                    cell.label,
                    cell.episodes,
                    ds.demos.len()
                )));
            }
            let layout = ActionLayout::resolve(&cell.policy, env.chain())?;
            for &seed in &cell.eval_seeds {
                for (ep, demo) in ds.demos.iter().take(cell.episodes).enumerate() {
                    let mut src = ReplaySource::new(demo, &layout, cell.policy.action_horizon);
                    let r = run_episode(
                        &env,
                        &mut src,
                        &layout,
                        &cell.policy,
                        ds.points_per_frame,
                        Some(demo.episode),
                        demo.seed,
                    )?;
                    rows.push(row(cell, &layout, seed, ep, &r));
                }
            }
        }
    }
    Ok(rows)
}

/// Content hash identifying a cell's results.
pub fn cell_key(cell: &CellSpec) -> Result<String> {
    let (path, kind) = cell.source.path();
    require(path, kind)?;
    let source_hash = artifact::hash_file(path)?;
    Ok(artifact::hash_json(&(cell, source_hash, CODE_VERSION)))
}

pub fn write_rows_csv(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<EpisodeRow>> {
    require(path, "results table")?;
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Per-cell aggregate over evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub task: String,
    pub representation: String,
    pub constrained: bool,
    pub runs: usize,
    pub episodes: usize,
    /// Mean over runs of the per-run success rate.
    pub success_mean: f64,
    /// Population standard deviation over runs of the success rate.
    pub success_std: f64,
    pub ik_error_mean: f64,
    pub collision_rate: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Aggregate rows per cell, in order of first appearance.
pub fn summarize(rows: &[EpisodeRow]) -> Vec<CellSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&EpisodeRow>> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(r.cell.as_str()).or_default();
        if g.is_empty() {
            order.push(r.cell.as_str());
        }
        g.push(r);
    }
    order
        .into_iter()
        .map(|cell| {
            let g = &groups[cell];
            let mut runs: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
            let mut seed_order = Vec::new();
            for r in g {
                let e = runs.entry(r.seed).or_insert_with(|| {
                    seed_order.push(r.seed);
                    (0, 0)
                });
                e.0 += usize::from(r.success);
                e.1 += 1;
            }
            let rates: Vec<f64> = seed_order
                .iter()
                .map(|s| {
                    let (k, n) = runs[s];
                    k as f64 / n as f64
                })
                .collect();
            let (success_mean, success_std) = mean_std(&rates);
            let n = g.len() as f64;
            CellSummary {
                cell: cell.to_string(),
                task: g[0].task.clone(),
                representation: g[0].representation.clone(),
                constrained: g[0].constrained,
                runs: rates.len(),
                episodes: g.len(),
                success_mean,
                success_std,
                ik_error_mean: g.iter().map(|r| r.mean_ik_error).sum::<f64>() / n,
                collision_rate: g.iter().filter(|r| r.collision).count() as f64 / n,
            }
        })
        .collect()
}

/// Human-readable table of summaries.
pub fn summary_text(summaries: &[CellSummary]) -> String {
    let mut s = format!(
        "{:<24} {:<16} {:<6} {:>5} {:>5} {:>17} {:>12} {:>9}\n",
        "cell", "task", "repr", "kc", "runs", "success", "ik_error_m", "collide"
    );
    for c in summaries {
        s.push_str(&format!(
            "{:<24} {:<16} {:<6} {:>5} {:>5} {:>7.1}% ± {:>5.1}% {:>12.3e} {:>8.1}%\n",
            c.cell,
            c.task,
            c.representation,
            if c.constrained { "yes" } else { "no" },
            c.runs,
            100.0 * c.success_mean,
            100.0 * c.success_std,
            c.ik_error_mean,
            100.0 * c.collision_rate
        ));
    }
    s
}

pub fn write_summary_csv(path: &Path, summaries: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-cell histogram of episode IK errors over decades `[10^k, 10^(k+1))`
/// from 1e-16 m to 1 m; errors below 1e-16 m land in the first bin.
pub fn write_ik_histogram_csv(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "bin_lo", "bin_hi", "count"])?;
    for s in summarize(rows) {
        let mut counts = [0usize; 17];
        for r in rows.iter().filter(|r| r.cell == s.cell) {
            let b = if r.mean_ik_error <= 1e-16 {
                0
            } else {
                ((r.mean_ik_error.log10().floor() as i64 + 16).clamp(0, 16)) as usize
            };
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let lo = if b == 0 { 0.0 } else { 10f64.powi(b as i32 - 16) };
            let hi = 10f64.powi(b as i32 - 15);
            w.write_record([s.cell.clone(), format!("{lo:e}"), format!("{hi:e}"), c.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResults {
    pub rows: Vec<EpisodeRow>,
    pub summaries: Vec<CellSummary>,
    /// Cells served from the cache.
    pub cached: Vec<String>,
}

/// Evaluate every cell, reusing cached rows whose key matches. With a cache
/// directory, a re-run of a finished grid recomputes nothing.
pub fn run_grid(grid: &ExperimentGrid, cache_dir: Option<&Path>) -> Result<GridResults> {
    grid.validate()?;
    let mut rows = Vec::new();
    let mut cached = Vec::new();
    for cell in &grid.cells {
        let key = cell_key(cell)?;
        let cache = cache_dir.map(|d| d.join(format!("{}-{}.csv", sanitize(&cell.label), &key[..16])));
        let cell_rows = match &cache {
            Some(p) if p.exists() => {
                log::info!("cell {} served from cache {}", cell.label, p.display());
                cached.push(cell.label.clone());
                read_rows_csv(p)?
            }
            _ => {
                let r = run_cell(cell)?;
                if let Some(p) = &cache {
                    write_rows_csv(p, &r)?;
                }
                r
            }
        };
        rows.extend(cell_rows);
    }
    let summaries = summarize(&rows);
    Ok(GridResults {
        rows,
        summaries,
        cached,
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// One arm of the node-count ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetVariant {
    pub label: String,
    /// Chain nodes; the full set when absent.
    pub nodes: Option<Vec<usize>>,
}

/// Node-count variants for a chain preset: wrist-only, wrist plus base and
/// elbow, and the full set.
pub fn default_subsets(chain_name: &str) -> Option<Vec<SubsetVariant>> {
    match chain_name {
        "panda" => Some(vec![
            SubsetVariant {
                label: "node-3".into(),
                nodes: Some(crate::kinematics::presets::panda_node3()),
            },
            SubsetVariant {
                label: "node-5".into(),
                nodes: Some(crate::kinematics::presets::panda_node5()),
            },
            SubsetVariant {
                label: "full".into(),
                nodes: None,
            },
        ]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub results: GridResults,
    /// Variants whose constraints were disabled, with the reason.
    pub disabled: Vec<(String, String)>,
}

/// Train and evaluate one policy per node subset. `train` receives the
/// variant's policy config and returns its checkpoint; `base` supplies the
/// task, seeds and episode count.
pub fn node_subset_ablation<F>(
    base: &CellSpec,
    base_policy: &PolicyConfig,
    variants: &[SubsetVariant],
    mut train: F,
    cache_dir: Option<&Path>,
) -> Result<AblationReport>
where
    F: FnMut(&SubsetVariant, &PolicyConfig) -> Result<PathBuf>,
{
    let env = base.env()?;
    let mut cells = Vec::with_capacity(variants.len());
    let mut disabled = Vec::new();
    for v in variants {
        let policy = PolicyConfig {
            node_subset: v.nodes.clone(),
            ..base_policy.clone()
        };
        let layout = ActionLayout::resolve(&policy, env.chain())?;
        if let Some(note) = &layout.note {
            log::info!("ablation variant {}: {note}", v.label);
            disabled.push((v.label.clone(), note.clone()));
        }
        let path = train(v, &policy)?;
        cells.push(CellSpec {
            label: v.label.clone(),
            source: CellSource::Checkpoint { path },
            ..base.clone()
        });
    }
    let results = run_grid(&ExperimentGrid { cells }, cache_dir)?;
    Ok(AblationReport { results, disabled })
}
