use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ActionLayout, PolicyConfig};
use crate::denoiser::{train_denoiser, DenoiserConfig, DenoiserModel, ModelMeta, Normalization, Obs, TrainControl, TrainOutcome, TrainSample};
use crate::diffusion::{ActionChunk, DiffusionConfig};
use crate::env::Dataset;
use crate::error::{Error, Result};
use crate::ikmlp::MlpIkModel;
use crate::kinematics::KinematicChain;
use crate::seed::derive_seed;

/// Seed stream reserved for parameter initialization.
const INIT_STREAM: u64 = u64::MAX;

/// One observation window with the chunk that followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub obs: Obs,
    pub chunk: ActionChunk,
    /// Recorded joint commands of the chunk steps.
    pub commands: Vec<f64>,
}

/// Every (observation window, action chunk) pair of a dataset, with
/// windows padded by repeating the first frame and chunks by repeating the
/// last action.
pub fn build_training_set(dataset: &Dataset, layout: &ActionLayout, cfg: &PolicyConfig) -> Result<Vec<TrainingItem>> {
    let p = dataset.points_per_frame;
    let mut out = Vec::with_capacity(dataset.total_steps());
    for demo in &dataset.demos {
        let frames: Vec<(Vec<f64>, Vec<f64>)> = demo
            .steps
            .iter()
            .map(|s| (s.points_f64(), layout.proprio(&s.q, s.gripper)))
            .collect();
        for t in 0..demo.steps.len() {
            let mut points = Vec::with_capacity(cfg.obs_horizon * p * 3);
            let mut proprio = Vec::with_capacity(cfg.obs_horizon * layout.proprio_dim());
            for i in demo.obs_indices(t, cfg.obs_horizon) {
                points.extend_from_slice(&frames[i].0);
                proprio.extend_from_slice(&frames[i].1);
            }
            let mut coords = Vec::with_capacity(cfg.action_horizon * layout.act_dim());
            let mut gripper = Vec::with_capacity(cfg.action_horizon);
            let mut commands = Vec::new();
            for i in demo.chunk_indices(t, cfg.action_horizon) {
                let s = &demo.steps[i];
                coords.extend(layout.action_coords(s));
                gripper.push(if s.action_gripper { 1.0 } else { 0.0 });
                commands.extend_from_slice(&s.command);
            }
            out.push(TrainingItem {
                obs: Obs {
                    frames: cfg.obs_horizon,
                    points_per_frame: p,
                    points,
                    proprio,
                    t_index: t,
                },
                chunk: ActionChunk::new(cfg.action_horizon, layout.act_dim(), coords, gripper)?,
                commands,
            });
        }
    }
    Ok(out)
}

/// Inputs of one policy training run.
pub struct PolicyTraining<'a> {
    pub dataset: &'a Dataset,
    pub chain: &'a KinematicChain,
    pub ik_mlp: Option<&'a MlpIkModel>,
    pub policy: &'a PolicyConfig,
    pub diffusion: &'a DiffusionConfig,
    pub denoiser: &'a DenoiserConfig,
}

/// Train a denoiser on a demonstration dataset. Node layouts with
/// constraints diffuse in joint space, lifting the clean chunks once with
/// the configured node-to-joint map; other layouts diffuse normalized
/// coordinates.
pub fn train_policy(job: &PolicyTraining<'_>, control: &TrainControl) -> Result<TrainOutcome> {
    let (dataset, chain, cfg) = (job.dataset, job.chain, job.policy);
    cfg.validate()?;
    if dataset.chain_hash != chain.content_hash() {
        return Err(Error::Mismatch(format!(
            "dataset was recorded on a different chain than '{}'",
            chain.name()
        )));
    }
    if job.denoiser.obs_horizon != cfg.obs_horizon || job.denoiser.action_horizon != cfg.action_horizon {
        return Err(Error::Config(format!(
            "denoiser horizons (T_o {}, T_a {}) differ from policy horizons (T_o {}, T_a {})",
            job.denoiser.obs_horizon, job.denoiser.action_horizon, cfg.obs_horizon, cfg.action_horizon
        )));
    }
    if job.denoiser.points != dataset.points_per_frame {
        return Err(Error::Config(format!(
            "denoiser expects {} points per frame, dataset has {}",
            job.denoiser.points, dataset.points_per_frame
        )));
    }
    if dataset.demos.is_empty() {
        return Err(Error::Config("dataset holds no demonstrations".into()));
    }
    let layout = ActionLayout::resolve(cfg, chain)?;
    let items = build_training_set(dataset, &layout, cfg)?;
    let norm = Normalization::fit(
        &items.iter().map(|i| &i.chunk).collect::<Vec<_>>(),
        &items.iter().map(|i| &i.obs).collect::<Vec<_>>(),
    )?;
    let mlp = if layout.constrained && cfg.train_lift == super::IkLift::Mlp {
        job.ik_mlp
    } else {
        None
    };
    let mlp_hash_before = mlp.map(|m| m.param_hash());
    let meta = ModelMeta {
        representation: layout.repr.as_str().to_string(),
        constrained: layout.constrained,
        chain_hash: chain.content_hash(),
        ik_mlp_hash: mlp.map(|m| m.content_hash()),
        dataset_hash: dataset.content_hash(),
        node_subset: (!layout.is_full_node_set()).then(|| layout.nodes.clone()),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(control.seed, INIT_STREAM));
    let model = DenoiserModel::new(
        job.denoiser.clone(),
        layout.act_dim(),
        layout.proprio_dim(),
        norm.clone(),
        meta,
        &mut init_rng,
    )?;
    let space = layout.training_space(&norm, cfg.train_lift, mlp)?;
    let samples = items
        .into_iter()
        .map(|it| {
            let warm = if layout.constrained {
                it.commands
            } else {
                vec![0.0; cfg.action_horizon * space.var_dim()]
            };
            TrainSample::new(space.as_ref(), it.obs, it.chunk, &warm)
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = job.diffusion.schedule()?;
    let outcome = train_denoiser(model, &samples, &schedule, space.as_ref(), control)?;
    if mlp.map(|m| m.param_hash()) != mlp_hash_before {
        return Err(Error::Contract("IK MLP parameters changed during policy training".into()));
    }
    Ok(outcome)
}
