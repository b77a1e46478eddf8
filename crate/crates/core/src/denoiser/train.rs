use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{step_features, BatchInput, DenoiserModel, Obs};
use crate::artifact;
use crate::diffusion::{training_example, ActionChunk, ActionSpace, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Graph, Tensor};
use crate::seed::derive_seed;

pub const STATE_FORMAT: &str = "kadp-denoiser-state";
pub const STATE_VERSION: u32 = 1;

/// One training pair with its clean chunk already lifted into the diffused
/// variable.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub obs: Obs,
    pub a0: ActionChunk,
    pub var0: Vec<f64>,
}

impl TrainSample {
    /// Lift `a0` once; `warm` holds one initial variable per chunk step.
    pub fn new<S: ActionSpace + ?Sized>(space: &S, obs: Obs, a0: ActionChunk, warm: &[f64]) -> Result<Self> {
        let var0 = crate::diffusion::lift_chunk(space, &a0, warm)?;
        Ok(TrainSample { obs, a0, var0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: DenoiserModel,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save(path, STATE_FORMAT, STATE_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        artifact::load(path, "training state", STATE_FORMAT, STATE_VERSION)
    }
}

/// Where training persists its progress.
#[derive(Debug, Clone, Default)]
pub struct TrainControl {
    pub seed: u64,
    /// Resumable state, rewritten after every epoch.
    pub state_path: Option<PathBuf>,
    /// Lowest-loss model so far.
    pub best_path: Option<PathBuf>,
    /// CSV of `epoch,loss,wall_s`.
    pub log_path: Option<PathBuf>,
    /// Continue from `state_path` when it exists.
    pub resume: bool,
    /// Stop after this many epochs in this call (simulates an interruption).
    pub max_epochs_this_run: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: DenoiserModel,
    pub best: DenoiserModel,
    pub best_loss: f64,
    pub log: Vec<EpochLog>,
    /// Whether all configured epochs have run.
    pub finished: bool,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64))
}

/// Loss and parameter gradients of one batch. Every item draws its own
/// step and noise from `rng`; the loss is the mean squared error of the
/// normalized prediction against the normalized clean chunk.
pub fn training_loss<S, R>(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    space: &S,
    batch: &[&TrainSample],
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)>
where
    S: ActionSpace + ?Sized,
    R: Rng + ?Sized,
{
    ensure!(!batch.is_empty(), "empty training batch");
    let mut noisy = Vec::with_capacity(batch.len());
    let mut steps = Vec::with_capacity(batch.len() * model.config.width);
    for s in batch {
        model.check_obs(&s.obs)?;
        model.check_chunk(&s.a0)?;
        let (k, n) = training_example(schedule, space, &s.var0, &s.a0.gripper, rng)?;
        noisy.push(n.lifted.chunk);
        steps.extend(step_features(k, model.config.width));
    }
    let obs: Vec<&Obs> = batch.iter().map(|s| &s.obs).collect();
    let input = BatchInput {
        batch: batch.len(),
        points: model.normalized_points(&obs),
        proprio: model.normalized_proprio(&obs),
        step: Tensor::from_vec(batch.len(), model.config.width, steps),
        chunk: model.normalized_chunks(&noisy.iter().collect::<Vec<_>>()),
    };
    let target = target_tensor(model, batch.iter().map(|s| &s.a0));
    let mut g = Graph::new();
    let out = model.forward(&mut g, input);
    let loss = g.mse(out, target);
    let value = g.value(loss).data()[0];
    let grads = g.param_grads(loss, model.params.len());
    Ok((value, grads))
}

/// Clean chunks in the model's output units.
fn target_tensor<'a>(model: &DenoiserModel, chunks: impl Iterator<Item = &'a ActionChunk>) -> Tensor {
    let ad = model.out_dim();
    let mut data = Vec::new();
    for c in chunks {
        for (i, v) in c.interleaved().iter().enumerate() {
            data.push(v / model.norm.act_scale[i % ad]);
        }
    }
    let rows = data.len() / ad;
    Tensor::from_vec(rows, ad, data)
}

fn append_log(path: &Path, rows: &[(usize, f64, f64)], fresh: bool) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,loss,wall_s\n");
    }
    for (e, l, w) in rows {
        text.push_str(&format!("{e},{l:e},{w:.3}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Train with decoupled-weight-decay Adam. Each epoch draws its shuffling
/// and noise from an RNG derived from `(seed, epoch)`, so a resumed run
/// reproduces an uninterrupted one exactly.
pub fn train_denoiser<S: ActionSpace + ?Sized>(
    model: DenoiserModel,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    space: &S,
    control: &TrainControl,
) -> Result<TrainOutcome> {
    ensure!(!samples.is_empty(), "training set is empty");
    ensure!(
        space.act_dim() == model.act_dim,
        "action space has {} coordinates, model expects {}",
        space.act_dim(),
        model.act_dim
    );
    let resumed = match (&control.state_path, control.resume) {
        (Some(p), true) if p.exists() => {
            let st = TrainState::load(p)?;
            if st.model.config_hash() != model.config_hash() || st.seed != control.seed {
                return Err(Error::Mismatch(format!(
                    "training state {} was written by a different config or seed",
                    p.display()
                )));
            }
            log::info!("resuming training at epoch {}", st.epoch);
            Some(st)
        }
        _ => None,
    };
    let fresh_log = resumed.is_none();
    let mut state = match resumed {
        Some(st) => st,
        None => {
            let optimizer = AdamW::new(&model.params, model.config.lr, model.config.weight_decay);
            TrainState {
                model,
                optimizer,
                epoch: 0,
                seed: control.seed,
                best_loss: f64::INFINITY,
                best_epoch: 0,
                log: Vec::new(),
            }
        }
    };
    let mut best = match &control.best_path {
        Some(p) if !fresh_log && p.exists() => DenoiserModel::load(p)?,
        _ => state.model.clone(),
    };
    let epochs = state.model.config.epochs;
    let bs = state.model.config.batch_size.max(1);
    let clip = state.model.config.grad_clip;
    let start = Instant::now();
    let mut ran = 0;
    let mut log_rows = Vec::new();
    if fresh_log {
        if let Some(p) = &control.log_path {
            append_log(p, &[], true)?;
        }
    }
    while state.epoch < epochs {
        if control.max_epochs_this_run.is_some_and(|m| ran >= m) {
            break;
        }
        let mut rng = epoch_rng(control.seed, state.epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, mut grads) = training_loss(&state.model, schedule, space, &batch, &mut rng)?;
            ensure!(loss.is_finite(), "training loss diverged at epoch {}", state.epoch + 1);
            if clip > 0.0 {
                clip_grad_norm(&mut grads, clip);
            }
            state.optimizer.step(&mut state.model.params, &grads);
            total += loss;
            batches += 1;
        }
        state.epoch += 1;
        ran += 1;
        let loss = total / batches as f64;
        state.log.push(EpochLog {
            epoch: state.epoch,
            loss,
        });
        log_rows.push((state.epoch, loss, start.elapsed().as_secs_f64()));
        if loss < state.best_loss {
            state.best_loss = loss;
            state.best_epoch = state.epoch;
            best = state.model.clone();
            if let Some(p) = &control.best_path {
                best.save(p)?;
            }
        }
        if let Some(p) = &control.state_path {
            state.save(p)?;
        }
        if let Some(p) = &control.log_path {
            append_log(p, &log_rows, false)?;
            log_rows.clear();
        }
        if state.epoch % 10 == 0 || state.epoch == epochs {
            log::info!("epoch {}/{} loss {:.5}", state.epoch, epochs, loss);
        }
    }
    Ok(TrainOutcome {
        finished: state.epoch >= epochs,
        best_loss: state.best_loss,
        log: state.log,
        best,
        last: state.model,
    })
}
