//! Conditional clean-sample predictor: point-cloud and proprioception
//! encoder, diffusion-step embedding, and a temporal network over the chunk
//! with cross-attention to per-frame condition tokens.

mod train;

pub use train::{
    train_denoiser, training_loss, EpochLog, TrainControl, TrainOutcome, TrainSample, TrainState,
};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::diffusion::ActionChunk;
use crate::error::{ensure, Result};
use crate::nn::{Graph, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "kadp-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Observation history length.
    pub obs_horizon: usize,
    /// Predicted chunk length.
    pub action_horizon: usize,
    /// Points per observation frame.
    pub points: usize,
    /// Token width of the condition and backbone.
    pub width: usize,
    /// Residual blocks, or U-Net levels for the U-Net backbone.
    pub blocks: usize,
    pub backbone: Backbone,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; non-positive disables clipping.
    pub grad_clip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Stack of full-length residual blocks.
    Residual,
    /// Temporal U-Net: each level halves the chunk length with a stride-2
    /// convolution and restores it with skip connections on the way up.
    Unet,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            obs_horizon: 2,
            action_horizon: 8,
            points: 256,
            width: 128,
            blocks: 4,
            backbone: Backbone::Residual,
            epochs: 500,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-6,
            grad_clip: 1.0,
        }
    }
}

/// Observation: `frames` point sets of `points` points each plus one
/// proprioception vector per frame, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obs {
    pub frames: usize,
    pub points_per_frame: usize,
    /// `frames * points_per_frame * 3` coordinates.
    pub points: Vec<f64>,
    /// `frames * proprio_dim` values.
    pub proprio: Vec<f64>,
    pub t_index: usize,
}

impl Obs {
    pub fn proprio_dim(&self) -> usize {
        self.proprio.len() / self.frames.max(1)
    }

    pub fn frame_points(&self, f: usize) -> &[f64] {
        let n = self.points_per_frame * 3;
        &self.points[f * n..(f + 1) * n]
    }
}

/// Per-dimension affine statistics of the model inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Action coordinates plus gripper.
    pub act_center: Vec<f64>,
    pub act_scale: Vec<f64>,
    pub proprio_center: Vec<f64>,
    pub proprio_scale: Vec<f64>,
    pub point_center: [f64; 3],
    pub point_scale: f64,
}

fn range_stats(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for r in rows {
        for i in 0..dim {
            lo[i] = lo[i].min(r[i]);
            hi[i] = hi[i].max(r[i]);
        }
    }
    let center = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let scale = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| if b - a > 2e-3 { 0.5 * (b - a) } else { 1e-3 })
        .collect();
    (center, scale)
}

impl Normalization {
    /// Range statistics of the clean chunks and observations.
    pub fn fit(chunks: &[&ActionChunk], obs: &[&Obs]) -> Result<Self> {
        ensure!(!chunks.is_empty() && !obs.is_empty(), "cannot fit statistics to no data");
        let ad = chunks[0].dim + 1;
        let (act_center, act_scale) = range_stats(
            chunks.iter().flat_map(|c| {
                (0..c.steps).map(move |i| {
                    let mut v = c.step(i).to_vec();
                    v.push(c.gripper[i]);
                    v
                })
            }),
            ad,
        );
        let pd = obs[0].proprio_dim();
        let (proprio_center, proprio_scale) = range_stats(
            obs.iter()
                .flat_map(|o| (0..o.frames).map(move |f| o.proprio[f * pd..(f + 1) * pd].to_vec())),
            pd,
        );
        let mut sum = [0.0; 3];
        let mut count = 0.0;
        for o in obs {
            for p in o.points.chunks(3) {
                for c in 0..3 {
                    sum[c] += p[c];
                }
                count += 1.0;
            }
        }
        let point_center = if count > 0.0 {
            [sum[0] / count, sum[1] / count, sum[2] / count]
        } else {
            [0.0; 3]
        };
        let mut sq = 0.0;
        for o in obs {
            for p in o.points.chunks(3) {
                sq += (0..3).map(|c| (p[c] - point_center[c]).powi(2)).sum::<f64>();
            }
        }
        let point_scale = if count > 0.0 { (sq / count).sqrt().max(1e-3) } else { 1.0 };
        Ok(Normalization {
            act_center,
            act_scale,
            proprio_center,
            proprio_scale,
            point_center,
            point_scale,
        })
    }

    pub fn identity(act_dim: usize, proprio_dim: usize) -> Self {
        Normalization {
            act_center: vec![0.0; act_dim + 1],
            act_scale: vec![1.0; act_dim + 1],
            proprio_center: vec![0.0; proprio_dim],
            proprio_scale: vec![1.0; proprio_dim],
            point_center: [0.0; 3],
            point_scale: 1.0,
        }
    }
}

/// Identity of the data and maps a model was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub representation: String,
    pub constrained: bool,
    pub chain_hash: String,
    pub ik_mlp_hash: Option<String>,
    pub dataset_hash: String,
    pub node_subset: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    /// Action coordinates per step, gripper excluded.
    pub act_dim: usize,
    pub proprio_dim: usize,
    pub norm: Normalization,
    pub params: Vec<Tensor>,
    pub meta: ModelMeta,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Embedding,
}

fn param_layout(cfg: &DenoiserConfig, act_dim: usize, proprio_dim: usize) -> Vec<(usize, usize, Init)> {
    let w = cfg.width;
    let ad = act_dim + 1;
    let mut s = Vec::new();
    let linear = |s: &mut Vec<(usize, usize, Init)>, i: usize, o: usize| {
        s.push((i, o, Init::FanIn(i)));
        s.push((1, o, Init::FanIn(i)));
    };
    // point MLP
    linear(&mut s, 3, w);
    linear(&mut s, w, w);
    // frame fusion
    linear(&mut s, w + proprio_dim, w);
    linear(&mut s, w, w);
    s.push((cfg.obs_horizon, w, Init::Embedding));
    // step embedding
    linear(&mut s, w, w);
    linear(&mut s, w, w);
    // chunk input
    linear(&mut s, ad, w);
    s.push((cfg.action_horizon, w, Init::Embedding));
    let block = |s: &mut Vec<(usize, usize, Init)>| {
        linear(s, 3 * w, w);
        linear(s, w, w);
        linear(s, w, w);
        for _ in 0..3 {
            s.push((w, w, Init::FanIn(w)));
        }
        linear(s, w, w);
        linear(s, w, 2 * w);
        linear(s, 2 * w, w);
    };
    match cfg.backbone {
        Backbone::Residual => {
            for _ in 0..cfg.blocks {
                block(&mut s);
            }
        }
        Backbone::Unet => {
            for _ in 0..cfg.blocks {
                block(&mut s);
                linear(&mut s, 2 * w, w);
            }
            block(&mut s);
            for _ in 0..cfg.blocks {
                linear(&mut s, w, 2 * w);
                linear(&mut s, 2 * w, w);
                block(&mut s);
            }
        }
    }
    linear(&mut s, w, ad);
    s
}

fn param_shapes(cfg: &DenoiserConfig, act_dim: usize, proprio_dim: usize) -> Vec<(usize, usize)> {
    param_layout(cfg, act_dim, proprio_dim)
        .into_iter()
        .map(|(r, c, _)| (r, c))
        .collect()
}

/// Walks the parameter list in construction order.
struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }

    fn linear<'p>(&mut self, g: &mut Graph<'p>, x: Var) -> Var {
        let (w, b) = (self.next(), self.next());
        g.linear(x, w, b)
    }
}

/// Inputs of one batched forward pass, already normalized.
pub(crate) struct BatchInput {
    pub batch: usize,
    /// `(batch * obs_horizon * points) x 3`.
    pub points: Tensor,
    /// `(batch * obs_horizon) x proprio_dim`.
    pub proprio: Tensor,
    /// `batch x width` sinusoidal step features.
    pub step: Tensor,
    /// `(batch * action_horizon) x (act_dim + 1)`.
    pub chunk: Tensor,
}

/// Sinusoidal features of diffusion step `k`.
pub fn step_features(k: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    let denom = (half.max(2) - 1) as f64;
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / denom).exp();
        out[i] = (k as f64 * freq).sin();
        out[half + i] = (k as f64 * freq).cos();
    }
    out
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(
        config: DenoiserConfig,
        act_dim: usize,
        proprio_dim: usize,
        norm: Normalization,
        meta: ModelMeta,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            config.width >= 2 && config.blocks >= 1,
            "denoiser needs width >= 2 and at least one block"
        );
        ensure!(
            config.obs_horizon >= 1 && config.action_horizon >= 1 && config.points >= 1,
            "horizons and point count must be positive"
        );
        if config.backbone == Backbone::Unet {
            ensure!(
                config.action_horizon % (1 << config.blocks) == 0,
                "U-Net with {} levels needs an action horizon divisible by {}",
                config.blocks,
                1usize << config.blocks
            );
        }
        ensure!(
            norm.act_center.len() == act_dim + 1 && norm.proprio_center.len() == proprio_dim,
            "normalization statistics do not match the model dimensions"
        );
        let params = param_layout(&config, act_dim, proprio_dim)
            .into_iter()
            .map(|(r, c, init)| match init {
                Init::FanIn(f) => Tensor::uniform(r, c, 1.0 / (f as f64).sqrt(), rng),
                Init::Embedding => Tensor::uniform(r, c, 0.02, rng),
            })
            .collect();
        let mut model = DenoiserModel {
            config,
            act_dim,
            proprio_dim,
            norm,
            params,
            meta,
        };
        // Start the head at the data center.
        let last = model.params.len() - 1;
        for (i, b) in model.params[last].data_mut().iter_mut().enumerate() {
            *b = model.norm.act_center[i] / model.norm.act_scale[i];
        }
        Ok(model)
    }

    /// Output width per chunk step (coordinates plus gripper).
    pub fn out_dim(&self) -> usize {
        self.act_dim + 1
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn config_hash(&self) -> String {
        artifact::hash_json(&(&self.config, self.act_dim, self.proprio_dim))
    }

    pub fn content_hash(&self) -> String {
        artifact::hash_json(self)
    }

    pub fn check_obs(&self, obs: &Obs) -> Result<()> {
        ensure!(
            obs.frames == self.config.obs_horizon,
            "observation has {} frames, model expects {}",
            obs.frames,
            self.config.obs_horizon
        );
        ensure!(
            obs.points_per_frame == self.config.points
                && obs.points.len() == obs.frames * obs.points_per_frame * 3,
            "observation has {} points per frame, model expects {}",
            obs.points_per_frame,
            self.config.points
        );
        ensure!(
            obs.proprio.len() == obs.frames * self.proprio_dim,
            "observation proprioception has {} values, expected {}",
            obs.proprio.len(),
            obs.frames * self.proprio_dim
        );
        Ok(())
    }

    pub fn check_chunk(&self, chunk: &ActionChunk) -> Result<()> {
        ensure!(
            chunk.steps == self.config.action_horizon && chunk.dim == self.act_dim,
            "chunk is {} x {}, model expects {} x {}",
            chunk.steps,
            chunk.dim,
            self.config.action_horizon,
            self.act_dim
        );
        Ok(())
    }

    pub(crate) fn normalized_points(&self, obs: &[&Obs]) -> Tensor {
        let n: usize = obs.iter().map(|o| o.points.len() / 3).sum();
        let mut data = Vec::with_capacity(n * 3);
        let (c, s) = (self.norm.point_center, self.norm.point_scale);
        for o in obs {
            for p in o.points.chunks(3) {
                data.extend((0..3).map(|i| (p[i] - c[i]) / s));
            }
        }
        Tensor::from_vec(n, 3, data)
    }

    pub(crate) fn normalized_proprio(&self, obs: &[&Obs]) -> Tensor {
        let pd = self.proprio_dim;
        let rows: usize = obs.iter().map(|o| o.frames).sum();
        let mut data = Vec::with_capacity(rows * pd);
        for o in obs {
            for (i, v) in o.proprio.iter().enumerate() {
                let d = i % pd;
                data.push((v - self.norm.proprio_center[d]) / self.norm.proprio_scale[d]);
            }
        }
        Tensor::from_vec(rows, pd, data)
    }

    pub(crate) fn normalized_chunks(&self, chunks: &[&ActionChunk]) -> Tensor {
        let ad = self.out_dim();
        let rows: usize = chunks.iter().map(|c| c.steps).sum();
        let mut data = Vec::with_capacity(rows * ad);
        for c in chunks {
            for (i, v) in c.interleaved().iter().enumerate() {
                let d = i % ad;
                data.push((v - self.norm.act_center[d]) / self.norm.act_scale[d]);
            }
        }
        Tensor::from_vec(rows, ad, data)
    }

    /// Condition tokens, `(batch * obs_horizon) x width`.
    fn encode_graph<'p>(
        &self,
        g: &mut Graph<'p>,
        cur: &mut Cursor<'_>,
        points: Tensor,
        proprio: Tensor,
        batch: usize,
    ) -> Var {
        let x = g.input(points);
        let h = cur.linear(g, x);
        let h = g.silu(h);
        let h = cur.linear(g, h);
        let pooled = g.group_max(h, self.config.points);
        let pr = g.input(proprio);
        let cat = g.concat_cols(&[pooled, pr]);
        let c = cur.linear(g, cat);
        let c = g.silu(c);
        let c = cur.linear(g, c);
        let frame = cur.next();
        let fe = g.tile_rows(frame, batch);
        g.add(c, fe)
    }

    /// Normalized prediction, `(batch * action_horizon) x (act_dim + 1)`.
    fn denoise_graph<'p>(
        &self,
        g: &mut Graph<'p>,
        cur: &mut Cursor<'_>,
        cond: Var,
        step: Tensor,
        chunk: Tensor,
        batch: usize,
    ) -> Var {
        let ta = self.config.action_horizon;
        let to = self.config.obs_horizon;
        let s = g.input(step);
        let e = cur.linear(g, s);
        let e = g.silu(e);
        let emb = cur.linear(g, e);
        let emb_act = g.silu(emb);

        let x = g.input(chunk);
        let h = cur.linear(g, x);
        let pos = cur.next();
        let pe = g.tile_rows(pos, batch);
        let h = g.add(h, pe);
        let se = g.repeat_rows(emb, ta);
        let mut h = g.add(h, se);

        match self.config.backbone {
            Backbone::Residual => {
                for _ in 0..self.config.blocks {
                    h = block(g, cur, h, emb_act, cond, ta, to);
                }
            }
            Backbone::Unet => {
                let w = self.config.width;
                let mut skips = Vec::with_capacity(self.config.blocks);
                let mut t = ta;
                for _ in 0..self.config.blocks {
                    h = block(g, cur, h, emb_act, cond, t, to);
                    skips.push(h);
                    let rows = g.value(h).rows();
                    let pairs = g.reshape(h, rows / 2, 2 * w);
                    h = cur.linear(g, pairs);
                    t /= 2;
                }
                h = block(g, cur, h, emb_act, cond, t, to);
                for skip in skips.into_iter().rev() {
                    let up = cur.linear(g, h);
                    let rows = g.value(up).rows();
                    let up = g.reshape(up, rows * 2, w);
                    t *= 2;
                    let merged = g.concat_cols(&[up, skip]);
                    h = cur.linear(g, merged);
                    h = block(g, cur, h, emb_act, cond, t, to);
                }
            }
        }
        let u = g.layer_norm(h);
        cur.linear(g, u)
    }

    /// Full forward pass; returns the normalized prediction.
    pub(crate) fn forward<'p>(&'p self, g: &mut Graph<'p>, input: BatchInput) -> Var {
        let vars: Vec<Var> = self.params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let mut cur = Cursor { vars: &vars, at: 0 };
        let cond = self.encode_graph(g, &mut cur, input.points, input.proprio, input.batch);
        let out = self.denoise_graph(g, &mut cur, cond, input.step, input.chunk, input.batch);
        debug_assert_eq!(cur.at, vars.len());
        out
    }

    /// Condition tokens for one observation, `obs_horizon x width`.
    pub fn encode_observation(&self, obs: &Obs) -> Result<Tensor> {
        self.check_obs(obs)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let mut cur = Cursor { vars: &vars, at: 0 };
        let pts = self.normalized_points(&[obs]);
        let pr = self.normalized_proprio(&[obs]);
        let c = self.encode_graph(&mut g, &mut cur, pts, pr, 1);
        Ok(g.value(c).clone())
    }

    /// Predicted clean chunk in raw units for noisy chunk `ak` at step `k`.
    pub fn predict_sample(&self, ak: &ActionChunk, cond: &Tensor, k: usize) -> Result<ActionChunk> {
        self.check_chunk(ak)?;
        ensure!(
            cond.shape() == (self.config.obs_horizon, self.config.width),
            "condition is {:?}, expected {:?}",
            cond.shape(),
            (self.config.obs_horizon, self.config.width)
        );
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let mut cur = Cursor { vars: &vars, at: ENCODER_PARAMS };
        let c = g.input(cond.clone());
        let step = Tensor::row_vector(step_features(k, self.config.width));
        let x = self.normalized_chunks(&[ak]);
        let out = self.denoise_graph(&mut g, &mut cur, c, step, x, 1);
        let mut raw = g.value(out).clone();
        for r in 0..raw.rows() {
            for (v, s) in raw.row_mut(r).iter_mut().zip(&self.norm.act_scale) {
                *v *= s;
            }
        }
        ActionChunk::from_interleaved(ak.steps, self.act_dim, raw.data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DenoiserModel =
            artifact::load(path, "denoiser checkpoint", CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        let shapes = param_shapes(&m.config, m.act_dim, m.proprio_dim);
        ensure!(
            shapes.len() == m.params.len()
                && shapes.iter().zip(&m.params).all(|(s, p)| *s == p.shape()),
            "denoiser checkpoint parameters do not match its config"
        );
        ensure!(m.params_finite(), "denoiser checkpoint holds non-finite parameters");
        Ok(m)
    }
}

/// One residual block over chunks of `t` tokens: temporal mixing with the
/// step embedding injected, cross-attention to the `to` condition tokens of
/// each item, and a feed-forward layer.
#[allow(clippy::too_many_arguments)]
fn block(g: &mut Graph<'_>, cur: &mut Cursor<'_>, h: Var, emb: Var, cond: Var, t: usize, to: usize) -> Var {
    let u = g.layer_norm(h);
    let prev = g.group_shift(u, t, -1);
    let next = g.group_shift(u, t, 1);
    let c = g.concat_cols(&[prev, u, next]);
    let a = cur.linear(g, c);
    let sp = cur.linear(g, emb);
    let sp = g.repeat_rows(sp, t);
    let a = g.add(a, sp);
    let a = g.silu(a);
    let a = cur.linear(g, a);
    let h = g.add(h, a);

    let u = g.layer_norm(h);
    let (wq, wk, wv) = (cur.next(), cur.next(), cur.next());
    let q = g.matmul(u, wq);
    let k = g.matmul(cond, wk);
    let v = g.matmul(cond, wv);
    let o = g.attention(q, k, v, t, to);
    let o = cur.linear(g, o);
    let h = g.add(h, o);

    let u = g.layer_norm(h);
    let m = cur.linear(g, u);
    let m = g.silu(m);
    let m = cur.linear(g, m);
    g.add(h, m)
}

/// Parameters consumed by the observation encoder.
const ENCODER_PARAMS: usize = 9;
