//! Learned node-to-joint surrogate: a 3-layer tanh MLP trained on
//! `(fk(q), q)` pairs, with an exact input Jacobian.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{ensure, Error, Result};
use crate::kinematics::{
    sample_in_limits, validate_node_sufficiency, JointVector, KinematicChain, NodeState,
};
use crate::nn::{init_linear, Graph, Sgd, Tensor};

pub const CHECKPOINT_FORMAT: &str = "kadp-ik-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkMlpConfig {
    /// Two hidden-layer widths.
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub val_fraction: f64,
    /// Fractions of the epoch budget at which the learning rate is multiplied
    /// by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Per-joint sub-intervals the training configurations are drawn from.
    /// `None` samples the full limit box.
    pub branch_region: Option<Vec<(f64, f64)>>,
}

impl Default for IkMlpConfig {
    fn default() -> Self {
        IkMlpConfig {
            hidden: [256, 256],
            epochs: 40,
            batch_size: 128,
            lr: 0.02,
            momentum: 0.9,
            val_fraction: 0.1,
            lr_milestones: vec![0.5, 0.75, 0.9],
            lr_decay: 0.3,
            branch_region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkMlpMeta {
    pub n_samples: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Held-out RMSE over all joints (radians).
    pub val_rmse: f64,
    pub val_rmse_per_joint: Vec<f64>,
    pub final_train_loss: f64,
    pub config: IkMlpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpIkModel {
    /// `[W1, b1, W2, b2, W3, b3]`, weights stored `in x out`.
    pub params: Vec<Tensor>,
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_scale: Vec<f64>,
    pub limits: Vec<(f64, f64)>,
    pub chain_hash: String,
    pub meta: IkMlpMeta,
}

/// Intersect a branch region with the chain limits.
fn region(chain: &KinematicChain, cfg: &IkMlpConfig) -> Result<Vec<(f64, f64)>> {
    let limits = chain.limits();
    let Some(r) = &cfg.branch_region else {
        return Ok(limits);
    };
    if r.len() != limits.len() {
        return Err(Error::Config(format!(
            "branch region has {} intervals, chain has {} joints",
            r.len(),
            limits.len()
        )));
    }
    r.iter()
        .zip(&limits)
        .enumerate()
        .map(|(j, ((a, b), (lo, hi)))| {
            let (a, b) = (a.max(*lo), b.min(*hi));
            if a > b {
                Err(Error::Config(format!(
                    "branch region for joint {j} does not overlap its limits"
                )))
            } else {
                Ok((a, b))
            }
        })
        .collect()
}

/// Padded bounding box of a set of configurations, clipped to the limits.
pub fn branch_region_from_configs(
    chain: &KinematicChain,
    configs: &[JointVector],
    pad: f64,
) -> Vec<(f64, f64)> {
    chain
        .limits()
        .iter()
        .enumerate()
        .map(|(j, (lo, hi))| {
            let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
            for q in configs {
                a = a.min(q.0[j]);
                b = b.max(q.0[j]);
            }
            if a > b {
                (*lo, *hi)
            } else {
                ((a - pad).max(*lo), (b + pad).min(*hi))
            }
        })
        .collect()
}

fn mean_scale(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // Constant inputs (fixed base nodes) get unit scale.
    let scale = var
        .into_iter()
        .map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

pub fn train_ik_mlp<R: Rng + ?Sized>(
    chain: &KinematicChain,
    n_samples: usize,
    cfg: &IkMlpConfig,
    rng: &mut R,
) -> Result<MlpIkModel> {
    ensure!(n_samples > 0, "IK MLP training needs at least one sample");
    ensure!(
        cfg.batch_size > 0 && cfg.epochs > 0,
        "batch size and epoch count must be positive"
    );
    ensure!(
        (0.0..1.0).contains(&cfg.val_fraction),
        "validation fraction must lie in [0, 1)"
    );
    let suff = validate_node_sufficiency(chain);
    if !suff.sufficient() {
        return Err(Error::Contract(format!(
            "node set of chain '{}' is insufficient (full rank in {:.1}% of samples): \
             the node-to-joint map is not a function",
            chain.name(),
            100.0 * suff.fraction_full_rank()
        )));
    }
    let reg = region(chain, cfg)?;
    let n = chain.n_dof();
    let d_in = 3 * chain.n_nodes();

    let qs: Vec<Vec<f64>> = (0..n_samples).map(|_| sample_in_limits(&reg, rng)).collect();
    let xs: Vec<Vec<f64>> = qs.iter().map(|q| chain.fk_flat(q)).collect();
    let n_val = ((n_samples as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(n_samples - 1);
    let n_train = n_samples - n_val;

    let (in_mean, in_scale) = mean_scale(&xs[..n_train], d_in);
    let (out_mean, out_scale) = mean_scale(&qs[..n_train], n);
    let norm = |v: &[f64], m: &[f64], s: &[f64]| -> Vec<f64> {
        v.iter().zip(m).zip(s).map(|((x, m), s)| (x - m) / s).collect()
    };
    let xn: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, &in_mean, &in_scale)).collect();
    let qn: Vec<Vec<f64>> = qs.iter().map(|q| norm(q, &out_mean, &out_scale)).collect();

    let [h1, h2] = cfg.hidden;
    let mut params = Vec::with_capacity(6);
    for (fi, fo) in [(d_in, h1), (h1, h2), (h2, n)] {
        let (w, b) = init_linear(fi, fo, rng);
        params.push(w);
        params.push(b);
    }
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let frac = epoch as f64 / cfg.epochs as f64;
        let decays = cfg.lr_milestones.iter().filter(|m| frac >= **m).count();
        opt.lr = cfg.lr * cfg.lr_decay.powi(decays as i32);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut xb = Vec::with_capacity(b * d_in);
            let mut yb = Vec::with_capacity(b * n);
            for &i in chunk {
                xb.extend_from_slice(&xn[i]);
                yb.extend_from_slice(&qn[i]);
            }
            let grads = {
                let mut g = Graph::new();
                let x = g.input(Tensor::from_vec(b, d_in, xb));
                let out = forward_graph(&mut g, &params, x);
                let loss = g.mse(out, Tensor::from_vec(b, n, yb));
                loss_sum += g.value(loss).get(0, 0);
                g.param_grads(loss, params.len())
            };
            opt.step(&mut params, &grads);
            batches += 1;
        }
        final_loss = loss_sum / batches.max(1) as f64;
        log::debug!("ik-mlp epoch {epoch}: loss {final_loss:.6}");
    }

    let mut model = MlpIkModel {
        params,
        in_mean,
        in_scale,
        out_mean,
        out_scale,
        limits: chain.limits(),
        chain_hash: chain.content_hash(),
        meta: IkMlpMeta {
            n_samples,
            n_train,
            n_val,
            val_rmse: f64::NAN,
            val_rmse_per_joint: vec![f64::NAN; n],
            final_train_loss: final_loss,
            config: cfg.clone(),
        },
    };
    let (val_x, val_q) = if n_val > 0 {
        (&xs[n_train..], &qs[n_train..])
    } else {
        (&xs[..], &qs[..])
    };
    let mut sq = vec![0.0; n];
    for (x, q) in val_x.iter().zip(val_q) {
        let p = model.apply_flat(x);
        for j in 0..n {
            sq[j] += (p[j] - q[j]).powi(2);
        }
    }
    let m = val_x.len() as f64;
    model.meta.val_rmse_per_joint = sq.iter().map(|s| (s / m).sqrt()).collect();
    model.meta.val_rmse = (sq.iter().sum::<f64>() / (m * n as f64)).sqrt();
    Ok(model)
}

fn forward_graph<'p>(g: &mut Graph<'p>, params: &'p [Tensor], x: crate::nn::Var) -> crate::nn::Var {
    let p: Vec<_> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let a1 = g.linear(x, p[0], p[1]);
    let h1 = g.tanh(a1);
    let a2 = g.linear(h1, p[2], p[3]);
    let h2 = g.tanh(a2);
    g.linear(h2, p[4], p[5])
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = b.data().to_vec();
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    out
}

impl MlpIkModel {
    pub fn n_dof(&self) -> usize {
        self.out_mean.len()
    }

    pub fn input_dim(&self) -> usize {
        self.in_mean.len()
    }

    /// Reject use with a chain other than the one trained on.
    pub fn check_chain(&self, chain: &KinematicChain) -> Result<()> {
        let h = chain.content_hash();
        if h != self.chain_hash {
            return Err(Error::Contract(format!(
                "IK MLP was trained for chain hash {}, got chain '{}' with hash {}",
                &self.chain_hash[..12.min(self.chain_hash.len())],
                chain.name(),
                &h[..12]
            )));
        }
        Ok(())
    }

    /// Hidden activations and unclamped output for a flat node vector.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let xn: Vec<f64> = x
            .iter()
            .zip(&self.in_mean)
            .zip(&self.in_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let p = &self.params;
        let h1: Vec<f64> = dense(&xn, &p[0], &p[1]).into_iter().map(f64::tanh).collect();
        let h2: Vec<f64> = dense(&h1, &p[2], &p[3]).into_iter().map(f64::tanh).collect();
        let y: Vec<f64> = dense(&h2, &p[4], &p[5])
            .into_iter()
            .zip(&self.out_mean)
            .zip(&self.out_scale)
            .map(|((v, m), s)| v * s + m)
            .collect();
        (h1, h2, y)
    }

    /// Apply without the chain-hash check. Output clamped to the limits.
    pub(crate) fn apply_flat(&self, x: &[f64]) -> Vec<f64> {
        let (_, _, mut y) = self.forward(x);
        for (v, (lo, hi)) in y.iter_mut().zip(&self.limits) {
            *v = v.clamp(*lo, *hi);
        }
        y
    }

    /// Exact Jacobian of `apply_flat`; clamped outputs get zero rows.
    pub(crate) fn gradient_flat(&self, x: &[f64]) -> DMatrix<f64> {
        let (h1, h2, y) = self.forward(x);
        let p = &self.params;
        let (d_in, n) = (self.input_dim(), self.n_dof());
        let (w1, w2, w3) = (&p[0], &p[2], &p[4]);
        let mut jac = DMatrix::zeros(n, d_in);
        for j in 0..n {
            let (lo, hi) = self.limits[j];
            if y[j] < lo || y[j] > hi {
                continue;
            }
            // d y_j / d h2 then back through each tanh layer.
            let g2: Vec<f64> = (0..h2.len())
                .map(|k| w3.get(k, j) * (1.0 - h2[k] * h2[k]) * self.out_scale[j])
                .collect();
            let g1: Vec<f64> = (0..h1.len())
                .map(|i| {
                    let s: f64 = w2.row(i).iter().zip(&g2).map(|(a, b)| a * b).sum();
                    s * (1.0 - h1[i] * h1[i])
                })
                .collect();
            for c in 0..d_in {
                let s: f64 = w1.row(c).iter().zip(&g1).map(|(a, b)| a * b).sum();
                jac[(j, c)] = s / self.in_scale[c];
            }
        }
        jac
    }

    /// Hash of the weights; used to check the model stays frozen.
    pub fn param_hash(&self) -> String {
        artifact::hash_json(&self.params)
    }

    /// Content hash of the whole checkpoint.
    pub fn content_hash(&self) -> String {
        artifact::hash_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: MlpIkModel = artifact::load(path, "IK MLP checkpoint", CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        ensure!(m.params.len() == 6, "IK MLP checkpoint must hold 3 layers");
        ensure!(
            m.in_scale.iter().chain(&m.out_scale).all(|s| *s > 0.0),
            "IK MLP normalization scales must be positive"
        );
        Ok(m)
    }
}

pub fn ik_mlp_apply(model: &MlpIkModel, chain: &KinematicChain, nodes: &NodeState) -> Result<JointVector> {
    model.check_chain(chain)?;
    check_nodes(model, nodes)?;
    Ok(JointVector(model.apply_flat(&nodes.flat())))
}

/// `n x 3m` Jacobian of [`ik_mlp_apply`] with respect to the flat node vector.
pub fn ik_mlp_gradient(
    model: &MlpIkModel,
    chain: &KinematicChain,
    nodes: &NodeState,
) -> Result<DMatrix<f64>> {
    model.check_chain(chain)?;
    check_nodes(model, nodes)?;
    Ok(model.gradient_flat(&nodes.flat()))
}

fn check_nodes(model: &MlpIkModel, nodes: &NodeState) -> Result<()> {
    ensure!(
        3 * nodes.len() == model.input_dim(),
        "IK MLP expects {} nodes, got {}",
        model.input_dim() / 3,
        nodes.len()
    );
    ensure!(nodes.is_finite(), "IK MLP input is not finite");
    Ok(())
}
