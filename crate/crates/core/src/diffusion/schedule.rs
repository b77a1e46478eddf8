use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// Cosine-squared cumulative schedule with offset 0.008 and betas capped
    /// at 0.999.
    SquaredCosine,
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::SquaredCosine
    }
}

impl ScheduleKind {
    pub fn linear_default() -> Self {
        ScheduleKind::Linear {
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Betas and derived products for steps `1..=K`. Index 0 holds the
/// conventions `beta = 0`, `alpha_bar = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

fn cosine_alpha_bar(t: f64) -> f64 {
    ((t + 0.008) / 1.008 * FRAC_PI_2).cos().powi(2)
}

impl NoiseSchedule {
    pub fn new(k: usize, kind: ScheduleKind) -> Result<Self> {
        ensure!(k >= 1, "noise schedule needs at least one step");
        let mut beta = vec![0.0; k + 1];
        match kind {
            ScheduleKind::SquaredCosine => {
                for (i, b) in beta.iter_mut().enumerate().skip(1) {
                    let t0 = (i - 1) as f64 / k as f64;
                    let t1 = i as f64 / k as f64;
                    *b = (1.0 - cosine_alpha_bar(t1) / cosine_alpha_bar(t0)).min(MAX_BETA);
                }
            }
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => {
                ensure!(
                    beta_start > 0.0 && beta_end > 0.0 && beta_start < 1.0 && beta_end < 1.0,
                    "linear schedule betas must lie in (0, 1)"
                );
                for (i, b) in beta.iter_mut().enumerate().skip(1) {
                    *b = if k == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * (i - 1) as f64 / (k - 1) as f64
                    };
                }
            }
        }
        let mut alpha_bar = vec![1.0; k + 1];
        for i in 1..=k {
            alpha_bar[i] = alpha_bar[i - 1] * (1.0 - beta[i]);
        }
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    /// Posterior variance; zero at `k = 1`.
    pub fn beta_tilde(&self, k: usize) -> f64 {
        assert!(k >= 1, "beta_tilde is defined for k >= 1");
        (1.0 - self.alpha_bar[k - 1]) * self.beta[k] / (1.0 - self.alpha_bar[k])
    }

    /// Posterior-mean weight on the clean sample.
    pub fn c0(&self, k: usize) -> f64 {
        assert!(k >= 1, "c0 is defined for k >= 1");
        self.alpha_bar[k - 1].sqrt() * self.beta[k] / (1.0 - self.alpha_bar[k])
    }

    /// Posterior-mean weight on the noisy sample.
    pub fn ck(&self, k: usize) -> f64 {
        assert!(k >= 1, "ck is defined for k >= 1");
        self.alpha(k).sqrt() * (1.0 - self.alpha_bar[k - 1]) / (1.0 - self.alpha_bar[k])
    }

    /// Uniform-stride descending subsequence `K, K - s, ..., s` for `n`
    /// accelerated steps; each entry steps to the next one and the last to 0.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let k = self.steps();
        ensure!(n >= 1 && n <= k, "DDIM step count {n} must lie in 1..={k}");
        let stride = k / n;
        Ok((0..n).map(|i| k - i * stride).collect())
    }
}

/// Build a schedule with `k` steps.
pub fn make_schedule(k: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(k, kind)
}
