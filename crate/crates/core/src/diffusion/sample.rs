//! Ancestral sampler over action plans, with optional warm start from the
//! previous plan.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::DenoiserModel;
use super::schedule::{forward_noise, NoiseSchedule};
use crate::error::Error;
use crate::nn::Real;

/// `horizon x dim` action plan in normalized coordinates, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSample {
    pub horizon: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl PlanSample {
    pub fn new(horizon: usize, dim: usize, values: Vec<f32>) -> Result<Self, Error> {
        if values.len() != horizon * dim {
            return Err(Error::Shape(format!(
                "plan of {horizon}x{dim} needs {} values, got {}",
                horizon * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("plan contains non-finite values".into()));
        }
        Ok(Self {
            horizon,
            dim,
            values,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Drops the first `shift` rows and repeats the last row to keep the length.
    pub fn shifted(&self, shift: usize) -> PlanSample {
        let mut values = Vec::with_capacity(self.values.len());
        for t in 0..self.horizon {
            let src = (t + shift).min(self.horizon - 1);
            values.extend_from_slice(self.row(src));
        }
        PlanSample {
            horizon: self.horizon,
            dim: self.dim,
            values,
        }
    }
}

/// Anything that predicts the injected noise of a noisy plan.
pub trait EpsPredictor {
    fn plan_shape(&self) -> (usize, usize);
    fn cond_dim(&self) -> usize;
    fn predict_eps(&self, noisy: &[f32], step: usize, cond: &[f32]) -> Result<Vec<f32>, Error>;
}

impl<T: Real> EpsPredictor for DenoiserModel<T> {
    fn plan_shape(&self) -> (usize, usize) {
        (self.arch().horizon, self.arch().action_dim)
    }

    fn cond_dim(&self) -> usize {
        self.arch().cond_dim
    }

    fn predict_eps(&self, noisy: &[f32], step: usize, cond: &[f32]) -> Result<Vec<f32>, Error> {
        DenoiserModel::predict_eps(self, noisy, step, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Fraction of the chain re-run when warm-starting.
    pub warmstart_fraction: f64,
    /// Clip the clean-plan estimate to the normalized range `[-1, 1]`.
    pub clip_sample: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            warmstart_fraction: 0.6,
            clip_sample: true,
        }
    }
}

impl SamplerConfig {
    /// Noise level a warm-started chain begins from: `ceil(fraction * n_diff)`.
    pub fn warmstart_step(&self, n_diff: usize) -> usize {
        ((self.warmstart_fraction * n_diff as f64).ceil() as usize).min(n_diff - 1)
    }
}

/// Previous plan to warm-start from and how many of its actions were executed.
#[derive(Debug, Clone, Copy)]
pub struct Warmstart<'a> {
    pub previous: &'a PlanSample,
    pub executed: usize,
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// One reverse step from noise level `i` to `i - 1`, in place.
///
/// The mean is written through the clean-plan estimate so that clipping can be
/// applied; without clipping it equals
/// `(x - beta_i / sqrt(1 - alpha_bar_i) * eps) / sqrt(alpha_i)`.
pub fn posterior_step(
    x: &mut [f32],
    eps: &[f32],
    i: usize,
    sched: &NoiseSchedule,
    clip: bool,
    noise: Option<&[f32]>,
) {
    let ab = sched.alpha_bar[i];
    let ab_prev = sched.alpha_bar_prev(i);
    let beta = sched.beta[i];
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let c1 = sched.alpha[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = beta.sqrt();
    for (j, v) in x.iter_mut().enumerate() {
        let xi = *v as f64;
        let mut x0 = (xi - (1.0 - ab).sqrt() * eps[j] as f64) / ab.sqrt();
        if clip {
            x0 = x0.clamp(-1.0, 1.0);
        }
        let mut next = c0 * x0 + c1 * xi;
        if let Some(z) = noise {
            next += sigma * z[j] as f64;
        }
        *v = next as f32;
    }
}

/// Draws a plan by iterative denoising.
///
/// Without a warm start the chain begins from standard normal noise at the
/// last step. With one, the previous plan is shifted by the executed actions,
/// re-noised to the warm-start level, and denoised from there.
pub fn sample<P: EpsPredictor + ?Sized>(
    model: &P,
    cond: &[f32],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    warmstart: Option<Warmstart<'_>>,
    cfg: &SamplerConfig,
) -> Result<PlanSample, Error> {
    let (horizon, dim) = model.plan_shape();
    let n = horizon * dim;
    if cond.len() != model.cond_dim() {
        return Err(Error::Shape(format!(
            "conditioning has {} values, model expects {}",
            cond.len(),
            model.cond_dim()
        )));
    }
    let (mut x, start) = match warmstart {
        Some(ws) => {
            if ws.previous.horizon != horizon || ws.previous.dim != dim {
                return Err(Error::Shape("warm-start plan shape differs from model".into()));
            }
            let k = cfg.warmstart_step(sched.n_diff);
            let shifted = ws.previous.shifted(ws.executed);
            let eps = normal_vec(rng, n);
            (forward_noise(&shifted.values, k, &eps, sched)?, k)
        }
        None => (normal_vec(rng, n), sched.n_diff - 1),
    };
    for i in (0..=start).rev() {
        let eps = model.predict_eps(&x, i, cond)?;
        let z = (i > 0).then(|| normal_vec(rng, n));
        posterior_step(&mut x, &eps, i, sched, cfg.clip_sample, z.as_deref());
    }
    PlanSample::new(horizon, dim, x)
}
