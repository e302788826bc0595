//! Noise-prediction training with AdamW, cosine learning-rate decay and an
//! exponential moving average of the weights.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{mean_loss, tree_reduce, Architecture, ChunkGradients, DenoiserModel, NoisedExample};
use super::schedule::NoiseSchedule;
use crate::data::TrainingPair;
use crate::error::Error;
use crate::nn::Real;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Linear learning-rate warm-up, in optimizer steps.
    pub warmup_steps: usize,
    pub ema_decay: f64,
    /// Examples per gradient work unit; fixes the reduction tree, so results
    /// do not depend on the number of threads.
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            adam_betas: (0.95, 0.999),
            adam_eps: 1e-8,
            warmup_steps: 50,
            ema_decay: 0.995,
            chunk_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 || self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and chunk_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("learning_rate must be positive and ema_decay in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_pairs: usize) -> usize {
        n_pairs.div_ceil(self.batch_size)
    }

    /// Learning rate at optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// EMA decay at optimizer step `step`, ramped up from zero early on.
    pub fn ema_decay_at(&self, step: usize) -> f64 {
        let ramp = (1.0 + step as f64) / (10.0 + step as f64);
        self.ema_decay.min(ramp)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.adam_betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1, b2) = (b1 as f32, b2 as f32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let decay = (lr * cfg.weight_decay) as f32;
        let eps = cfg.adam_eps as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= decay * *p;
            *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f32], params: &[f32], decay: f64) {
    let d = decay as f32;
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = d * *e + (1.0 - d) * p;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub param_count: usize,
    pub pairs: usize,
    pub steps: usize,
}

/// Mean loss and gradients of one batch; diffusion steps and noise are drawn
/// from `rng` in batch order.
pub fn loss_and_gradients<T: Real>(
    model: &DenoiserModel<T>,
    batch: &[&TrainingPair],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    chunk_size: usize,
) -> Result<(f64, Vec<T>), Error> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let plan_len = model.arch().plan_len();
    let examples: Vec<NoisedExample<'_>> = batch
        .iter()
        .map(|pair| NoisedExample {
            plan: &pair.plan,
            cond: &pair.cond,
            step: rng.random_range(0..sched.n_diff),
            eps: (0..plan_len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
        })
        .collect();
    let normalizer = batch.len() as f64;
    let parts: Vec<Result<ChunkGradients<T>, Error>> = examples
        .par_chunks(chunk_size.max(1))
        .map(|chunk| model.chunk_loss_and_gradients(chunk, &sched.alpha_bar, normalizer))
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(parts.len());
    for (c, part) in parts.into_iter().enumerate() {
        match part {
            Ok(p) => {
                losses.extend(p.losses);
                grads.push(p.grads);
            }
            Err(Error::NonFiniteLoss { index }) => {
                return Err(Error::NonFiniteLoss {
                    index: c * chunk_size + index,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok((mean_loss(&losses), tree_reduce(grads)))
}

/// Trains a fresh model and returns its EMA weights.
///
/// `progress` is called after every epoch; returning `false` stops early.
pub fn train(
    pairs: &[TrainingPair],
    arch: &Architecture,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord) -> bool,
) -> Result<(DenoiserModel<f32>, TrainLog), Error> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    arch.validate()?;
    if sched.n_diff != arch.n_diff {
        return Err(Error::Mismatch("schedule and architecture disagree on n_diff".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.cond.len() != arch.cond_dim || p.plan.len() != arch.plan_len() {
            return Err(Error::Shape(format!("training pair {i} does not match the architecture")));
        }
    }
    let mut model = DenoiserModel::<f32>::new(arch, cfg.seed)?;
    let mut ema = model.params.clone();
    let mut opt = AdamW::new(model.param_count());
    let mut rng = rng_for(cfg.seed, &[0x7261_696e]);
    let steps_per_epoch = cfg.steps_per_epoch(pairs.len());
    let total = steps_per_epoch * cfg.epochs;
    let mut log = TrainLog {
        param_count: model.param_count(),
        pairs: pairs.len(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingPair> = idx.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) = loss_and_gradients(&model, &batch, sched, &mut rng, cfg.chunk_size)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { index } => Error::NonFiniteLoss { index: idx[index] },
                    other => other,
                })?;
            lr = cfg.lr_at(step, total);
            opt.step(&mut model.params, &grads, lr, cfg);
            ema_update(&mut ema, &model.params, cfg.ema_decay_at(step));
            epoch_losses.push(loss);
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: mean_loss(&epoch_losses),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        let keep_going = progress(&record);
        log.epochs.push(record);
        if !keep_going {
            break;
        }
    }
    log.steps = step;
    let trained = DenoiserModel::from_params(arch, ema)?;
    if !trained.all_finite() {
        return Err(Error::NonFiniteLoss { index: 0 });
    }
    Ok((trained, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_decay_ema_equals_raw_weights() {
        let mut ema = vec![1.0f32, -2.0, 3.0];
        let raw = vec![0.5f32, 0.25, -7.0];
        ema_update(&mut ema, &raw, 0.0);
        assert_eq!(ema, raw);
    }

    #[test]
    fn lr_schedule_warms_up_then_decays_to_zero() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            ..Default::default()
        };
        assert!(cfg.lr_at(0, 100) < cfg.lr_at(9, 100));
        assert!((cfg.lr_at(10, 100) - cfg.learning_rate).abs() < 1e-15);
        assert!(cfg.lr_at(99, 100) < 1e-2 * cfg.learning_rate);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(2);
        let mut p = vec![1.0f32, 1.0];
        opt.step(&mut p, &[1.0, -1.0], 0.1, &cfg);
        assert!(p[0] < 1.0 && p[1] > 1.0);
    }
}
