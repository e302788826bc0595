//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::f64::consts::PI;

use prodapt_core::data::TrainingPair;
use prodapt_core::diffusion::{
    sample, train, Architecture, DenoiserModel, EpsPredictor, NoiseSchedule, NoisedExample, SamplerConfig,
    TrainConfig,
};
use prodapt_core::keypoints::{ContactCandidate, Keypoint, KeypointBuffer, KeypointConfig};
use prodapt_core::sim2d::Vec2;
use prodapt_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------- keypoints

/// Reference: keep the full list of accepted candidates. A candidate is
/// checked against the last `n_kp` accepted ones, written out from scratch
/// without any ring buffer or eviction step.
pub fn keypoint_reference(stream: &[ContactCandidate], cfg: &KeypointConfig) -> Vec<(Vec2, f64)> {
    let mut accepted: Vec<(Vec2, f64)> = Vec::new();
    for c in stream {
        let start = accepted.len().saturating_sub(cfg.n_kp);
        let mut ok = true;
        for &(p, a) in &accepted[start..] {
            let dx = p.x - c.position.x;
            let dy = p.y - c.position.y;
            let near = (dx * dx + dy * dy).sqrt() < cfg.d_min;
            let mut diff = (a - c.normal_angle).rem_euclid(2.0 * PI);
            if diff > PI {
                diff = 2.0 * PI - diff;
            }
            if near && diff < cfg.theta_min {
                ok = false;
            }
        }
        if ok {
            accepted.push((c.position, c.normal_angle));
        }
    }
    let start = accepted.len().saturating_sub(cfg.n_kp);
    accepted[start..].to_vec()
}

/// Candidates clustered tightly enough that both dedup rules fire often;
/// some are exact repeats of an earlier candidate.
pub fn random_stream(rng: &mut ChaCha8Rng) -> Vec<ContactCandidate> {
    let len = rng.random_range(0..=200);
    let mut out: Vec<ContactCandidate> = Vec::with_capacity(len);
    for _ in 0..len {
        if !out.is_empty() && rng.random_bool(0.1) {
            let k = rng.random_range(0..out.len());
            out.push(out[k]);
            continue;
        }
        out.push(ContactCandidate {
            position: Vec2::new(rng.random_range(0.7..0.9), rng.random_range(-0.1..0.1)),
            normal_angle: rng.random_range(-PI..PI),
        });
    }
    out
}

pub fn same_buffer(buffer: &KeypointBuffer, expected: &[(Vec2, f64)]) -> bool {
    let got: Vec<Keypoint> = buffer.to_vec();
    got.len() == expected.len()
        && got.iter().zip(expected).all(|(k, &(p, a))| {
            let r = Keypoint::new(p, a);
            k.position == r.position && k.normal_sin == r.normal_sin && k.normal_cos == r.normal_cos
        })
}

/// Runs `streams` random streams through the buffer; returns the indices
/// whose final buffer differs from the reference or broke an invariant.
pub fn keypoint_mismatches(streams: usize, seed: u64) -> Vec<usize> {
    let cfg = KeypointConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for s in 0..streams {
        let stream = random_stream(&mut rng);
        let mut buffer = KeypointBuffer::new();
        let mut invariants = true;
        for c in &stream {
            buffer = buffer.maybe_insert(c, &cfg).0;
            invariants &= buffer.check_invariants(&cfg);
        }
        if !invariants || !same_buffer(&buffer, &keypoint_reference(&stream, &cfg)) {
            bad.push(s);
        }
    }
    bad
}

// ---------------------------------------------------------------- gradients

pub struct Batch {
    pub plans: Vec<Vec<f32>>,
    pub conds: Vec<Vec<f32>>,
    pub steps: Vec<usize>,
    pub eps: Vec<Vec<f32>>,
}

impl Batch {
    pub fn random(rng: &mut ChaCha8Rng, arch: &Architecture, size: usize) -> Self {
        let n = |rng: &mut ChaCha8Rng, len: usize| (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self {
            plans: (0..size).map(|_| n(rng, arch.plan_len())).collect(),
            conds: (0..size).map(|_| n(rng, arch.cond_dim)).collect(),
            steps: (0..size).map(|_| rng.random_range(0..arch.n_diff)).collect(),
            eps: (0..size).map(|_| n(rng, arch.plan_len())).collect(),
        }
    }

    pub fn examples(&self) -> Vec<NoisedExample<'_>> {
        (0..self.plans.len())
            .map(|i| NoisedExample {
                plan: &self.plans[i],
                cond: &self.conds[i],
                step: self.steps[i],
                eps: self.eps[i].clone(),
            })
            .collect()
    }
}

fn batch_loss(model: &DenoiserModel<f64>, batch: &Batch, alpha_bar: &[f64]) -> f64 {
    let g = model
        .chunk_loss_and_gradients(&batch.examples(), alpha_bar, batch.plans.len() as f64)
        .unwrap();
    g.losses.iter().sum::<f64>() / batch.plans.len() as f64
}

/// Max relative error between analytic and central-difference gradients over
/// `per_batch` random parameters for each of `batches` random batches of 4.
pub fn max_relative_gradient_error(arch: &Architecture, batches: usize, per_batch: usize, seed: u64) -> f64 {
    let sched = NoiseSchedule::cosine(arch.n_diff).unwrap();
    let mut model = DenoiserModel::<f64>::new_fully_random(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let batch = Batch::random(&mut rng, arch, 4);
        let analytic = model
            .chunk_loss_and_gradients(&batch.examples(), &sched.alpha_bar, 4.0)
            .unwrap()
            .grads;
        let mut checked = 0;
        while checked < per_batch {
            let k = rng.random_range(0..model.params.len());
            let orig = model.params[k];
            model.params[k] = orig + h;
            let up = batch_loss(&model, &batch, &sched.alpha_bar);
            model.params[k] = orig - h;
            let down = batch_loss(&model, &batch, &sched.alpha_bar);
            model.params[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(analytic[k].abs());
            // Gradients this small are dominated by finite-difference round-off.
            if scale < 1e-6 {
                continue;
            }
            worst = worst.max((numeric - analytic[k]).abs() / scale);
            checked += 1;
        }
    }
    worst
}

// ---------------------------------------------------------------- DDPM

/// Largest deviation of the cosine schedule from its closed form.
pub fn schedule_deviation(n: usize) -> Result<f64, Error> {
    let sched = NoiseSchedule::cosine(n)?;
    sched.check_invariants().map_err(Error::InvalidConfig)?;
    let f = |t: f64| (((t / n as f64) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut prod = 1.0;
    let mut worst = 0.0f64;
    for i in 0..n {
        let beta = (1.0 - f((i + 1) as f64) / f(i as f64)).clamp(1e-4, 0.999);
        prod *= 1.0 - beta;
        worst = worst
            .max((sched.beta[i] - beta).abs())
            .max((sched.alpha_bar[i] - prod).abs())
            .max((sched.alpha[i] - (1.0 - sched.beta[i])).abs());
    }
    Ok(worst)
}

/// Analytically optimal noise predictor when the data is the single plan `plan`.
pub struct SingletonOracle {
    pub plan: Vec<f32>,
    pub horizon: usize,
    pub alpha_bar: Vec<f64>,
}

impl EpsPredictor for SingletonOracle {
    fn plan_shape(&self) -> (usize, usize) {
        (self.horizon, 2)
    }
    fn cond_dim(&self) -> usize {
        0
    }
    fn predict_eps(&self, noisy: &[f32], step: usize, _: &[f32]) -> Result<Vec<f32>, Error> {
        let ab = self.alpha_bar[step];
        Ok(noisy
            .iter()
            .zip(&self.plan)
            .map(|(&x, &p)| ((x as f64 - ab.sqrt() * p as f64) / (1.0 - ab).sqrt()) as f32)
            .collect())
    }
}

/// Worst per-element error of oracle-denoiser samples over `trials` random plans.
pub fn singleton_recovery_error(trials: usize, seed: u64) -> f32 {
    let sched = NoiseSchedule::cosine(45).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let plan: Vec<f32> = (0..40).map(|_| rng.random_range(-0.9..0.9)).collect();
        let oracle = SingletonOracle {
            plan: plan.clone(),
            horizon: 20,
            alpha_bar: sched.alpha_bar.clone(),
        };
        let s = sample(&oracle, &[], &sched, &mut rng, None, &SamplerConfig::default()).unwrap();
        worst = s.values.iter().zip(&plan).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    worst
}

pub fn toy_arch(horizon: usize, cond_dim: usize, n_diff: usize) -> Architecture {
    Architecture {
        horizon,
        action_dim: 2,
        cond_dim,
        step_embed_dim: 16,
        widths: vec![32, 64],
        kernel: 3,
        groups: 8,
        mid_blocks: 0,
        n_diff,
    }
}

/// Pass-left / pass-right plans: the y row bulges up or down.
pub fn detour(sign: f32, horizon: usize) -> Vec<f32> {
    (0..horizon)
        .flat_map(|t| {
            let s = t as f32 / (horizon - 1) as f32;
            [2.0 * s - 1.0, sign * 0.8 * (std::f32::consts::PI * s).sin()]
        })
        .collect()
}

pub struct BimodalOutcome {
    /// Training frequency of the "left" mode.
    pub frequency: f64,
    /// Left-mode fraction per sampling seed.
    pub sampled: Vec<f64>,
    pub draws: usize,
}

impl BimodalOutcome {
    pub fn sigma(&self) -> f64 {
        (self.frequency * (1.0 - self.frequency) / self.draws as f64).sqrt()
    }

    /// Both modes seen under every seed, with frequencies within 3 sigma.
    pub fn ok(&self) -> bool {
        let s = self.sigma();
        self.sampled
            .iter()
            .all(|&p| p > 0.0 && p < 1.0 && (p - self.frequency).abs() <= 3.0 * s)
    }
}

/// Trains a small denoiser on a 60/40 mix of two detours and samples it.
pub fn bimodal_toy(draws: usize, seeds: &[u64]) -> BimodalOutcome {
    let horizon = 8;
    let n_left = 60;
    let pairs: Vec<TrainingPair> = (0..100)
        .map(|i| TrainingPair {
            cond: vec![0.0; 2],
            plan: detour(if i < n_left { 1.0 } else { -1.0 }, horizon),
        })
        .collect();
    let arch = toy_arch(horizon, 2, 45);
    let sched = NoiseSchedule::cosine(45).unwrap();
    let cfg = TrainConfig {
        epochs: 1500,
        batch_size: 100,
        learning_rate: 1e-3,
        warmup_steps: 20,
        ..TrainConfig::default()
    };
    let (model, _) = train(&pairs, &arch, &sched, &cfg, |_| true).unwrap();
    let sampled = seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let left = (0..draws)
                .filter(|_| {
                    let s = sample(&model, &[0.0, 0.0], &sched, &mut rng, None, &SamplerConfig::default()).unwrap();
                    (0..horizon).map(|t| s.values[2 * t + 1]).sum::<f32>() > 0.0
                })
                .count();
            left as f64 / draws as f64
        })
        .collect();
    BimodalOutcome {
        frequency: n_left as f64 / 100.0,
        sampled,
        draws,
    }
}
