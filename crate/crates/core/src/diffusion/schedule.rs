use serde::{Deserialize, Serialize};

use crate::error::Error;

const COSINE_OFFSET: f64 = 0.008;
const BETA_MIN: f64 = 1e-4;
const BETA_MAX: f64 = 0.999;

/// Per-step variances of the forward noising chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub n_diff: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

fn cosine_alpha_bar(t: f64) -> f64 {
    let x = (t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl NoiseSchedule {
    /// Squared-cosine schedule with betas clipped to `[1e-4, 0.999]`.
    pub fn cosine(n_diff: usize) -> Result<Self, Error> {
        if n_diff < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 diffusion steps, got {n_diff}"
            )));
        }
        let n = n_diff as f64;
        let beta: Vec<f64> = (0..n_diff)
            .map(|i| {
                let b = 1.0 - cosine_alpha_bar((i + 1) as f64 / n) / cosine_alpha_bar(i as f64 / n);
                b.clamp(BETA_MIN, BETA_MAX)
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            n_diff,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// `alpha_bar` one step earlier, with the clean-data convention `alpha_bar[-1] = 1`.
    pub fn alpha_bar_prev(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bar[i - 1]
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.n_diff;
        if self.beta.len() != n || self.alpha.len() != n || self.alpha_bar.len() != n {
            return Err("length mismatch".into());
        }
        if !self.beta.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err("beta outside (0, 1)".into());
        }
        if !self.beta.windows(2).all(|w| w[0] < w[1]) {
            return Err("beta not strictly increasing".into());
        }
        if !self.alpha.iter().zip(&self.beta).all(|(a, b)| *a == 1.0 - b) {
            return Err("alpha != 1 - beta".into());
        }
        let mut acc = 1.0;
        for (a, ab) in self.alpha.iter().zip(&self.alpha_bar) {
            acc *= a;
            if acc != *ab {
                return Err("alpha_bar is not the running product".into());
            }
        }
        if !self.alpha_bar.windows(2).all(|w| w[0] > w[1]) {
            return Err("alpha_bar not strictly decreasing".into());
        }
        if self.alpha_bar[n - 1] >= 0.01 {
            return Err(format!("alpha_bar[last] = {} >= 0.01", self.alpha_bar[n - 1]));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_i) * plan + sqrt(1 - alpha_bar_i) * eps`.
pub fn forward_noise(plan: &[f32], step: usize, eps: &[f32], sched: &NoiseSchedule) -> Result<Vec<f32>, Error> {
    if plan.len() != eps.len() {
        return Err(Error::Shape(format!(
            "plan has {} values, noise has {}",
            plan.len(),
            eps.len()
        )));
    }
    if step >= sched.n_diff {
        return Err(Error::Shape(format!(
            "step {step} outside [0, {})",
            sched.n_diff
        )));
    }
    let a = sched.alpha_bar[step].sqrt();
    let s = (1.0 - sched.alpha_bar[step]).sqrt();
    Ok(plan
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form squared-cosine evaluation, independent of the schedule code.
    fn oracle_alpha_bar(n: usize) -> Vec<f64> {
        let f = |t: f64| ((t / n as f64 + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
        let mut out = Vec::new();
        let mut prod = 1.0;
        for i in 0..n {
            let beta = (1.0 - f(i as f64 + 1.0) / f(i as f64)).max(1e-4).min(0.999);
            prod *= 1.0 - beta;
            out.push(prod);
        }
        out
    }

    #[test]
    fn forty_five_step_schedule() {
        let s = NoiseSchedule::cosine(45).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(s.beta.len(), 45);
        assert!(s.alpha_bar[44] < 0.01);
        assert_eq!(s.alpha_bar[0], s.alpha[0]);
        assert_eq!(s.alpha[0], 1.0 - s.beta[0]);
        let oracle = oracle_alpha_bar(45);
        for (a, b) in s.alpha_bar.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // Frozen from the closed form: beta_0 = 0.0020613..., alpha_bar_44 = 1.1989e-6.
        assert!((s.beta[0] - 0.002061322668317156).abs() < 1e-12);
        assert!((s.alpha_bar[44] - 1.1989126734879805e-06).abs() < 1e-12);
    }

    #[test]
    fn invariants_hold_for_many_lengths() {
        for n in 2..200 {
            NoiseSchedule::cosine(n).unwrap().check_invariants().unwrap_or_else(|e| panic!("n={n}: {e}"));
        }
        assert!(NoiseSchedule::cosine(1).is_err());
    }

    #[test]
    fn forward_noise_edge_cases() {
        let s = NoiseSchedule::cosine(45).unwrap();
        let plan = vec![0.5f32, -0.25, 1.0, 0.0];
        let zero = vec![0.0f32; 4];
        let out = forward_noise(&plan, 10, &zero, &s).unwrap();
        for (o, p) in out.iter().zip(&plan) {
            assert!((*o as f64 - s.alpha_bar[10].sqrt() * *p as f64).abs() < 1e-6);
        }
        let eps = vec![1.0f32, -2.0, 0.5, 0.1];
        let out = forward_noise(&zero, 44, &eps, &s).unwrap();
        for (o, e) in out.iter().zip(&eps) {
            assert!((o - e).abs() <= e.abs() * 1e-5);
        }
        assert!(forward_noise(&plan, 45, &zero, &s).is_err());
        assert!(forward_noise(&plan, 0, &zero[..3], &s).is_err());
    }
}
