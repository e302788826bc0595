//! Demonstrations, normalization statistics and training-pair extraction.

mod expert;
mod store;

pub use expert::{scripted_expert, ExpertConfig};
pub use store::{
    collect, episode_file_name, load_dataset, read_episode, write_episode, CollectConfig, EpisodeRecord, Manifest,
    MANIFEST_FILE,
};

use serde::{Deserialize, Serialize};

use crate::controller::{build_conditioning, ControllerConfig};
use crate::error::Error;
use crate::keypoints::{KeypointConfig, KeypointEvent, KeypointManager, KEYPOINT_DIM};
use crate::sim2d::{Observation, Scene, Vec2};

/// Width added to a degenerate dimension so that it still maps to 0.
pub const DEGENERATE_WIDTH: f64 = 1e-6;

/// Where a demonstration came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Scripted,
    Teleop,
}

/// One control tick: the observation seen and the target commanded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub t: u64,
    pub obs: Observation,
    pub action: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub scene: Scene,
    pub ticks: Vec<Tick>,
    pub keypoints: Vec<KeypointEvent>,
    pub source: Source,
    /// Scene seed for scripted demonstrations.
    pub seed: Option<u64>,
}

impl Demonstration {
    pub fn validate(&self) -> Result<(), Error> {
        if self.ticks.is_empty() {
            return Err(Error::InvalidConfig("demonstration has no ticks".into()));
        }
        for tick in &self.ticks {
            if !self.scene.bounds.contains(tick.action) {
                return Err(Error::InvalidConfig(format!(
                    "action at tick {} lies outside the scene bounds",
                    tick.t
                )));
            }
            if !tick.action.is_finite() || !tick.obs.position.is_finite() || !tick.obs.torque.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite values at tick {}", tick.t)));
            }
        }
        Ok(())
    }

    pub fn observations(&self) -> impl Iterator<Item = Observation> + '_ {
        self.ticks.iter().map(|t| t.obs)
    }
}

/// Per-dimension affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl DimRange {
    /// Range mapping `[-1, 1]` onto itself.
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    /// Fits min/max over `rows`, widening degenerate dimensions. Returns
    /// `None` when there are no rows.
    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut seen = false;
        for row in rows {
            seen = true;
            for d in 0..dim {
                min[d] = min[d].min(row[d]);
                max[d] = max[d].max(row[d]);
            }
        }
        if !seen {
            return None;
        }
        for d in 0..dim {
            if max[d] - min[d] < DEGENERATE_WIDTH {
                let centre = 0.5 * (min[d] + max[d]);
                min[d] = centre - DEGENERATE_WIDTH / 2.0;
                max[d] = centre + DEGENERATE_WIDTH / 2.0;
            }
        }
        Some(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(d, &x)| 2.0 * (x - self.min[d]) / (self.max[d] - self.min[d]) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(d, &x)| (x + 1.0) * 0.5 * (self.max[d] - self.min[d]) + self.min[d])
            .collect()
    }

    fn validate(&self, what: &str, dim: usize) -> Result<(), Error> {
        if self.min.len() != dim || self.max.len() != dim {
            return Err(Error::Shape(format!("{what} normalization must have {dim} dimensions")));
        }
        if self.min.iter().zip(&self.max).any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("{what} normalization has an empty range")));
        }
        Ok(())
    }
}

/// Normalization statistics for observations, actions and keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs: DimRange,
    pub action: DimRange,
    pub keypoint: DimRange,
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            obs: DimRange::identity(4),
            action: DimRange::identity(2),
            keypoint: DimRange::identity(KEYPOINT_DIM),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.obs.validate("observation", 4)?;
        self.action.validate("action", 2)?;
        self.keypoint.validate("keypoint", KEYPOINT_DIM)
    }

    pub fn normalize_obs(&self, obs: &Observation) -> Vec<f64> {
        self.obs.normalize(&obs.to_array())
    }

    pub fn normalize_action(&self, a: Vec2) -> [f64; 2] {
        let v = self.action.normalize(&[a.x, a.y]);
        [v[0], v[1]]
    }

    pub fn denormalize_action(&self, v: &[f32]) -> Vec2 {
        let d = self.action.denormalize(&[v[0] as f64, v[1] as f64]);
        Vec2::new(d[0], d[1])
    }
}

/// Keypoints accepted while replaying a demonstration through a fresh manager.
pub fn replay_keypoints(demo: &Demonstration, kp_cfg: &KeypointConfig) -> KeypointManager {
    let mut manager = KeypointManager::new(*kp_cfg);
    for tick in &demo.ticks {
        manager.update(&tick.obs, tick.t);
    }
    manager
}

/// Fits min/max over every observation, action and replayed keypoint.
///
/// When no demonstration ever produces a keypoint the keypoint positions fall
/// back to the observation position range and the direction components to
/// `[-1, 1]`.
pub fn fit_normalization(demos: &[Demonstration], kp_cfg: &KeypointConfig) -> Result<NormStats, Error> {
    if demos.is_empty() || demos.iter().all(|d| d.ticks.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let obs: Vec<[f64; 4]> = demos.iter().flat_map(|d| d.observations().map(|o| o.to_array())).collect();
    let actions: Vec<[f64; 2]> = demos
        .iter()
        .flat_map(|d| d.ticks.iter().map(|t| [t.action.x, t.action.y]))
        .collect();
    let keypoints: Vec<[f64; KEYPOINT_DIM]> = demos
        .iter()
        .flat_map(|d| {
            replay_keypoints(d, kp_cfg)
                .events()
                .iter()
                .map(|e| e.keypoint().to_array())
                .collect::<Vec<_>>()
        })
        .collect();
    let obs = DimRange::fit(4, obs.iter().map(|r| &r[..])).ok_or(Error::EmptyDataset)?;
    let action = DimRange::fit(2, actions.iter().map(|r| &r[..])).ok_or(Error::EmptyDataset)?;
    let keypoint = DimRange::fit(KEYPOINT_DIM, keypoints.iter().map(|r| &r[..])).unwrap_or_else(|| {
        DimRange {
            min: vec![obs.min[0], obs.min[1], -1.0, -1.0],
            max: vec![obs.max[0], obs.max[1], 1.0, 1.0],
        }
    });
    Ok(NormStats { obs, action, keypoint })
}

/// Flat model input plus normalized target plan.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub cond: Vec<f32>,
    pub plan: Vec<f32>,
}

/// Normalized plan of `h_p` actions starting at tick `t`, repeating the final
/// action past the end of the demonstration.
pub fn plan_at(demo: &Demonstration, t: usize, h_p: usize, norm: &NormStats) -> Vec<f32> {
    let last = demo.ticks.len() - 1;
    (0..h_p)
        .flat_map(|k| {
            let a = demo.ticks[(t + k).min(last)].action;
            norm.normalize_action(a).map(|v| v as f32)
        })
        .collect()
}

/// One pair per tick: the conditioning the controller would build at that tick
/// and the actions the demonstrator took from there.
pub fn make_pairs(
    demos: &[Demonstration],
    cfg: &ControllerConfig,
    kp_cfg: &KeypointConfig,
    norm: &NormStats,
) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for demo in demos {
        let mut manager = KeypointManager::new(*kp_cfg);
        let history: Vec<Observation> = demo.observations().collect();
        for (i, tick) in demo.ticks.iter().enumerate() {
            manager.update(&tick.obs, tick.t);
            let cond = build_conditioning(&history[..=i], manager.buffer(), cfg, kp_cfg, norm);
            pairs.push(TrainingPair {
                cond: cond.flatten(),
                plan: plan_at(demo, i, cfg.h_p, norm),
            });
        }
    }
    pairs
}
