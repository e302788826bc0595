//! Receding-horizon loop: observe, sample a plan, apply the first `h_a`
//! actions, repeat.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::diffusion::{sample, EpsPredictor, NoiseSchedule, PlanSample, SamplerConfig, Warmstart};
use crate::error::Error;
use crate::keypoints::{KeypointBuffer, KeypointConfig, KeypointEvent, KeypointManager, KEYPOINT_DIM};
use crate::sim2d::{observe, step, Observation, Scene, SimConfig, SimState, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub h_o: usize,
    pub h_p: usize,
    pub h_a: usize,
    pub n_kp: usize,
    pub control_hz: f64,
    pub max_iters: usize,
    pub success_radius: f64,
    pub use_keypoints: bool,
    pub warmstart: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            h_o: 3,
            h_p: 20,
            h_a: 10,
            n_kp: 10,
            control_hz: 10.0,
            max_iters: 1000,
            success_radius: 0.05,
            use_keypoints: true,
            warmstart: true,
        }
    }
}

impl ControllerConfig {
    /// Keypoint-free configuration with observation horizon `h_o`.
    pub fn baseline(h_o: usize) -> Self {
        Self {
            h_o,
            use_keypoints: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.h_o == 0 {
            return Err(Error::InvalidConfig("h_o must be at least 1".into()));
        }
        if self.h_a == 0 || self.h_a > self.h_p {
            return Err(Error::InvalidConfig("h_a must satisfy 1 <= h_a <= h_p".into()));
        }
        if self.n_kp == 0 {
            return Err(Error::InvalidConfig("n_kp must be at least 1".into()));
        }
        if !(self.success_radius > 0.0) {
            return Err(Error::InvalidConfig("success_radius must be positive".into()));
        }
        if !(self.control_hz > 0.0) {
            return Err(Error::InvalidConfig("control_hz must be positive".into()));
        }
        Ok(())
    }

    /// Width of the flat model input.
    pub fn cond_dim(&self) -> usize {
        self.h_o * 4 + if self.use_keypoints { self.n_kp * KEYPOINT_DIM } else { 0 }
    }
}

/// Model input: normalized observation window, plus the keypoint vector when
/// keypoints are in use.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub obs_window: Vec<f32>,
    pub keypoints: Option<Vec<f32>>,
}

impl Conditioning {
    pub fn flatten(&self) -> Vec<f32> {
        let mut v = self.obs_window.clone();
        if let Some(k) = &self.keypoints {
            v.extend_from_slice(k);
        }
        v
    }
}

/// Builds the conditioning from the observation history (oldest first) and
/// the current keypoint buffer. Short histories are padded at the front with
/// the first observation.
pub fn build_conditioning(
    history: &[Observation],
    buffer: &KeypointBuffer,
    cfg: &ControllerConfig,
    kp_cfg: &KeypointConfig,
    norm: &NormStats,
) -> Conditioning {
    assert!(!history.is_empty(), "conditioning needs at least one observation");
    let pad = cfg.h_o.saturating_sub(history.len());
    let recent = &history[history.len().saturating_sub(cfg.h_o)..];
    let obs_window = std::iter::repeat_n(&history[0], pad)
        .chain(recent)
        .flat_map(|o| norm.normalize_obs(o))
        .map(|v| v as f32)
        .collect();
    let keypoints = cfg.use_keypoints.then(|| buffer.encode(kp_cfg, norm));
    Conditioning { obs_window, keypoints }
}

/// Observation history and keypoint memory of one running episode.
#[derive(Debug, Clone)]
pub struct EpisodeMemory {
    history: Vec<Observation>,
    keypoints: KeypointManager,
}

impl EpisodeMemory {
    pub fn new(kp_cfg: KeypointConfig) -> Self {
        Self {
            history: Vec::new(),
            keypoints: KeypointManager::new(kp_cfg),
        }
    }

    /// Records the observation of tick `t` and updates the keypoint buffer.
    pub fn push(&mut self, obs: Observation, t: u64) {
        self.history.push(obs);
        self.keypoints.update(&obs, t);
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn keypoints(&self) -> &KeypointManager {
        &self.keypoints
    }

    pub fn conditioning(&self, cfg: &ControllerConfig, norm: &NormStats) -> Conditioning {
        build_conditioning(
            &self.history,
            self.keypoints.buffer(),
            cfg,
            self.keypoints.config(),
            norm,
        )
    }
}

/// A trained denoiser with everything needed to turn its samples into targets.
#[derive(Debug, Clone)]
pub struct Policy<M> {
    pub model: M,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutTick {
    pub t: u64,
    pub obs: Observation,
    pub action: Vec2,
    pub kp_count: usize,
    /// Wall time of the sample call made at this tick, if any.
    pub inference_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub scene: Scene,
    pub ticks: Vec<RolloutTick>,
    pub keypoints: Vec<KeypointEvent>,
    pub success: bool,
    pub iterations: usize,
    /// Seconds per sample call, in call order.
    pub inference_times: Vec<f64>,
    pub final_position: Vec2,
}

impl RolloutRecord {
    pub fn final_distance(&self) -> f64 {
        self.final_position.distance(self.scene.goal)
    }
}

/// What the loop reports after every applied action.
#[derive(Debug, Clone, Copy)]
pub struct TickView<'a> {
    pub tick: &'a RolloutTick,
    pub state: &'a SimState,
    pub buffer: &'a KeypointBuffer,
    pub plan: &'a PlanSample,
    pub norm: &'a NormStats,
}

/// Checks that a policy, controller and keypoint configuration fit together.
pub fn check_compatible<M: EpsPredictor>(
    policy: &Policy<M>,
    cfg: &ControllerConfig,
    kp_cfg: &KeypointConfig,
) -> Result<(), Error> {
    cfg.validate()?;
    kp_cfg.validate()?;
    if cfg.use_keypoints && kp_cfg.n_kp != cfg.n_kp {
        return Err(Error::Mismatch(format!(
            "controller expects {} keypoints, keypoint manager keeps {}",
            cfg.n_kp, kp_cfg.n_kp
        )));
    }
    if policy.model.cond_dim() != cfg.cond_dim() {
        return Err(Error::Mismatch(format!(
            "model conditioning width {} does not match controller width {}",
            policy.model.cond_dim(),
            cfg.cond_dim()
        )));
    }
    if policy.model.plan_shape() != (cfg.h_p, 2) {
        return Err(Error::Mismatch(format!(
            "model plans {:?} but controller expects ({}, 2)",
            policy.model.plan_shape(),
            cfg.h_p
        )));
    }
    if policy.schedule.n_diff != policy.schedule.beta.len() {
        return Err(Error::Mismatch("noise schedule is inconsistent".into()));
    }
    Ok(())
}

pub fn run_episode<M: EpsPredictor>(
    scene: &Scene,
    policy: &Policy<M>,
    cfg: &ControllerConfig,
    kp_cfg: &KeypointConfig,
    sim_cfg: &SimConfig,
    rng: &mut impl Rng,
) -> Result<RolloutRecord, Error> {
    run_episode_with(scene, policy, cfg, kp_cfg, sim_cfg, rng, |_| {})
}

/// [`run_episode`] with a callback after every applied action.
pub fn run_episode_with<M: EpsPredictor>(
    scene: &Scene,
    policy: &Policy<M>,
    cfg: &ControllerConfig,
    kp_cfg: &KeypointConfig,
    sim_cfg: &SimConfig,
    rng: &mut impl Rng,
    mut on_tick: impl FnMut(TickView<'_>),
) -> Result<RolloutRecord, Error> {
    check_compatible(policy, cfg, kp_cfg)?;
    scene.validate()?;
    let mut state = SimState::at(scene.start);
    let mut memory = EpisodeMemory::new(*kp_cfg);
    memory.push(observe(&state), 0);
    let mut ticks = Vec::new();
    let mut inference_times = Vec::new();
    let mut previous: Option<PlanSample> = None;
    let mut success = state.position.distance(scene.goal) <= cfg.success_radius;

    while !success && ticks.len() < cfg.max_iters {
        let cond = memory.conditioning(cfg, &policy.norm).flatten();
        let warm = match (&previous, cfg.warmstart) {
            (Some(p), true) => Some(Warmstart {
                previous: p,
                executed: cfg.h_a,
            }),
            _ => None,
        };
        let started = Instant::now();
        let plan = sample(&policy.model, &cond, &policy.schedule, rng, warm, &policy.sampler)?;
        let elapsed = started.elapsed().as_secs_f64();
        inference_times.push(elapsed);

        for k in 0..cfg.h_a {
            if ticks.len() >= cfg.max_iters {
                break;
            }
            let obs = observe(&state);
            let target = policy.norm.denormalize_action(plan.row(k));
            state = step(&state, scene, target, sim_cfg);
            let t = ticks.len() as u64;
            memory.push(observe(&state), t + 1);
            let tick = RolloutTick {
                t,
                obs,
                action: target,
                kp_count: memory.keypoints().buffer().len(),
                inference_ms: (k == 0).then_some(elapsed * 1e3),
            };
            ticks.push(tick);
            on_tick(TickView {
                tick: &tick,
                state: &state,
                buffer: memory.keypoints().buffer(),
                plan: &plan,
                norm: &policy.norm,
            });
            if state.position.distance(scene.goal) <= cfg.success_radius {
                success = true;
                break;
            }
        }
        previous = Some(plan);
    }

    Ok(RolloutRecord {
        scene: scene.clone(),
        iterations: ticks.len(),
        ticks,
        keypoints: memory.keypoints().events().to_vec(),
        success,
        inference_times,
        final_position: state.position,
    })
}

/// One line of a rollout file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RolloutLine {
    Header {
        scene: Scene,
    },
    Tick {
        t: u64,
        obs: [f64; 4],
        action: [f64; 2],
        kp_count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inference_ms: Option<f64>,
    },
    Keypoint {
        t: u64,
        kp: [f64; 4],
    },
    Trailer {
        success: bool,
        iterations: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_position: Option<[f64; 2]>,
    },
}

pub fn write_rollout(path: &Path, record: &RolloutRecord) -> Result<(), Error> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut lines = vec![RolloutLine::Header {
        scene: record.scene.clone(),
    }];
    let mut events = record.keypoints.iter().peekable();
    let kp_line = |e: &KeypointEvent| RolloutLine::Keypoint {
        t: e.t,
        kp: [e.x, e.y, e.sin, e.cos],
    };
    for tick in &record.ticks {
        while let Some(e) = events.next_if(|e| e.t <= tick.t) {
            lines.push(kp_line(e));
        }
        lines.push(RolloutLine::Tick {
            t: tick.t,
            obs: tick.obs.to_array(),
            action: [tick.action.x, tick.action.y],
            kp_count: tick.kp_count,
            inference_ms: tick.inference_ms,
        });
    }
    lines.extend(events.map(kp_line));
    lines.push(RolloutLine::Trailer {
        success: record.success,
        iterations: record.iterations,
        final_position: Some([record.final_position.x, record.final_position.y]),
    });
    for line in lines {
        let text = serde_json::to_string(&line)?;
        writeln!(w, "{text}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rollout(path: &Path) -> Result<RolloutRecord, Error> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut scene = None;
    let mut ticks = Vec::new();
    let mut keypoints = Vec::new();
    let mut trailer = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if trailer.is_some() {
            return Err(err(n, "content after trailer".into()));
        }
        match serde_json::from_str::<RolloutLine>(&line).map_err(|e| err(n, e.to_string()))? {
            RolloutLine::Header { scene: s } => {
                if scene.is_some() {
                    return Err(err(n, "duplicate header".into()));
                }
                s.validate().map_err(|e| err(n, e.to_string()))?;
                scene = Some(s);
            }
            _ if scene.is_none() => return Err(err(n, "record before header".into())),
            RolloutLine::Tick {
                t,
                obs,
                action,
                kp_count,
                inference_ms,
            } => ticks.push(RolloutTick {
                t,
                obs: Observation::from_array(obs),
                action: Vec2::from(action),
                kp_count,
                inference_ms,
            }),
            RolloutLine::Keypoint { t, kp } => keypoints.push(KeypointEvent {
                t,
                x: kp[0],
                y: kp[1],
                sin: kp[2],
                cos: kp[3],
            }),
            RolloutLine::Trailer {
                success,
                iterations,
                final_position,
            } => {
                if ticks.is_empty() {
                    return Err(err(n, "trailer follows an empty trajectory".into()));
                }
                if iterations != ticks.len() {
                    return Err(err(
                        n,
                        format!("trailer reports {iterations} iterations but file has {} ticks", ticks.len()),
                    ));
                }
                trailer = Some((success, iterations, final_position, n));
            }
        }
    }
    let scene = scene.ok_or_else(|| err(1, "missing header".into()))?;
    let (success, iterations, final_position, _) = trailer.ok_or_else(|| err(ticks.len() + 1, "missing trailer".into()))?;
    let final_position = final_position
        .map(Vec2::from)
        .unwrap_or_else(|| ticks.last().map(|t: &RolloutTick| t.action).unwrap_or(scene.start));
    let inference_times = ticks.iter().filter_map(|t| t.inference_ms.map(|ms| ms / 1e3)).collect();
    Ok(RolloutRecord {
        scene,
        ticks,
        keypoints,
        success,
        iterations,
        inference_times,
        final_position,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::Keypoint;

    fn obs(x: f64) -> Observation {
        Observation {
            position: Vec2::new(x, 0.0),
            torque: Vec2::ZERO,
        }
    }

    #[test]
    fn short_history_repeats_first_observation() {
        let cfg = ControllerConfig::default();
        let kp = KeypointConfig::default();
        let c = build_conditioning(&[obs(0.5)], &KeypointBuffer::new(), &cfg, &kp, &NormStats::identity());
        assert_eq!(c.obs_window, vec![0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(c.keypoints.as_deref(), Some(&[0.0f32; 40][..]));
        assert_eq!(c.flatten().len(), cfg.cond_dim());
    }

    #[test]
    fn long_history_uses_last_window() {
        let cfg = ControllerConfig::default();
        let history: Vec<_> = (0..10).map(|i| obs(i as f64 / 10.0)).collect();
        let c = build_conditioning(
            &history,
            &KeypointBuffer::new(),
            &cfg,
            &KeypointConfig::default(),
            &NormStats::identity(),
        );
        let xs: Vec<f32> = c.obs_window.chunks(4).map(|o| o[0]).collect();
        assert_eq!(xs, vec![0.7, 0.8, 0.9]);
    }

    #[test]
    fn baseline_omits_keypoints() {
        let cfg = ControllerConfig::baseline(6);
        let c = build_conditioning(
            &[obs(0.5)],
            &KeypointBuffer::new(),
            &cfg,
            &KeypointConfig::default(),
            &NormStats::identity(),
        );
        assert!(c.keypoints.is_none());
        assert_eq!(c.flatten().len(), 24);
        assert_eq!(cfg.cond_dim(), 24);
    }

    #[test]
    fn success_radius_arithmetic() {
        let d = Vec2::new(1.17, 0.03).distance(Vec2::new(1.2, 0.0));
        assert!((d - 0.0424).abs() < 1e-4);
        assert!(d < ControllerConfig::default().success_radius);
    }

    #[test]
    fn rollout_file_round_trips_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let scene = crate::sim2d::make_eval_scene(crate::sim2d::Setup::Wall);
        let kp = Keypoint::new(Vec2::new(0.75, 0.0), std::f64::consts::PI);
        let record = RolloutRecord {
            scene: scene.clone(),
            ticks: (0..3)
                .map(|t| RolloutTick {
                    t,
                    obs: obs(0.7),
                    action: Vec2::new(0.75, 0.0),
                    kp_count: t as usize,
                    inference_ms: (t == 0).then_some(12.5),
                })
                .collect(),
            keypoints: vec![KeypointEvent::new(1, &kp)],
            success: false,
            iterations: 3,
            inference_times: vec![0.0125],
            final_position: Vec2::new(0.75, 0.0),
        };
        let path = dir.path().join("r.jsonl");
        write_rollout(&path, &record).unwrap();
        assert_eq!(read_rollout(&path).unwrap(), record);

        let header = serde_json::to_string(&RolloutLine::Header { scene }).unwrap();
        fs::write(&path, format!("{header}\n{{\"success\":false,\"iterations\":0}}\n")).unwrap();
        assert!(matches!(read_rollout(&path), Err(Error::Parse { line: 2, .. })));
    }
}
