//! Contact memory: flag contacts from the torque reading, keep a bounded FIFO of
//! sufficiently distinct contacts, and flatten it into a zero-padded vector for
//! policy conditioning.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::Error;
use crate::sim2d::{wrap_angle, Observation, Vec2};

/// Number of values stored per keypoint: `(x, y, sin, cos)`.
pub const KEYPOINT_DIM: usize = 4;

/// A remembered contact: end-effector position and contact-normal direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: Vec2,
    pub normal_sin: f64,
    pub normal_cos: f64,
}

impl Keypoint {
    pub fn new(position: Vec2, normal_angle: f64) -> Self {
        let (s, c) = normal_angle.sin_cos();
        Self {
            position,
            normal_sin: s,
            normal_cos: c,
        }
    }

    pub fn normal_angle(&self) -> f64 {
        self.normal_sin.atan2(self.normal_cos)
    }

    pub fn to_array(&self) -> [f64; KEYPOINT_DIM] {
        [
            self.position.x,
            self.position.y,
            self.normal_sin,
            self.normal_cos,
        ]
    }

    pub fn from_array(a: [f64; KEYPOINT_DIM]) -> Self {
        Self {
            position: Vec2::new(a[0], a[1]),
            normal_sin: a[2],
            normal_cos: a[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointConfig {
    /// Planar torque magnitude that flags a contact (N·m, strict).
    pub tau_min: f64,
    /// Minimum separation between recorded contacts (m).
    pub d_min: f64,
    /// Minimum normal difference for nearby contacts (rad).
    pub theta_min: f64,
    /// Buffer capacity.
    pub n_kp: usize,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        Self {
            tau_min: 1.0,
            d_min: 0.05,
            theta_min: 45f64.to_radians(),
            n_kp: 10,
        }
    }
}

impl KeypointConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = self.tau_min > 0.0 && self.d_min > 0.0 && self.theta_min > 0.0 && self.n_kp >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("keypoint config {self:?}")))
        }
    }

    pub fn encoded_len(&self) -> usize {
        self.n_kp * KEYPOINT_DIM
    }
}

/// A contact flagged by the torque threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactCandidate {
    pub position: Vec2,
    pub normal_angle: f64,
}

/// Flags a contact when the planar torque magnitude strictly exceeds `tau_min`.
///
/// The normal is recovered by undoing the simulator's torque model: the torque
/// is the blocked displacement turned a quarter counter-clockwise, and the
/// blocked displacement points into the obstacle.
pub fn detect_contact(obs: &Observation, cfg: &KeypointConfig) -> Option<ContactCandidate> {
    let magnitude = obs.torque.norm();
    if !(magnitude > cfg.tau_min) {
        return None;
    }
    let into_obstacle = obs.torque.rot_neg90();
    let normal = -into_obstacle;
    Some(ContactCandidate {
        position: obs.position,
        normal_angle: normal.angle(),
    })
}

/// Smallest absolute difference between two angles, in `[0, pi]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Last-`n_kp` contact memory, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointBuffer {
    entries: VecDeque<Keypoint>,
}

impl KeypointBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keypoint> + '_ {
        self.entries.iter()
    }

    pub fn to_vec(&self) -> Vec<Keypoint> {
        self.entries.iter().copied().collect()
    }

    /// Whether a candidate is distinct enough from every stored entry.
    pub fn accepts(&self, candidate: &ContactCandidate, cfg: &KeypointConfig) -> bool {
        self.entries.iter().all(|kp| {
            kp.position.distance(candidate.position) >= cfg.d_min
                || angular_distance(kp.normal_angle(), candidate.normal_angle) >= cfg.theta_min
        })
    }

    /// In-place insertion; returns the stored keypoint when accepted.
    pub fn offer(&mut self, candidate: &ContactCandidate, cfg: &KeypointConfig) -> Option<Keypoint> {
        if !self.accepts(candidate, cfg) {
            return None;
        }
        let kp = Keypoint::new(candidate.position, candidate.normal_angle);
        while self.entries.len() >= cfg.n_kp {
            self.entries.pop_front();
        }
        self.entries.push_back(kp);
        Some(kp)
    }

    /// Value-semantic variant of [`offer`](Self::offer).
    pub fn maybe_insert(&self, candidate: &ContactCandidate, cfg: &KeypointConfig) -> (Self, bool) {
        let mut next = self.clone();
        let inserted = next.offer(candidate, cfg).is_some();
        (next, inserted)
    }

    /// Checks the capacity and pairwise-distinctness invariants.
    pub fn check_invariants(&self, cfg: &KeypointConfig) -> bool {
        if self.entries.len() > cfg.n_kp {
            return false;
        }
        let v: Vec<&Keypoint> = self.entries.iter().collect();
        for (i, a) in v.iter().enumerate() {
            let unit = (a.normal_sin.powi(2) + a.normal_cos.powi(2) - 1.0).abs() <= 1e-9;
            if !unit {
                return false;
            }
            for b in &v[i + 1..] {
                if a.position.distance(b.position) < cfg.d_min
                    && angular_distance(a.normal_angle(), b.normal_angle()) < cfg.theta_min
                {
                    return false;
                }
            }
        }
        true
    }

    /// Flattens the buffer into `n_kp * 4` normalized values, oldest first,
    /// with unused slots left as exact zeros.
    pub fn encode(&self, cfg: &KeypointConfig, norm: &NormStats) -> Vec<f32> {
        let mut out = vec![0.0f32; cfg.encoded_len()];
        for (slot, kp) in self.entries.iter().take(cfg.n_kp).enumerate() {
            let values = norm.keypoint.normalize(&kp.to_array());
            for (d, v) in values.iter().enumerate() {
                out[slot * KEYPOINT_DIM + d] = *v as f32;
            }
        }
        out
    }
}

/// One accepted keypoint, as written to per-episode logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointEvent {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub sin: f64,
    pub cos: f64,
}

impl KeypointEvent {
    pub fn new(t: u64, kp: &Keypoint) -> Self {
        Self {
            t,
            x: kp.position.x,
            y: kp.position.y,
            sin: kp.normal_sin,
            cos: kp.normal_cos,
        }
    }

    pub fn keypoint(&self) -> Keypoint {
        Keypoint::from_array([self.x, self.y, self.sin, self.cos])
    }
}

/// Detection plus curation, fed one observation per control tick.
#[derive(Debug, Clone)]
pub struct KeypointManager {
    cfg: KeypointConfig,
    buffer: KeypointBuffer,
    events: Vec<KeypointEvent>,
}

impl KeypointManager {
    pub fn new(cfg: KeypointConfig) -> Self {
        Self {
            cfg,
            buffer: KeypointBuffer::new(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &KeypointConfig {
        &self.cfg
    }

    pub fn buffer(&self) -> &KeypointBuffer {
        &self.buffer
    }

    pub fn events(&self) -> &[KeypointEvent] {
        &self.events
    }

    /// Processes the observation taken at tick `t`.
    pub fn update(&mut self, obs: &Observation, t: u64) -> Option<Keypoint> {
        let candidate = detect_contact(obs, &self.cfg)?;
        let kp = self.buffer.offer(&candidate, &self.cfg)?;
        self.events.push(KeypointEvent::new(t, &kp));
        Some(kp)
    }

    /// Writes the event log as JSON lines.
    pub fn write_log(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
