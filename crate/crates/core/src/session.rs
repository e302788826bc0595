//! Live session protocol and the teleoperation state machine behind it.
//!
//! Messages are JSON objects tagged by `type`. The transport (a websocket in
//! the server) only moves them; everything here is synchronous and owns its
//! simulator, so one session never sees another's state.

use serde::{Deserialize, Serialize};

use crate::controller::TickView;
use crate::data::{Demonstration, Source, Tick};
use crate::error::Error;
use crate::keypoints::{KeypointBuffer, KeypointConfig, KeypointManager};
use crate::sim2d::{make_eval_scene, make_training_scene, observe, step, Scene, Setup, SimConfig, SimState, Vec2};

/// Control rate shared by teleoperation and live rollouts.
pub const TICK_HZ: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Target {
        x: f64,
        y: f64,
    },
    Start {
        #[serde(default)]
        setup: Option<Setup>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    /// Sent once after `start` so clients can map canvas coordinates.
    Scene { scene: Scene },
    Tick {
        t: u64,
        pos: [f64; 2],
        torque: [f64; 2],
        keypoints: Vec<[f64; 4]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        plan: Option<Vec<[f64; 2]>>,
    },
    End {
        success: bool,
        iterations: usize,
    },
    /// Malformed or out-of-place client message; the session stays open.
    Error { message: String },
}

impl ServerMessage {
    pub fn tick(t: u64, state: &SimState, buffer: &KeypointBuffer, plan: Option<Vec<[f64; 2]>>) -> Self {
        ServerMessage::Tick {
            t,
            pos: [state.position.x, state.position.y],
            torque: [state.torque.x, state.torque.y],
            keypoints: buffer.iter().map(|k| k.to_array()).collect(),
            plan,
        }
    }

    /// Tick message for one step of a policy rollout, with the current plan in meters.
    pub fn from_view(view: &TickView<'_>) -> Self {
        let plan = (0..view.plan.horizon)
            .map(|k| {
                let p = view.norm.denormalize_action(view.plan.row(k));
                [p.x, p.y]
            })
            .collect();
        Self::tick(view.tick.t + 1, view.state, view.buffer, Some(plan))
    }
}

/// Scene for a `start` message: a named setup, else a seeded training layout.
pub fn scene_for(setup: Option<Setup>, seed: Option<u64>) -> Scene {
    match setup {
        Some(s) => make_eval_scene(s),
        None => make_training_scene(seed.unwrap_or(0)),
    }
}

/// Outcome of one teleoperation tick.
#[derive(Debug, Clone)]
pub enum TeleopStep {
    Running(ServerMessage),
    /// Goal reached: the final tick, the end message and the finished demonstration.
    Finished {
        tick: ServerMessage,
        end: ServerMessage,
        demo: Demonstration,
    },
    /// Tick budget exhausted; the partial demonstration is discarded.
    TimedOut { tick: ServerMessage, end: ServerMessage },
}

/// One teleoperated episode. Records exactly what the scripted expert
/// records, so the result is interchangeable with collected data.
#[derive(Debug, Clone)]
pub struct TeleopSession {
    scene: Scene,
    seed: Option<u64>,
    state: SimState,
    manager: KeypointManager,
    ticks: Vec<Tick>,
    target: Vec2,
    sim_cfg: SimConfig,
    success_radius: f64,
    max_ticks: usize,
}

impl TeleopSession {
    pub fn new(scene: Scene, seed: Option<u64>, kp_cfg: KeypointConfig, sim_cfg: SimConfig) -> Self {
        let state = SimState::at(scene.start);
        let mut manager = KeypointManager::new(kp_cfg);
        manager.update(&observe(&state), 0);
        Self {
            target: scene.start,
            scene,
            seed,
            state,
            manager,
            ticks: Vec::new(),
            sim_cfg,
            success_radius: 0.05,
            max_ticks: 1000,
        }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn iterations(&self) -> usize {
        self.ticks.len()
    }

    /// Sets the commanded target, clamped to the scene bounds.
    pub fn set_target(&mut self, x: f64, y: f64) -> Result<(), Error> {
        let p = Vec2::new(x, y);
        if !p.is_finite() {
            return Err(Error::InvalidConfig("target must be finite".into()));
        }
        self.target = self.scene.bounds.clamp(p);
        Ok(())
    }

    /// Advances the simulator by one control tick toward the latest target.
    pub fn tick(&mut self) -> TeleopStep {
        let t = self.ticks.len() as u64;
        let obs = observe(&self.state);
        self.ticks.push(Tick {
            t,
            obs,
            action: self.target,
        });
        self.state = step(&self.state, &self.scene, self.target, &self.sim_cfg);
        self.manager.update(&observe(&self.state), t + 1);
        let msg = ServerMessage::tick(t + 1, &self.state, self.manager.buffer(), None);
        let end = |success, iterations| ServerMessage::End { success, iterations };
        if self.state.position.distance(self.scene.goal) <= self.success_radius {
            TeleopStep::Finished {
                tick: msg,
                end: end(true, self.ticks.len()),
                demo: Demonstration {
                    scene: self.scene.clone(),
                    ticks: std::mem::take(&mut self.ticks),
                    keypoints: self.manager.events().to_vec(),
                    source: Source::Teleop,
                    seed: self.seed,
                },
            }
        } else if self.ticks.len() >= self.max_ticks {
            TeleopStep::TimedOut {
                tick: msg,
                end: end(false, self.ticks.len()),
            }
        } else {
            TeleopStep::Running(msg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_use_the_wire_format() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"target","x":0.5,"y":-0.1}"#).unwrap();
        assert_eq!(m, ClientMessage::Target { x: 0.5, y: -0.1 });
        let m: ClientMessage = serde_json::from_str(r#"{"type":"start","setup":"wall"}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::Start {
                setup: Some(Setup::Wall),
                seed: None
            }
        );
        let end = serde_json::to_value(ServerMessage::End {
            success: true,
            iterations: 12,
        })
        .unwrap();
        assert_eq!(end, serde_json::json!({"type": "end", "success": true, "iterations": 12}));
    }

    #[test]
    fn driving_to_the_goal_yields_a_valid_demonstration() {
        let scene = scene_for(Some(Setup::Clear), None);
        let goal = scene.goal;
        let mut s = TeleopSession::new(scene, None, KeypointConfig::default(), SimConfig::default());
        s.set_target(goal.x, goal.y).unwrap();
        let demo = loop {
            match s.tick() {
                TeleopStep::Running(_) => {}
                TeleopStep::Finished { demo, .. } => break demo,
                TeleopStep::TimedOut { .. } => panic!("clear scene should be reachable"),
            }
        };
        demo.validate().unwrap();
        assert_eq!(demo.source, Source::Teleop);
        assert!(demo.ticks.iter().enumerate().all(|(i, t)| t.t == i as u64));
    }
}
