//! Blind scripted demonstrator.
//!
//! The expert sees only what the policy sees: position and torque. It heads
//! straight for the goal; when blocked it commits to a side at random and
//! follows the obstacle boundary, pressing into it so that the contact stays
//! above the keypoint torque threshold. If following makes no progress toward
//! the goal for too long it turns around and follows the other way.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Demonstration, Source, Tick};
use crate::keypoints::{KeypointConfig, KeypointManager};
use crate::sim2d::{observe, step, Scene, SimConfig, SimState, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Length of each commanded waypoint offset.
    pub step_length: f64,
    /// Angle between the commanded direction and the wall tangent while following.
    pub press_angle: f64,
    /// Commanded following distance without getting closer to the goal before turning round.
    pub no_progress_limit: f64,
    /// Distance improvement that counts as progress.
    pub progress_tolerance: f64,
    /// Ticks without contact after which wall-following is abandoned.
    pub max_lost_ticks: u32,
    /// Following stops once the goal direction points away from the wall by this much.
    pub leave_margin: f64,
    pub success_radius: f64,
    pub max_ticks: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            step_length: 0.05,
            press_angle: 45f64.to_radians(),
            no_progress_limit: 0.35,
            progress_tolerance: 0.005,
            max_lost_ticks: 3,
            leave_margin: 0.05,
            success_radius: 0.05,
            max_ticks: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Follow {
    normal: Vec2,
    lost: u32,
    /// Goal distance when the boundary was first hit.
    hit_distance: f64,
}

/// Contact normal (pointing out of the obstacle) recovered from a torque reading.
fn normal_from_torque(torque: Vec2) -> Option<Vec2> {
    if torque.norm() > 1e-9 {
        (-torque.rot_neg90()).normalized()
    } else {
        None
    }
}

/// Runs the expert on `scene`. Returns `None` when the goal is not reached
/// within the tick budget; such demonstrations are discarded.
pub fn scripted_expert(
    scene: &Scene,
    rng: &mut impl Rng,
    cfg: &ExpertConfig,
    sim_cfg: &SimConfig,
    kp_cfg: &KeypointConfig,
) -> Option<Demonstration> {
    let mut state = SimState::at(scene.start);
    let mut manager = KeypointManager::new(*kp_cfg);
    let mut ticks = Vec::new();
    // +1 follows the boundary counter-clockwise, -1 clockwise.
    let mut side: Option<f64> = None;
    let mut follow: Option<Follow> = None;
    let mut best = f64::INFINITY;
    let mut stalled = 0.0;
    let mut limit = cfg.no_progress_limit;

    for t in 0..cfg.max_ticks as u64 {
        let obs = observe(&state);
        manager.update(&obs, t);
        let p = obs.position;
        let to_goal = scene.goal - p;
        let dist = to_goal.norm();
        if dist <= cfg.success_radius {
            return Some(Demonstration {
                scene: scene.clone(),
                ticks,
                keypoints: manager.events().to_vec(),
                source: Source::Scripted,
                seed: None,
            });
        }
        let goal_dir = to_goal / dist;
        let contact = normal_from_torque(obs.torque);

        follow = match (follow, contact) {
            (None, Some(n)) if goal_dir.dot(n) < 0.0 => {
                side.get_or_insert_with(|| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
                Some(Follow {
                    normal: n,
                    lost: 0,
                    hit_distance: dist,
                })
            }
            // Leave once the goal lies on the free side of the wall and we are
            // closer than where we hit it; leaving earlier re-enters concave
            // corners forever.
            (Some(f), Some(n)) if goal_dir.dot(n) > cfg.leave_margin && dist < f.hit_distance => None,
            (Some(f), Some(n)) => Some(Follow { normal: n, lost: 0, ..f }),
            (Some(f), None) if f.lost + 1 > cfg.max_lost_ticks => None,
            (Some(f), None) => Some(Follow {
                lost: f.lost + 1,
                ..f
            }),
            (None, _) => None,
        };
        // Stalling is measured across repeated leave/re-contact cycles: only
        // getting closer to the goal resets it.
        if dist < best - cfg.progress_tolerance {
            best = dist;
            stalled = 0.0;
            limit = cfg.no_progress_limit;
        } else if let Some(prev) = ticks.last().map(|t: &Tick| t.obs.position) {
            // Distance actually moved; a blocked tick counts as a full step so
            // that being wedged in a corner also runs the budget down.
            let moved = p.distance(prev);
            stalled += if moved < 0.1 * cfg.step_length { cfg.step_length } else { moved };
        }

        let target = match follow {
            Some(f) => {
                let s = side.get_or_insert(1.0);
                if stalled > limit {
                    *s = -*s;
                    stalled = 0.0;
                    limit *= 2.0;
                }
                let tangent = f.normal.rot90() * *s;
                let dir = tangent * cfg.press_angle.cos() - f.normal * cfg.press_angle.sin();
                p + dir * cfg.step_length
            }
            None => p + goal_dir * cfg.step_length.min(dist),
        };
        let target = scene.bounds.clamp(target);
        ticks.push(Tick { t, obs, action: target });
        state = step(&state, scene, target, sim_cfg);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::{make_eval_scene, make_training_scene, Setup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(scene: &Scene, seed: u64) -> Option<Demonstration> {
        scripted_expert(
            scene,
            &mut ChaCha8Rng::seed_from_u64(seed),
            &ExpertConfig::default(),
            &SimConfig::default(),
            &KeypointConfig::default(),
        )
    }

    #[test]
    fn clear_scene_is_nearly_straight() {
        let scene = make_eval_scene(Setup::Clear);
        let demo = run(&scene, 0).unwrap();
        // Geometric oracle: straight-line distance to the success disc over the step cap.
        let expected = ((scene.goal - scene.start).norm() - 0.05) / 0.05;
        let n = demo.ticks.len() as f64;
        assert!((n - expected).abs() <= 0.1 * expected + 1.0, "{n} vs {expected}");
        assert!(demo.ticks.iter().all(|t| t.obs.position.y.abs() < 1e-12));
    }

    #[test]
    fn kept_demos_end_at_the_goal() {
        let sim = SimConfig::default();
        for seed in 0..40 {
            let scene = make_training_scene(seed);
            if let Some(demo) = run(&scene, seed) {
                let last = demo.ticks.last().unwrap();
                let end = step(
                    &SimState {
                        position: last.obs.position,
                        torque: last.obs.torque,
                        contact: None,
                        step_index: last.t,
                    },
                    &scene,
                    last.action,
                    &sim,
                );
                assert!(end.position.distance(scene.goal) <= 0.05);
            }
        }
    }

    #[test]
    fn wall_is_passed_on_both_sides() {
        let scene = make_eval_scene(Setup::Wall);
        let (mut above, mut below) = (0, 0);
        for seed in 0..100 {
            let demo = run(&scene, seed).expect("wall is passable");
            let extreme = demo
                .ticks
                .iter()
                .map(|t| t.obs.position.y)
                .fold(0.0f64, |m, y| if y.abs() > m.abs() { y } else { m });
            if extreme > 0.0 {
                above += 1;
            } else {
                below += 1;
            }
        }
        assert!(above >= 30 && below >= 30, "above {above}, below {below}");
    }
}
