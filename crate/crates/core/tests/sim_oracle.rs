//! Simulator contact geometry against a closed-form disc-vs-rectangle oracle.

use prodapt_core::keypoints::{detect_contact, KeypointConfig};
use prodapt_core::sim2d::{observe, step, Bounds, Obstacle, Scene, SimConfig, SimState, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closest point of an oriented rectangle to `p` (for `p` outside it),
/// computed in the rectangle's own frame by clamping.
fn oracle_closest(center: Vec2, half: Vec2, rot: f64, p: Vec2) -> (Vec2, f64) {
    let (s, c) = rot.sin_cos();
    let d = (p.x - center.x, p.y - center.y);
    let local = (c * d.0 + s * d.1, -s * d.0 + c * d.1);
    let clamped = (local.0.clamp(-half.x, half.x), local.1.clamp(-half.y, half.y));
    let world = Vec2::new(
        center.x + c * clamped.0 - s * clamped.1,
        center.y + s * clamped.0 + c * clamped.1,
    );
    let dist = ((local.0 - clamped.0).powi(2) + (local.1 - clamped.1).powi(2)).sqrt();
    (world, dist)
}

/// Distance between segment `a -> b` and the rectangle, zero when they cross.
fn oracle_segment_distance(center: Vec2, half: Vec2, rot: f64, a: Vec2, b: Vec2) -> f64 {
    let (s, c) = rot.sin_cos();
    let to_local = |p: Vec2| {
        let d = (p.x - center.x, p.y - center.y);
        (c * d.0 + s * d.1, -s * d.0 + c * d.1)
    };
    let (a, b) = (to_local(a), to_local(b));
    // Slab test for intersection.
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let mut hits = true;
    for (p, d, h) in [(a.0, b.0 - a.0, half.x), (a.1, b.1 - a.1, half.y)] {
        if d.abs() < 1e-15 {
            if p.abs() > h {
                hits = false;
            }
        } else {
            let (u, v) = ((-h - p) / d, (h - p) / d);
            t0 = t0.max(u.min(v));
            t1 = t1.min(u.max(v));
        }
    }
    if hits && t0 <= t1 {
        return 0.0;
    }
    let box_dist = |p: (f64, f64)| {
        let dx = (p.0.abs() - half.x).max(0.0);
        let dy = (p.1.abs() - half.y).max(0.0);
        (dx * dx + dy * dy).sqrt()
    };
    let seg_dist = |q: (f64, f64)| {
        let e = (b.0 - a.0, b.1 - a.1);
        let len2 = e.0 * e.0 + e.1 * e.1;
        let t = if len2 > 0.0 {
            (((q.0 - a.0) * e.0 + (q.1 - a.1) * e.1) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        ((a.0 + t * e.0 - q.0).powi(2) + (a.1 + t * e.1 - q.1).powi(2)).sqrt()
    };
    let corners = [(-half.x, -half.y), (half.x, -half.y), (half.x, half.y), (-half.x, half.y)];
    corners
        .iter()
        .map(|&q| seg_dist(q))
        .chain([box_dist(a), box_dist(b)])
        .fold(f64::INFINITY, f64::min)
}

struct Case {
    scene: Scene,
    center: Vec2,
    half: Vec2,
    rot: f64,
    start: Vec2,
    target: Vec2,
}

fn random_case(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> Case {
    let center = Vec2::new(0.8, 0.0);
    let half = Vec2::new(rng.random_range(0.02..0.2), rng.random_range(0.02..0.2));
    let rot = rng.random_range(-3.1..3.1);
    let obstacle = Obstacle::new(center, half, rot).unwrap();
    let scene = Scene {
        obstacles: vec![obstacle],
        start: Vec2::new(0.4, 0.0),
        goal: Vec2::new(1.2, 0.0),
        bounds: Bounds::default(),
    };
    let start = loop {
        let p = Vec2::new(rng.random_range(0.45..1.15), rng.random_range(-0.35..0.35));
        let (_, d) = oracle_closest(center, half, rot, p);
        if d >= cfg.ee_radius && d < cfg.ee_radius + 0.08 {
            break p;
        }
    };
    // Aim roughly at the obstacle most of the time so contacts are common.
    let aim = if rng.random_bool(0.8) {
        (center - start).angle() + rng.random_range(-1.2..1.2)
    } else {
        rng.random_range(-3.14..3.14)
    };
    let target = start + Vec2::from_angle(aim) * rng.random_range(0.0..0.1);
    Case {
        scene,
        center,
        half,
        rot,
        start,
        target,
    }
}

#[test]
fn contacts_match_closed_form_oracle() {
    let cfg = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut contacts, mut free, mut slid_off) = (0, 0, 0);
    for i in 0..10_000 {
        let case = random_case(&mut rng, &cfg);
        let s0 = SimState::at(case.start);
        let s1 = step(&s0, &case.scene, case.target, &cfg);

        // Step bound and non-penetration.
        assert!(s1.position.distance(case.start) <= cfg.max_step_length + cfg.penetration_tol, "case {i}: moved {} from {:?} toward {:?}", s1.position.distance(case.start), case.start, case.target);
        let (_, d) = oracle_closest(case.center, case.half, case.rot, s1.position);
        assert!(d >= cfg.ee_radius - cfg.penetration_tol, "case {i}: penetration {d}");
        // Torque/contact coupling.
        assert_eq!(s1.contact.is_some(), s1.torque != Vec2::ZERO, "case {i}");

        let commanded = {
            let c = case.target - case.start;
            if c.norm() > cfg.max_step_length {
                case.start + c * (cfg.max_step_length / c.norm())
            } else {
                case.target
            }
        };
        let swept = oracle_segment_distance(case.center, case.half, case.rot, case.start, commanded);
        if swept > cfg.ee_radius + 1e-9 {
            // The swept disc misses: free motion, no contact.
            assert!(s1.contact.is_none(), "case {i}: spurious contact");
            assert!(s1.position.distance(commanded) < 1e-12, "case {i}");
            free += 1;
        }
        if let Some(c) = s1.contact {
            let (point, dist) = oracle_closest(case.center, case.half, case.rot, s1.position);
            assert!(c.point.distance(point) < 1e-6, "case {i}: contact point");
            // A disc blocked early in the step can slide past a corner and end
            // it slightly clear; the reported contact is still the nearest point.
            assert!(dist > cfg.ee_radius - 1e-6, "case {i}: penetrating ({dist})");
            assert!(dist < cfg.ee_radius + cfg.max_step_length, "case {i}: far from surface ({dist})");
            if dist > cfg.ee_radius + 1e-6 {
                slid_off += 1;
            }
            let normal = (s1.position - point) / dist;
            assert!(c.normal.distance(normal) < 1e-6, "case {i}: contact normal");
            assert!((c.normal.norm() - 1.0).abs() < 1e-9);
            contacts += 1;
        }
    }
    assert!(contacts > 2000 && free > 1000, "contacts {contacts}, free {free}");
    assert!(slid_off * 50 < contacts, "{slid_off} of {contacts} contacts ended clear of the surface");
}

#[test]
fn steps_are_bit_deterministic() {
    let cfg = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let case = random_case(&mut rng, &cfg);
        let s0 = SimState::at(case.start);
        assert_eq!(step(&s0, &case.scene, case.target, &cfg), step(&s0, &case.scene, case.target, &cfg));
    }
}

#[test]
fn detection_recovers_the_true_normal() {
    // Head-on pushes into a face: single contact, normal equals the face normal.
    let cfg = SimConfig::default();
    let kp = KeypointConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let rot: f64 = rng.random_range(-3.1..3.1);
        let half = Vec2::new(0.1, 0.1);
        let obstacle = Obstacle::new(Vec2::new(0.8, 0.0), half, rot).unwrap();
        let scene = Scene {
            obstacles: vec![obstacle],
            start: Vec2::new(0.4, 0.0),
            goal: Vec2::new(1.2, 0.0),
            bounds: Bounds::default(),
        };
        let face = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2 + rot;
        let n = Vec2::from_angle(face);
        let along = n.rot90() * rng.random_range(-0.05..0.05);
        let start = Vec2::new(0.8, 0.0) + n * (0.1 + cfg.ee_radius + 0.01) + along;
        let target = start - n * 0.05;
        let s1 = step(&SimState::at(start), &scene, target, &cfg);
        let c = detect_contact(&observe(&s1), &kp).expect("blocked push is flagged");
        let diff = prodapt_core::keypoints::angular_distance(c.normal_angle, n.angle());
        assert!(diff < 1e-6, "normal off by {diff}");
    }
}
