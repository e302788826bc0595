//! Planar kinematic simulator: a position-controlled disc end-effector among
//! fixed oriented rectangles, with an emulated planar wrist-torque reading.
//!
//! The simulator is a set of pure functions over value-semantic state. A step
//! moves the end-effector toward a commanded target (capped per tick), resolves
//! penetration by projecting the disc back onto obstacle surfaces, and reports a
//! torque proportional to the commanded motion that the obstacles absorbed.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Planar vector in meters. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self / n)
    }

    /// Counter-clockwise quarter turn.
    pub fn rot90(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    /// Clockwise quarter turn.
    pub fn rot_neg90(self) -> Vec2 {
        Vec2::new(self.y, -self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, s: f64) -> Vec2 {
        Vec2::new(self.x / s, self.y / s)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// Closest-point query result between a point and an obstacle boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceQuery {
    /// Closest point on the obstacle boundary.
    pub point: Vec2,
    /// Outward unit normal at `point`, pointing from the obstacle toward the query.
    pub normal: Vec2,
    /// Distance from the query to the boundary; negative inside the obstacle.
    pub signed_distance: f64,
}

/// Rigid oriented rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObstacleRecord", into = "ObstacleRecord")]
pub struct Obstacle {
    pub center: Vec2,
    pub half_extents: Vec2,
    pub rotation: f64,
}

#[derive(Serialize, Deserialize)]
struct ObstacleRecord {
    cx: f64,
    cy: f64,
    hx: f64,
    hy: f64,
    rot: f64,
}

impl TryFrom<ObstacleRecord> for Obstacle {
    type Error = Error;
    fn try_from(r: ObstacleRecord) -> Result<Self, Error> {
        Obstacle::new(Vec2::new(r.cx, r.cy), Vec2::new(r.hx, r.hy), r.rot)
    }
}

impl From<Obstacle> for ObstacleRecord {
    fn from(o: Obstacle) -> Self {
        ObstacleRecord {
            cx: o.center.x,
            cy: o.center.y,
            hx: o.half_extents.x,
            hy: o.half_extents.y,
            rot: o.rotation,
        }
    }
}

impl Obstacle {
    /// Builds an obstacle; the rotation is wrapped into `[-pi, pi)`.
    pub fn new(center: Vec2, half_extents: Vec2, rotation: f64) -> Result<Self, Error> {
        if !(half_extents.x > 0.0 && half_extents.y > 0.0) {
            return Err(Error::InvalidScene(format!(
                "obstacle half extents must be positive, got ({}, {})",
                half_extents.x, half_extents.y
            )));
        }
        if !center.is_finite() || !half_extents.is_finite() || !rotation.is_finite() {
            return Err(Error::InvalidScene("obstacle has non-finite fields".into()));
        }
        Ok(Self {
            center,
            half_extents,
            rotation: wrap_angle(rotation),
        })
    }

    /// Square obstacle with the given side length.
    pub fn square(center: Vec2, side: f64, rotation: f64) -> Result<Self, Error> {
        Self::new(center, Vec2::new(side / 2.0, side / 2.0), rotation)
    }

    /// Thin wall segment between two endpoints.
    pub fn segment(a: Vec2, b: Vec2, thickness: f64) -> Result<Self, Error> {
        let d = b - a;
        Self::new(
            (a + b) * 0.5,
            Vec2::new(d.norm() / 2.0, thickness / 2.0),
            d.angle(),
        )
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let ax = Vec2::from_angle(self.rotation) * self.half_extents.x;
        let ay = Vec2::from_angle(self.rotation).rot90() * self.half_extents.y;
        let c = self.center;
        [c - ax - ay, c + ax - ay, c + ax + ay, c - ax + ay]
    }

    /// Closest point on the boundary, walking the four edges as segments.
    pub fn surface_query(&self, p: Vec2) -> SurfaceQuery {
        let corners = self.corners();
        let mut inside = true;
        let mut best: Option<(f64, Vec2, Vec2)> = None;
        for i in 0..4 {
            let a = corners[i];
            let b = corners[(i + 1) % 4];
            let edge = b - a;
            // Counter-clockwise winding: outward normal is the clockwise turn.
            let outward = edge.rot_neg90() / edge.norm();
            if (p - a).dot(outward) > 0.0 {
                inside = false;
            }
            let t = ((p - a).dot(edge) / edge.norm_sq()).clamp(0.0, 1.0);
            let q = a + edge * t;
            let d = p.distance(q);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, q, outward));
            }
        }
        let (dist, point, edge_normal) = best.expect("rectangle has four edges");
        if inside {
            SurfaceQuery {
                point,
                normal: edge_normal,
                signed_distance: -dist,
            }
        } else {
            let normal = (p - point).normalized().unwrap_or(edge_normal);
            SurfaceQuery {
                point,
                normal,
                signed_distance: dist,
            }
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.surface_query(p).signed_distance < 0.0
    }
}

/// Axis-aligned workspace rectangle. Serialized as `[xmin, ymin, xmax, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self {
            min: Vec2::new(xmin, ymin),
            max: Vec2::new(xmax, ymax),
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::new(0.2, -0.6, 1.4, 0.6)
    }
}

impl From<[f64; 4]> for Bounds {
    fn from(b: [f64; 4]) -> Self {
        Bounds::new(b[0], b[1], b[2], b[3])
    }
}

impl From<Bounds> for [f64; 4] {
    fn from(b: Bounds) -> Self {
        [b.min.x, b.min.y, b.max.x, b.max.y]
    }
}

/// Obstacles plus start and goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub obstacles: Vec<Obstacle>,
    pub start: Vec2,
    pub goal: Vec2,
    pub bounds: Bounds,
}

impl Scene {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.bounds.max.x > self.bounds.min.x && self.bounds.max.y > self.bounds.min.y) {
            return Err(Error::InvalidScene("empty bounds".into()));
        }
        if !self.bounds.contains(self.start) {
            return Err(Error::InvalidScene("start outside bounds".into()));
        }
        if !self.bounds.contains(self.goal) {
            return Err(Error::InvalidScene("goal outside bounds".into()));
        }
        if self.obstacles.iter().any(|o| o.contains(self.start)) {
            return Err(Error::InvalidScene("start inside an obstacle".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    /// Minimum clearance between a disc centre and every obstacle.
    pub fn clearance(&self, p: Vec2) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.surface_query(p).signed_distance)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub max_step_length: f64,
    pub ee_radius: f64,
    /// N·m of emulated torque per meter of blocked commanded motion.
    pub contact_stiffness: f64,
    pub penetration_tol: f64,
    pub projection_passes: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            max_step_length: 0.05,
            ee_radius: 0.025,
            contact_stiffness: 40.0,
            penetration_tol: 1e-6,
            projection_passes: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub point: Vec2,
    pub normal: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub position: Vec2,
    pub torque: Vec2,
    pub contact: Option<Contact>,
    pub step_index: u64,
}

impl SimState {
    pub fn at(position: Vec2) -> Self {
        Self {
            position,
            torque: Vec2::ZERO,
            contact: None,
            step_index: 0,
        }
    }
}

/// Proprioceptive reading: end-effector position and planar torque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub position: Vec2,
    pub torque: Vec2,
}

impl Observation {
    pub fn to_array(self) -> [f64; 4] {
        [self.position.x, self.position.y, self.torque.x, self.torque.y]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            position: Vec2::new(a[0], a[1]),
            torque: Vec2::new(a[2], a[3]),
        }
    }
}

/// Emulated wrist torque for a blocked displacement (pointing into the obstacle).
pub fn torque_from_blocked(blocked: Vec2, stiffness: f64) -> Vec2 {
    blocked.rot90() * stiffness
}

/// Advances the simulator by one control tick.
pub fn step(state: &SimState, scene: &Scene, target: Vec2, cfg: &SimConfig) -> SimState {
    let mut pos = state.position;
    let next_index = state.step_index + 1;
    let idle = SimState {
        position: pos,
        torque: Vec2::ZERO,
        contact: None,
        step_index: next_index,
    };
    if !target.is_finite() {
        return idle;
    }
    let mut command = target - pos;
    let len = command.norm();
    if !(len > 0.0) {
        return idle;
    }
    if len > cfg.max_step_length {
        command = command * (cfg.max_step_length / len);
    }

    // Substeps no longer than half the disc radius keep every projection on the
    // entry side of the obstacle it is resolving.
    let substep_cap = 0.5 * cfg.ee_radius;
    let substeps = (command.norm() / substep_cap).ceil().max(1.0) as usize;
    let delta = command / substeps as f64;

    let mut correction = Vec2::ZERO;
    let mut depth = vec![0.0_f64; scene.obstacles.len()];
    for _ in 0..substeps {
        let prev = pos;
        let commanded = scene.bounds.clamp(prev + delta);
        let mut trial = commanded;
        let mut sub_correction = Vec2::ZERO;
        let mut sub_depth = vec![0.0_f64; scene.obstacles.len()];
        for _ in 0..cfg.projection_passes.max(1) {
            let mut moved = false;
            for (k, obstacle) in scene.obstacles.iter().enumerate() {
                let q = obstacle.surface_query(trial);
                let pen = cfg.ee_radius - q.signed_distance;
                if pen > 0.0 {
                    trial += q.normal * pen;
                    sub_correction += q.normal * pen;
                    sub_depth[k] = sub_depth[k].max(pen);
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        let residual = cfg.ee_radius - scene.clearance(trial);
        if residual > cfg.penetration_tol {
            // Unresolved wedge: the whole substep is blocked.
            trial = prev;
            sub_correction = prev - commanded;
        }
        for (d, s) in depth.iter_mut().zip(&sub_depth) {
            *d = d.max(*s);
        }
        correction += sub_correction;
        pos = trial;
    }

    pos = enforce_step_bound(state.position, pos, scene, cfg);

    let blocked = -correction;
    let torque = torque_from_blocked(blocked, cfg.contact_stiffness);
    let contact = if torque.norm() > 0.0 {
        deepest_contact(scene, pos, &depth, cfg)
    } else {
        None
    };
    SimState {
        position: pos,
        torque: if contact.is_some() { torque } else { Vec2::ZERO },
        contact,
        step_index: next_index,
    }
}

/// Projecting around a rounded corner can lengthen the step slightly past the
/// cap. Alternate pulling back onto the cap circle and pushing out of the
/// obstacles; the overshoot shrinks geometrically, so a few rounds suffice.
fn enforce_step_bound(start: Vec2, mut pos: Vec2, scene: &Scene, cfg: &SimConfig) -> Vec2 {
    let fits = |p: Vec2| {
        p.distance(start) <= cfg.max_step_length + cfg.penetration_tol
            && cfg.ee_radius - scene.clearance(p) <= cfg.penetration_tol
    };
    for _ in 0..16 {
        if fits(pos) {
            return pos;
        }
        let d = pos - start;
        let len = d.norm();
        if len > cfg.max_step_length {
            pos = start + d * (cfg.max_step_length / len);
        }
        for obstacle in &scene.obstacles {
            let q = obstacle.surface_query(pos);
            let pen = cfg.ee_radius - q.signed_distance;
            if pen > 0.0 {
                pos += q.normal * pen;
            }
        }
    }
    if fits(pos) {
        pos
    } else {
        start
    }
}

fn deepest_contact(scene: &Scene, pos: Vec2, depth: &[f64], cfg: &SimConfig) -> Option<Contact> {
    let touching = |k: usize| {
        scene.obstacles[k].surface_query(pos).signed_distance <= cfg.ee_radius + 1e-6
    };
    let pick = |only_touching: bool| {
        (0..scene.obstacles.len())
            .filter(|&k| depth[k] > 0.0 && (!only_touching || touching(k)))
            .max_by(|&a, &b| depth[a].total_cmp(&depth[b]))
    };
    let k = pick(true).or_else(|| pick(false))?;
    let q = scene.obstacles[k].surface_query(pos);
    Some(Contact {
        point: q.point,
        normal: q.normal,
    })
}

/// Proprioceptive projection of the simulator state.
pub fn observe(state: &SimState) -> Observation {
    Observation {
        position: state.position,
        torque: state.torque,
    }
}

pub const TRAINING_START: Vec2 = Vec2::new(0.4, 0.0);
pub const EVAL_START: Vec2 = Vec2::new(0.7, 0.0);
pub const GOAL: Vec2 = Vec2::new(1.2, 0.0);
pub const CUBE_SIDE: f64 = 0.15;
/// Region from which random obstacle centres are drawn: `[xmin, ymin, xmax, ymax]`.
pub const OBSTACLE_REGION: Bounds = Bounds::new(0.55, -0.3, 1.0, 0.3);

/// Randomized training scene: one to three rotated cubes.
pub fn make_training_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=3);
    let obstacles = (0..count)
        .map(|_| {
            let cx = rng.random_range(OBSTACLE_REGION.min.x..=OBSTACLE_REGION.max.x);
            let cy = rng.random_range(OBSTACLE_REGION.min.y..=OBSTACLE_REGION.max.y);
            let rot = rng.random_range(0.0..FRAC_PI_2);
            Obstacle::square(Vec2::new(cx, cy), CUBE_SIDE, rot).expect("valid cube")
        })
        .collect();
    Scene {
        obstacles,
        start: TRAINING_START,
        goal: GOAL,
        bounds: Bounds::default(),
    }
}

/// Fixed evaluation layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Clear,
    Wall,
    Bucket,
    Elbow,
}

impl Setup {
    pub const ALL: [Setup; 4] = [Setup::Clear, Setup::Wall, Setup::Bucket, Setup::Elbow];

    pub fn name(self) -> &'static str {
        match self {
            Setup::Clear => "clear",
            Setup::Wall => "wall",
            Setup::Bucket => "bucket",
            Setup::Elbow => "elbow",
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "clear" => Ok(Setup::Clear),
            "wall" => Ok(Setup::Wall),
            "bucket" => Ok(Setup::Bucket),
            "elbow" => Ok(Setup::Elbow),
            other => Err(Error::InvalidConfig(format!("unknown setup '{other}'"))),
        }
    }
}

pub const WALL_LENGTH: f64 = 0.45;
pub const SLANT_LENGTH: f64 = 0.225;
pub const ELBOW_WALL_THICKNESS: f64 = 0.05;

pub fn make_eval_scene(setup: Setup) -> Scene {
    let obstacles = match setup {
        Setup::Clear => Vec::new(),
        // Long wall across the start-goal line, one cube deep.
        Setup::Wall => vec![Obstacle::new(
            Vec2::new(0.85, 0.0),
            Vec2::new(CUBE_SIDE / 2.0, WALL_LENGTH / 2.0),
            0.0,
        )
        .expect("valid wall")],
        // U-shaped pocket opening toward the start.
        Setup::Bucket => vec![
            Obstacle::square(Vec2::new(0.925, 0.0), CUBE_SIDE, 0.0).expect("valid cube"),
            Obstacle::square(Vec2::new(0.85, 0.15), CUBE_SIDE, 0.0).expect("valid cube"),
            Obstacle::square(Vec2::new(0.85, -0.15), CUBE_SIDE, 0.0).expect("valid cube"),
        ],
        // A slanted wall in the path deflects toward +y into a long wall parallel
        // to the start-goal line; the way out is back around the slant's low end.
        Setup::Elbow => {
            let long = Obstacle::new(
                Vec2::new(0.775, 0.1),
                Vec2::new(WALL_LENGTH / 2.0, ELBOW_WALL_THICKNESS / 2.0),
                0.0,
            )
            .expect("valid wall");
            let top = Vec2::new(0.9, 0.1);
            let dir = Vec2::from_angle(60f64.to_radians());
            let bottom = top - dir * SLANT_LENGTH;
            let slant = Obstacle::segment(bottom, top, ELBOW_WALL_THICKNESS).expect("valid wall");
            vec![slant, long]
        }
    };
    Scene {
        obstacles,
        start: EVAL_START,
        goal: GOAL,
        bounds: Bounds::default(),
    }
}
