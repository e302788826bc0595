//! SVG replay of one episode: scene, trajectory and oriented keypoint markers.

use std::fmt::Write as _;

use crate::controller::RolloutRecord;
use crate::data::Demonstration;
use crate::keypoints::KeypointEvent;
use crate::sim2d::{Scene, Vec2};

/// Everything drawn in a replay.
#[derive(Debug, Clone)]
pub struct Replay {
    pub scene: Scene,
    pub path: Vec<Vec2>,
    pub keypoints: Vec<KeypointEvent>,
    pub title: String,
    pub success: Option<bool>,
}

impl Replay {
    pub fn from_rollout(r: &RolloutRecord, title: impl Into<String>) -> Self {
        let mut path: Vec<Vec2> = r.ticks.iter().map(|t| t.obs.position).collect();
        path.push(r.final_position);
        Self {
            scene: r.scene.clone(),
            path,
            keypoints: r.keypoints.clone(),
            title: title.into(),
            success: Some(r.success),
        }
    }

    pub fn from_demonstration(d: &Demonstration, title: impl Into<String>) -> Self {
        Self {
            scene: d.scene.clone(),
            path: d.ticks.iter().map(|t| t.obs.position).collect(),
            keypoints: d.keypoints.clone(),
            title: title.into(),
            success: None,
        }
    }
}

const WIDTH: f64 = 800.0;
const MARKER: f64 = 0.04;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `replay` as a standalone SVG document. World `y` points up.
pub fn render_svg(replay: &Replay) -> String {
    let b = replay.scene.bounds;
    let scale = WIDTH / b.width();
    let height = b.height() * scale;
    let px = |p: Vec2| ((p.x - b.min.x) * scale, (b.max.y - p.y) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{:.0}" viewBox="0 0 {WIDTH:.0} {:.0}">"#,
        height + 40.0,
        height + 40.0
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{WIDTH:.0}" height="{height:.0}" fill="#fafafa" stroke="#999"/>"##);

    for ob in &replay.scene.obstacles {
        let pts: Vec<String> = ob
            .corners()
            .iter()
            .map(|&c| {
                let (x, y) = px(c);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(s, r##"<polygon class="obstacle" points="{}" fill="#8d6e63"/>"##, pts.join(" "));
    }

    let (sx, sy) = px(replay.scene.start);
    let (gx, gy) = px(replay.scene.goal);
    let _ = writeln!(s, r##"<circle class="start" cx="{sx:.1}" cy="{sy:.1}" r="6" fill="#1976d2"/>"##);
    let _ = writeln!(
        s,
        r##"<circle class="goal" cx="{gx:.1}" cy="{gy:.1}" r="{:.1}" fill="none" stroke="#2e7d32" stroke-width="2"/>"##,
        0.05 * scale
    );

    if !replay.path.is_empty() {
        let pts: Vec<String> = replay
            .path
            .iter()
            .map(|&p| {
                let (x, y) = px(p);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="trajectory" points="{}" fill="none" stroke="#424242" stroke-width="2"/>"##,
            pts.join(" ")
        );
    }

    // Each keypoint is a dot with a tick along its outward contact normal.
    for kp in &replay.keypoints {
        let p = Vec2::new(kp.x, kp.y);
        let tip = p + Vec2::new(kp.cos, kp.sin) * MARKER;
        let (x, y) = px(p);
        let (tx, ty) = px(tip);
        let _ = writeln!(
            s,
            r##"<g class="keypoint"><line x1="{x:.1}" y1="{y:.1}" x2="{tx:.1}" y2="{ty:.1}" stroke="#d32f2f" stroke-width="2"/><circle cx="{x:.1}" cy="{y:.1}" r="4" fill="#d32f2f"/></g>"##
        );
    }

    let outcome = match replay.success {
        Some(true) => " — success",
        Some(false) => " — failure",
        None => "",
    };
    let _ = writeln!(
        s,
        r#"<text class="legend" x="8" y="{:.0}" font-family="sans-serif" font-size="14">{} · steps: {} · keypoints: {}{outcome}</text>"#,
        height + 26.0,
        escape(&replay.title),
        replay.path.len().saturating_sub(1),
        replay.keypoints.len()
    );
    s.push_str("</svg>\n");
    s
}
