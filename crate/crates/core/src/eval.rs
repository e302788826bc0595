//! Benchmark harness: setups x variants x trials, with success rates,
//! iteration quartiles over successful trials and inference-time statistics.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{check_compatible, run_episode, ControllerConfig, Policy, RolloutRecord};
use crate::diffusion::{Checkpoint, DenoiserModel, GIT_DESCRIBE};
use crate::error::Error;
use crate::keypoints::KeypointConfig;
use crate::seed::{label_id, rng_for};
use crate::sim2d::{make_eval_scene, Setup, SimConfig};

/// Placeholder for an empty statistic in rendered reports.
pub const EMPTY_CELL: &str = "—";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub label: String,
    pub checkpoint: PathBuf,
    /// Overrides the controller configuration stored in the checkpoint.
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub setups: Vec<Setup>,
    pub trials: usize,
    pub variants: Vec<VariantSpec>,
    pub seed: u64,
    /// Run trials concurrently. Timing is only meaningful when false.
    #[serde(default)]
    pub parallel: bool,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig("benchmark needs at least one variant".into()));
        }
        if self.setups.is_empty() {
            return Err(Error::InvalidConfig("benchmark needs at least one setup".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        let mut labels: Vec<&str> = self.variants.iter().map(|v| v.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("variant labels must be unique".into()));
        }
        Ok(())
    }
}

/// A variant ready to run.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub policy: Policy<DenoiserModel<f32>>,
    pub controller: ControllerConfig,
    pub keypoints: KeypointConfig,
}

impl Variant {
    pub fn from_checkpoint(label: impl Into<String>, ck: &Checkpoint, controller: Option<ControllerConfig>) -> Result<Self, Error> {
        Ok(Self {
            label: label.into(),
            policy: ck.policy()?,
            controller: controller.unwrap_or(ck.controller),
            keypoints: ck.keypoints,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub setup: Setup,
    pub variant: String,
    pub trials: usize,
    pub successes: usize,
    /// Percent.
    pub success_rate: f64,
    /// Over successful trials only.
    pub iterations: Option<Quartiles>,
    /// Milliseconds per sample call, first call of each episode excluded.
    pub inference_ms: Option<Quartiles>,
    pub mean_inference_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub git_describe: String,
}

impl EnvironmentInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
            git_describe: GIT_DESCRIBE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub trials: usize,
    pub cells: Vec<CellReport>,
    pub environment: EnvironmentInfo,
    pub notes: Vec<String>,
}

impl BenchmarkReport {
    pub fn cell(&self, setup: Setup, variant: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.setup == setup && c.variant == variant)
    }
}

/// Summarizes the rollouts of one (setup, variant) cell.
pub fn summarize(setup: Setup, variant: &str, rollouts: &[RolloutRecord]) -> CellReport {
    let successes: Vec<&RolloutRecord> = rollouts.iter().filter(|r| r.success).collect();
    let iterations: Vec<f64> = successes.iter().map(|r| r.iterations as f64).collect();
    let times: Vec<f64> = rollouts
        .iter()
        .flat_map(|r| r.inference_times.iter().skip(1).map(|s| s * 1e3))
        .collect();
    let mean = (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);
    CellReport {
        setup,
        variant: variant.to_string(),
        trials: rollouts.len(),
        successes: successes.len(),
        success_rate: if rollouts.is_empty() {
            0.0
        } else {
            100.0 * successes.len() as f64 / rollouts.len() as f64
        },
        iterations: Quartiles::of(&iterations),
        inference_ms: Quartiles::of(&times),
        mean_inference_ms: mean,
    }
}

/// Runs one trial with its own RNG stream derived from (seed, setup, variant, trial).
pub fn run_trial(variant: &Variant, setup: Setup, trial: usize, seed: u64) -> Result<RolloutRecord, Error> {
    let scene = make_eval_scene(setup);
    let mut rng = rng_for(seed, &[setup as u64, label_id(&variant.label), trial as u64]);
    run_episode(
        &scene,
        &variant.policy,
        &variant.controller,
        &variant.keypoints,
        &SimConfig::default(),
        &mut rng,
    )
}

/// Runs every (setup, variant, trial) combination on already loaded variants.
pub fn run_variants(
    variants: &[Variant],
    setups: &[Setup],
    trials: usize,
    seed: u64,
    parallel: bool,
) -> Result<BenchmarkReport, Error> {
    run_variants_with(variants, setups, trials, seed, parallel, |_, _, _, _| Ok(()))
}

/// [`run_variants`], handing every finished rollout to `sink` as
/// `(setup, variant label, trial, rollout)`.
pub fn run_variants_with(
    variants: &[Variant],
    setups: &[Setup],
    trials: usize,
    seed: u64,
    parallel: bool,
    mut sink: impl FnMut(Setup, &str, usize, &RolloutRecord) -> Result<(), Error>,
) -> Result<BenchmarkReport, Error> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("benchmark needs at least one variant".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    // Reject incompatible variants before running anything.
    for v in variants {
        check_compatible(&v.policy, &v.controller, &v.keypoints)
            .map_err(|e| Error::Mismatch(format!("variant '{}': {e}", v.label)))?;
    }
    let mut cells = Vec::new();
    for &setup in setups {
        for v in variants {
            let rollouts: Result<Vec<RolloutRecord>, Error> = if parallel {
                (0..trials).into_par_iter().map(|t| run_trial(v, setup, t, seed)).collect()
            } else {
                (0..trials).map(|t| run_trial(v, setup, t, seed)).collect()
            };
            let rollouts = rollouts?;
            for (trial, r) in rollouts.iter().enumerate() {
                sink(setup, &v.label, trial, r)?;
            }
            cells.push(summarize(setup, &v.label, &rollouts));
        }
    }
    Ok(BenchmarkReport {
        seed,
        trials,
        cells,
        environment: EnvironmentInfo::current(),
        notes: vec![
            "iteration quartiles are over successful trials only".into(),
            "inference times exclude the first sample call of each episode".into(),
        ],
    })
}

/// Loads every checkpoint, checks it against its controller configuration,
/// then runs the benchmark.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkReport, Error> {
    spec.validate()?;
    let variants = spec
        .variants
        .iter()
        .map(|v| {
            let ck = Checkpoint::load(&v.checkpoint)?;
            Variant::from_checkpoint(v.label.clone(), &ck, v.controller)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    run_variants(&variants, &spec.setups, spec.trials, spec.seed, spec.parallel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::InvalidConfig(format!("unknown report format '{other}'"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "setup",
    "variant",
    "trials",
    "successes",
    "success_pct",
    "iter_q1",
    "iter_median",
    "iter_q3",
    "infer_ms_q1",
    "infer_ms_median",
    "infer_ms_q3",
    "infer_ms_mean",
];

pub fn format_rate(rate: f64) -> String {
    format!("{rate:.1}")
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_else(|| EMPTY_CELL.to_string())
}

fn row(c: &CellReport) -> Vec<String> {
    vec![
        c.setup.to_string(),
        c.variant.clone(),
        c.trials.to_string(),
        c.successes.to_string(),
        format_rate(c.success_rate),
        opt(c.iterations.map(|q| q.q1), 1),
        opt(c.iterations.map(|q| q.median), 1),
        opt(c.iterations.map(|q| q.q3), 1),
        opt(c.inference_ms.map(|q| q.q1), 0),
        opt(c.inference_ms.map(|q| q.median), 0),
        opt(c.inference_ms.map(|q| q.q3), 0),
        opt(c.mean_inference_ms, 0),
    ]
}

pub fn render_report(report: &BenchmarkReport, format: ReportFormat) -> String {
    let rows: Vec<Vec<String>> = report.cells.iter().map(row).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&REPORT_COLUMNS.join(","));
            out.push('\n');
            for r in &rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for r in &rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
                .map(|i| {
                    rows.iter()
                        .map(|r| r[i].chars().count())
                        .chain([REPORT_COLUMNS[i].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: Vec<&str>| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:>w$}", w = *w))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            let _ = writeln!(out, "{}", line(REPORT_COLUMNS.to_vec()));
            for r in &rows {
                let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
            }
        }
    }
    if format != ReportFormat::Csv {
        for note in &report.notes {
            let _ = writeln!(out, "\n* {note}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(successes: usize, iterations: Option<Quartiles>) -> CellReport {
        CellReport {
            setup: Setup::Bucket,
            variant: "ours".into(),
            trials: 35,
            successes,
            success_rate: 100.0 * successes as f64 / 35.0,
            iterations,
            inference_ms: Quartiles::of(&[10.2, 11.7, 12.9]),
            mean_inference_ms: Some(11.6),
        }
    }

    fn report(cells: Vec<CellReport>) -> BenchmarkReport {
        BenchmarkReport {
            seed: 0,
            trials: 35,
            cells,
            environment: EnvironmentInfo::current(),
            notes: vec![],
        }
    }

    #[test]
    fn rate_is_rendered_to_a_tenth() {
        assert_eq!(format_rate(100.0 * 30.0 / 35.0), "85.7");
    }

    #[test]
    fn empty_successes_render_as_dash() {
        let text = render_report(&report(vec![cell(0, None)]), ReportFormat::Table);
        assert!(text.contains(EMPTY_CELL));
        let md = render_report(&report(vec![cell(0, None)]), ReportFormat::Markdown);
        assert!(md.lines().nth(2).unwrap().contains(EMPTY_CELL));
    }

    #[test]
    fn quartiles_interpolate() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
        assert!(Quartiles::of(&[]).is_none());
    }

    #[test]
    fn spec_without_variants_is_rejected() {
        let spec = BenchmarkSpec {
            setups: vec![Setup::Clear],
            trials: 1,
            variants: vec![],
            seed: 0,
            parallel: false,
        };
        assert!(run_benchmark(&spec).is_err());
    }

    #[test]
    fn summary_uses_only_successes_and_skips_first_sample() {
        let scene = make_eval_scene(Setup::Clear);
        let mk = |success, iterations, times: Vec<f64>| RolloutRecord {
            scene: scene.clone(),
            ticks: vec![],
            keypoints: vec![],
            success,
            iterations,
            inference_times: times,
            final_position: scene.goal,
        };
        let c = summarize(
            Setup::Clear,
            "x",
            &[mk(true, 10, vec![1.0, 0.010]), mk(false, 1000, vec![1.0, 0.020, 0.030])],
        );
        assert_eq!(c.successes, 1);
        assert_eq!(c.iterations.unwrap().median, 10.0);
        assert!((c.mean_inference_ms.unwrap() - 20.0).abs() < 1e-9);
    }
}
