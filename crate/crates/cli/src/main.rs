use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context;
use clap::Parser;
use prodapt_cli::*;
use prodapt_core::controller::{read_rollout, write_rollout, ControllerConfig};
use prodapt_core::data::{collect, load_dataset, read_episode, CollectConfig};
use prodapt_core::diffusion::{Checkpoint, TrainConfig};
use prodapt_core::eval::{render_report, run_variants_with, Variant};
use prodapt_core::keypoints::KeypointConfig;
use prodapt_core::pipeline::train_checkpoint;
use prodapt_core::plot::{render_svg, Replay};

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Collect(f) => run_collect(resolve_collect(f, &file.collect)?),
        Command::Train(f) => run_train(resolve_train(f, &file.train)?),
        Command::Eval(f) => run_eval(resolve_eval(f, &file.eval)?),
        Command::Replay(f) => run_replay(f),
        Command::Serve(f) => run_serve(resolve_serve(f, &file.serve)?),
    }
}

fn run_collect(s: CollectSettings) -> anyhow::Result<()> {
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    let (manifest, _) = collect(&CollectConfig::new(s.n, s.seed), &s.out)?;
    println!(
        "collected {} demonstrations ({} attempts, {} ticks) into {}",
        manifest.counts.episodes,
        manifest.counts.attempts,
        manifest.counts.ticks,
        s.out.display()
    );
    Ok(())
}

fn run_train(s: TrainSettings) -> anyhow::Result<()> {
    let demos = load_dataset(&s.data)?;
    let mut keypoints = KeypointConfig::default();
    let controller = if s.keypoints == 0 {
        ControllerConfig::baseline(s.horizon_obs)
    } else {
        keypoints.n_kp = s.keypoints;
        ControllerConfig {
            h_o: s.horizon_obs,
            n_kp: s.keypoints,
            ..ControllerConfig::default()
        }
    };
    let cfg = TrainConfig {
        epochs: s.epochs,
        seed: s.seed,
        learning_rate: s.lr,
        batch_size: s.batch_size,
        ..TrainConfig::default()
    };
    let mut log_file = match &s.log {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let mut log_err = None;
    let (ck, log) = train_checkpoint(&demos, &controller, &keypoints, &cfg, |r| {
        if r.epoch == 1 || r.epoch % 25 == 0 || r.epoch == cfg.epochs {
            eprintln!("epoch {:>4}  loss {:.5}  lr {:.2e}  {:.2}s", r.epoch, r.loss, r.lr, r.seconds);
        }
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{}", serde_json::to_string(r).expect("epoch record serializes")) {
                log_err = Some(e);
                return false;
            }
        }
        true
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing the training log");
    }
    ck.save(&s.out)?;
    println!(
        "trained {} parameters on {} pairs for {} steps; final loss {:.5}; wrote {}",
        log.param_count,
        log.pairs,
        log.steps,
        ck.final_loss.unwrap_or(f64::NAN),
        s.out.display()
    );
    Ok(())
}

fn run_eval(s: EvalSettings) -> anyhow::Result<()> {
    let variants = s
        .variants
        .iter()
        .map(|(label, path)| {
            let ck = Checkpoint::load(path)?;
            Ok(Variant::from_checkpoint(label.clone(), &ck, None)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(dir) = &s.rollouts {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let report = run_variants_with(&variants, &s.setups, s.trials, s.seed, s.parallel, |setup, label, trial, r| {
        match &s.rollouts {
            Some(dir) => write_rollout(&dir.join(format!("{setup}_{label}_{trial:03}.jsonl")), r),
            None => Ok(()),
        }
    })?;
    let text = render_report(&report, s.format);
    match &s.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if let Some(p) = &s.json {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Episode files carry `source` in their header line; rollout files do not.
fn is_episode_file(path: &Path) -> anyhow::Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    Ok(serde_json::from_str::<serde_json::Value>(first)
        .map(|v| v.get("source").is_some())
        .unwrap_or(false))
}

fn run_replay(f: &ReplayFlags) -> anyhow::Result<()> {
    let title = f.title.clone().unwrap_or_else(|| {
        f.input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let replay = if is_episode_file(&f.input)? {
        Replay::from_demonstration(&read_episode(&f.input)?, title)
    } else {
        Replay::from_rollout(&read_rollout(&f.input)?, title)
    };
    fs::write(&f.out, render_svg(&replay)).with_context(|| format!("writing {}", f.out.display()))?;
    println!(
        "wrote {} ({} steps, {} keypoints)",
        f.out.display(),
        replay.path.len().saturating_sub(1),
        replay.keypoints.len()
    );
    Ok(())
}

fn run_serve(s: ServeSettings) -> anyhow::Result<()> {
    let addr: std::net::SocketAddr = format!("{}:{}", s.host, s.port)
        .parse()
        .with_context(|| format!("invalid listen address {}:{}", s.host, s.port))?;
    let cfg = prodapt_server::ServerConfig {
        checkpoint: s.checkpoint,
        static_dir: s.static_dir,
        seed: s.seed,
        ..prodapt_server::ServerConfig::new(s.mode, s.data_dir)
    };
    let state = prodapt_server::AppState::new(cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = prodapt_server::bind(addr).await?;
        println!("serving on http://{addr} (session socket at /ws)");
        prodapt_server::serve(listener, state).await
    })?;
    Ok(())
}
