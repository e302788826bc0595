//! The `prodapt` binary end to end, plus flag/config/default precedence.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::{CommandFactory, Parser};
use prodapt_cli::{resolve_eval, resolve_serve, resolve_train, Cli, Command as Sub, FileConfig};
use prodapt_core::eval::ReportFormat;
use prodapt_core::sim2d::Setup;

fn prodapt(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prodapt"));
    cmd.args(args).env_remove("PRODAPT_SEED").env_remove("PRODAPT_DATA_DIR");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_flag_of_every_subcommand() {
    let mut root = Cli::command();
    for sub in root.get_subcommands_mut() {
        let name = sub.get_name().to_string();
        let out = run_ok(&mut prodapt(&[&name, "--help"]));
        let help = String::from_utf8(out.stdout).unwrap();
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "`{name} --help` lacks --{long}");
            }
        }
        assert!(help.contains("--config"), "`{name} --help` lacks --config");
    }
}

fn parse(args: &[&str]) -> Sub {
    Cli::try_parse_from(std::iter::once("prodapt").chain(args.iter().copied())).unwrap().command
}

#[test]
fn flags_beat_config_file_beats_defaults() {
    let file: FileConfig = toml::from_str(
        r#"
        [train]
        data = "from-file"
        out = "file.ckpt"
        epochs = 7
        lr = 0.001

        [eval]
        variants = ["a=file.ckpt"]
        trials = 3
        setups = ["wall"]
        format = "csv"

        [serve]
        port = 9000
        mode = "teleop"
        "#,
    )
    .unwrap();

    let Sub::Train(flags) = parse(&["train", "--epochs", "2"]) else { unreachable!() };
    let s = resolve_train(&flags, &file.train).unwrap();
    assert_eq!(s.epochs, 2, "flag wins");
    assert_eq!(s.lr, 0.001, "file beats default");
    assert_eq!(s.data, Path::new("from-file"));
    assert_eq!((s.horizon_obs, s.keypoints, s.batch_size, s.seed), (3, 10, 256, 0), "defaults");

    let Sub::Eval(flags) = parse(&["eval", "--variant", "b=x.ckpt", "--setups", "clear,elbow"]) else {
        unreachable!()
    };
    let s = resolve_eval(&flags, &file.eval).unwrap();
    assert_eq!(s.variants, vec![("b".to_string(), "x.ckpt".into())]);
    assert_eq!(s.setups, vec![Setup::Clear, Setup::Elbow]);
    assert_eq!(s.trials, 3);
    assert_eq!(s.format, ReportFormat::Csv);

    let Sub::Serve(flags) = parse(&["serve"]) else { unreachable!() };
    let s = resolve_serve(&flags, &file.serve).unwrap();
    assert_eq!(s.port, 9000);
    assert_eq!(s.host, "127.0.0.1");

    let Sub::Eval(flags) = parse(&["eval"]) else { unreachable!() };
    let s = resolve_eval(&flags, &Default::default());
    assert!(s.is_err(), "eval without variants must be rejected");
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(toml::from_str::<FileConfig>("[train]\nepoch = 3\n").is_err());
    assert!(toml::from_str::<FileConfig>("[fly]\n").is_err());
}

#[test]
fn env_seed_yields_to_flag_and_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[collect]\nn = 2\nseed = 5\n").unwrap();
    let manifest_seed = |out: &Path| -> u64 {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };

    let a = dir.path().join("a");
    run_ok(prodapt(&["--config", p(&cfg), "collect", "--out", p(&a)]).env("PRODAPT_SEED", "7"));
    assert_eq!(manifest_seed(&a), 7);

    let b = dir.path().join("b");
    run_ok(prodapt(&["--config", p(&cfg), "collect", "--out", p(&b), "--seed", "8"]).env("PRODAPT_SEED", "7"));
    assert_eq!(manifest_seed(&b), 8);

    let c = dir.path().join("c");
    run_ok(&mut prodapt(&["--config", p(&cfg), "collect", "--out", p(&c)]));
    assert_eq!(manifest_seed(&c), 5);
    assert_eq!(fs::read_dir(&c).unwrap().count(), 3, "two episodes plus manifest");
}

#[test]
fn invalid_flags_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let res = prodapt(&["collect", "--n", "0", "--out", p(&out)]).output().unwrap();
    assert!(!res.status.success());
    assert!(!out.exists());
    let res = prodapt(&["eval", "--variant", "nolabel"]).output().unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("LABEL=PATH"));
    let res = prodapt(&["collect", "--source", "teleop", "--out", p(&out)]).output().unwrap();
    assert!(String::from_utf8_lossy(&res.stderr).contains("serve"));
}

#[test]
fn collect_train_eval_replay_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data2 = dir.path().join("data2");
    run_ok(&mut prodapt(&["collect", "--n", "3", "--seed", "4", "--out", p(&data)]));
    run_ok(&mut prodapt(&["collect", "--n", "3", "--seed", "4", "--out", p(&data2)]));
    for name in ["episode_0000.jsonl", "episode_0002.jsonl", "manifest.json"] {
        assert_eq!(fs::read(data.join(name)).unwrap(), fs::read(data2.join(name)).unwrap(), "{name}");
    }

    let ckpt = dir.path().join("kp.ckpt");
    let log = dir.path().join("train.jsonl");
    let train = |out: &Path| {
        run_ok(&mut prodapt(&[
            "train", "--data", p(&data), "--out", p(out), "--epochs", "2", "--seed", "1", "--log", p(&log),
        ]))
    };
    train(&ckpt);
    let ckpt2 = dir.path().join("kp2.ckpt");
    train(&ckpt2);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap(), "training is deterministic");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);

    let base = dir.path().join("base.ckpt");
    run_ok(&mut prodapt(&[
        "train", "--data", p(&data), "--out", p(&base), "--epochs", "1", "--keypoints", "0",
    ]));

    let rollouts = dir.path().join("rollouts");
    let report = dir.path().join("report.csv");
    run_ok(&mut prodapt(&[
        "eval",
        "--variant",
        &format!("kp={}", p(&ckpt)),
        "--variant",
        &format!("base={}", p(&base)),
        "--setups",
        "bucket",
        "--trials",
        "1",
        "--format",
        "csv",
        "--out",
        p(&report),
        "--rollouts",
        p(&rollouts),
    ]));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().any(|l| l.starts_with("bucket,kp,")));
    assert!(csv.lines().any(|l| l.starts_with("bucket,base,")));

    let rollout = rollouts.join("bucket_kp_000.jsonl");
    let kp_lines = fs::read_to_string(&rollout)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("{\"t\"") && l.contains("\"kp\":"))
        .count();
    let svg_path = dir.path().join("rollout.svg");
    let out = run_ok(&mut prodapt(&["replay", "--input", p(&rollout), "--out", p(&svg_path)]));
    assert!(String::from_utf8_lossy(&out.stdout).contains(&format!("{kp_lines} keypoints")));
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains(&format!("keypoints: {kp_lines}")));
    assert_eq!(svg.matches("class=\"keypoint\"").count(), kp_lines);

    let ep_svg = dir.path().join("episode.svg");
    run_ok(&mut prodapt(&[
        "replay", "--input", p(&data.join("episode_0001.jsonl")), "--out", p(&ep_svg), "--title", "demo <1>",
    ]));
    assert!(fs::read_to_string(&ep_svg).unwrap().contains("demo &lt;1&gt;"));
}

#[test]
fn replay_reports_line_numbered_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let scene = serde_json::to_string(&prodapt_core::sim2d::make_eval_scene(Setup::Clear)).unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, format!("{{\"scene\":{scene}}}\n{{\"success\":false,\"iterations\":0}}\n")).unwrap();
    let res = prodapt(&["replay", "--input", p(&empty), "--out", p(&dir.path().join("x.svg"))])
        .output()
        .unwrap();
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("empty.jsonl:2:") && err.contains("empty trajectory"), "{err}");

    let garbled = dir.path().join("garbled.jsonl");
    fs::write(&garbled, format!("{{\"scene\":{scene}}}\n{{\"t\":0,\"obs\":[0.4,0.0\n")).unwrap();
    let res = prodapt(&["replay", "--input", p(&garbled), "--out", p(&dir.path().join("y.svg"))])
        .output()
        .unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("garbled.jsonl:2:"));
}
