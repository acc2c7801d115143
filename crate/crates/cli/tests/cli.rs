use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Overrides that shrink any preset to a seconds-long run without touching
/// its ablation switches.
const SMALL: &[&str] = &[
    "image_size=16",
    "cnn_depth=4",
    "deter=16",
    "hidden=16",
    "units=16",
    "mlp_layers=1",
    "num_latents=4",
    "classes_per_latent=4",
    "batch_size=4",
    "batch_length=8",
    "horizon=4",
    "min_replay=64",
    "train_ratio=32",
    "env_instances=2",
    "env_steps=100000",
    "max_grad_steps=10",
    "eval_every=0",
    "eval_episodes=1",
    "checkpoint_every=0",
];

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn wmrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmrl")).args(args).env_remove("WMRL_RUN_ROOT").output().unwrap()
}

fn train_args<'a>(config: &'a str, run_dir: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut args = vec!["train".to_string(), "--config".into(), config.into(), "--run-dir".into(), run_dir.into()];
    for o in SMALL.iter().chain(extra) {
        args.push("--override".into());
        args.push(o.to_string());
    }
    args
}

fn run_ok(args: &[String]) -> String {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = wmrl(&refs);
    assert!(out.status.success(), "{:?}\n{}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn train_records(run: &Path) -> usize {
    let text = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    text.lines().filter(|l| l.contains("\"kind\":\"train\"")).count()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = wmrl(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(wmrl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(wmrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_overrides_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = presets().join("pixelcatch");
    for bad in ["no_such_key=1", "gamma=2.0", "batch_size"] {
        let out = wmrl(&["train", "--config", config.to_str().unwrap(), "--run-dir", run.to_str().unwrap(), "--override", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(!run.exists());
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = wmrl(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(wmrl(&["eval"]).status.code(), Some(2));
}

#[test]
fn every_preset_launches() {
    let dir = tempfile::tempdir().unwrap();
    let mut names: Vec<String> = std::fs::read_dir(presets())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 12, "{names:?}");
    for name in names {
        let run = dir.path().join(&name);
        // Bare preset paths resolve to the `.toml` file.
        let config = presets().join(&name);
        run_ok(&train_args(config.to_str().unwrap(), run.to_str().unwrap(), &[]));
        assert!(train_records(&run) >= 10, "{name}");
        assert!(run.join("config.toml").exists() && run.join("checkpoints/latest.ckpt").exists());
    }
}

#[test]
fn trained_run_supports_eval_dream_diagnose_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let config = presets().join("pixelpoint_distractor");
    run_ok(&train_args(config.to_str().unwrap(), run_s, &["beta_rep=0.0", "beta_dyn=1.0"]));
    let stored = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(stored.contains("beta_rep = 0.0") && stored.contains("beta_dyn = 1.0"), "{stored}");

    let eval = run_ok(&["eval".into(), "--run-dir".into(), run_s.into(), "--episodes".into(), "10".into()]);
    assert!(eval.contains("episodes 10"), "{eval}");
    let returns = eval.lines().find(|l| l.starts_with("returns ")).unwrap();
    let parsed: Vec<f64> = serde_json::from_str(&returns["returns ".len()..]).unwrap();
    assert_eq!(parsed.len(), 10);

    let dream = run_ok(&["dream".into(), "--run-dir".into(), run_s.into(), "--context".into(), "5".into(), "--horizon".into(), "59".into()]);
    assert!(dream.contains("frames 64"), "{dream}");
    assert!(run.join("media/dream.png").exists());
    let out = wmrl(&["dream", "--run-dir", run_s, "--horizon", "0"]);
    assert_eq!(out.status.code(), Some(1));

    let diag = run_ok(&["diagnose".into(), "--run-dir".into(), run_s.into(), "--samples".into(), "64".into()]);
    let report: serde_json::Value = serde_json::from_str(&diag).unwrap();
    assert!(report["x_std"].as_f64().unwrap() >= 0.0);

    let plots = dir.path().join("plots");
    run_ok(&["plot".into(), run_s.into(), "--out".into(), plots.to_str().unwrap().into()]);
    for svg in ["returns.svg", "losses.svg", "collapse.svg"] {
        let text = std::fs::read_to_string(plots.join(svg)).unwrap();
        assert!(text.starts_with("<svg") || text.contains("<svg"), "{svg}");
    }
}

#[test]
fn run_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = presets().join("pixelcatch.toml");
    let mut args = train_args(config.to_str().unwrap(), "unused", &[]);
    args.drain(3..5);
    let out = Command::new(env!("CARGO_BIN_EXE_wmrl"))
        .args(&args)
        .args(["--seed", "4"])
        .env("WMRL_RUN_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("pixelcatch-seed4/metrics.jsonl").exists());
}
