use std::path::Path;
use std::process::{Command, Output};

fn ddslab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddslab")).args(args).current_dir(cwd).env("RUST_LOG", "warn").env_remove("DDSLAB_RUNS_DIR").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A tiny-preset overlay small enough to train in seconds.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "preset": "tiny",
        "data": {"train_size": 24, "heldout_size": 12},
        "denoiser": {"train": {"steps": 4, "batch_size": 4}, "validation_pairs": 4},
        "experiments": {"norm_pairs": 4, "norm_draws": 2}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddslab(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in ["gen-data", "train-denoiser", "sample", "edit", "train-i2i", "translate", "experiment", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help:\n{text}");
    }
    let o = ddslab(&["edit", "--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("--target-spec"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--bogus"][..], &["frobnicate"], &["gen-data", "--nope"], &["sample", "--checkpoint", "x", "--caption", "red circle on white", "--out", "y.png"]] {
        let o = ddslab(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
    }
    let o = ddslab(&["experiment", "no-such-thing", "--preset", "tiny"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sds-norm-curve"));
}

#[test]
fn invalid_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"preset": "tiny", "edit": {"omgea": 3.0}}"#).unwrap();
    let o = ddslab(&["gen-data", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("omgea"), "{}", stderr(&o));
}

#[test]
fn missing_prerequisite_is_a_runtime_error_naming_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = ddslab(&["experiment", "sds-norm-curve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("ddslab train-denoiser"), "{}", stderr(&o));
}

#[test]
fn experiment_creates_a_report_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(ddslab(&["gen-data", "--config", c], dir.path()).status.code(), Some(0));
    assert_eq!(ddslab(&["train-denoiser", "--config", c], dir.path()).status.code(), Some(0));
    assert!(dir.path().join("checkpoints/config.json").exists());

    let runs = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_ddslab"))
        .args(["experiment", "sds-norm-curve", "--config", c])
        .current_dir(dir.path())
        .env("DDSLAB_RUNS_DIR", &runs)
        .output()
        .unwrap();
    let code = o.status.code();
    assert!(code == Some(0) || code == Some(2), "{}", stderr(&o));
    let reports: Vec<_> = std::fs::read_dir(runs.join("sds-norm-curve")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(reports.len(), 1);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(reports[0].join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["preset"], "tiny");
    assert_eq!(report["config"]["paths"]["runs_dir"], runs.to_str().unwrap());
    assert_eq!(report["passed"], code == Some(0));
    assert!(reports[0].join("sds_norm_curve.csv").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_ddslab")).args(["report", "--config", c]).current_dir(dir.path()).env("DDSLAB_RUNS_DIR", &runs).output().unwrap();
    assert!(stdout(&o).contains("sds-norm-curve"));
    assert!(runs.join("summary.json").exists());
}

#[test]
fn sample_and_edit_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    ddslab(&["gen-data", "--config", c], dir.path());
    ddslab(&["train-denoiser", "--config", c], dir.path());
    let ckpt = "checkpoints/denoiser.ckpt";
    let o = ddslab(&["sample", "--checkpoint", ckpt, "--caption", "red circle on _", "--omega", "3", "--steps", "3", "--count", "2", "--out", "s.png"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("s.png").exists());

    let spec = |color: &str| format!(r#"{{"shape":"circle","shape_color":"{color}","background":"white","center":[8,8],"radius":4,"jitter_seed":0}}"#);
    let (src, tgt) = (spec("red"), spec("blue"));
    let o = ddslab(&["edit", "--checkpoint", ckpt, "--source-spec", &src, "--target-spec", &tgt, "--iters", "4", "--trajectory-every", "2", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["z_final.png", "trajectory.png", "accumulated_diff.png", "metrics.csv"] {
        assert!(dir.path().join("e").join(f).exists(), "{f}");
    }
    let o = ddslab(&["edit", "--checkpoint", ckpt, "--source-spec", "{\"shape\":1}", "--target-spec", &tgt, "--out", "e2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
