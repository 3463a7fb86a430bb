use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn seaice(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seaice"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

/// Six years on a 16×12 grid, one small backbone.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "output": dir.join("out"),
        "synth": {"rows": 16, "cols": 12, "n_days": 2192, "start": "2000-01-01"},
        "splits": {
            "train": {"start": "2000-01-01", "end": "2003-12-31"},
            "val": {"start": "2004-01-01", "end": "2004-12-31"},
            "test": {"start": "2005-01-01", "end": "2005-12-31"}
        },
        "compressor": {"kind": "eof", "latent_dim": 6},
        "backbones": [{"kind": "dlinear", "max_epochs": 2, "sample_stride": 5}],
        "eval": {"init_stride": 60, "with_ssim": false},
        "ensemble": {"init_stride": 60},
        "seed": 3
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = seaice(&cfg, &["--set", "no.such.key=1", "synth"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = seaice(&cfg, &["--set", "eval.leads=[200]", "synth"]);
    assert_eq!(code(&o), 1);
    let o = seaice(&cfg, &["no-such-command"]);
    assert_eq!(code(&o), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&seaice(&bad, &["synth"])), 1);
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = seaice(&cfg, &["fit-eof"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = seaice(&cfg, &["report"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn worker_count_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_seaice"))
        .arg("--config")
        .arg(&cfg)
        .arg("synth")
        .env("SEAICE_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn step_by_step_pipeline_and_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    for step in [
        &["synth"][..],
        &["fit-eof"],
        &["encode"],
        &["train"],
        &["ensemble"],
        &["eval-s2s"],
        &["eval-sio"],
        &["extremes"],
        &["rollout", "--model", "persistence", "--init", "2005-03-01"],
    ] {
        let o = seaice(&cfg, step);
        assert_eq!(
            code(&o),
            0,
            "{step:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert!(out.join("runs/persistence/2005-03-01/run.json").exists());
    assert!(out.join("sio/table.csv").exists());
    assert!(out.join("extremes/dlinear/residual").is_dir());

    let o = seaice(&cfg, &["report"]);
    assert_eq!(code(&o), 0);
    let md = std::fs::read_to_string(out.join("report/summary.md")).unwrap();
    for m in ["persistence", "climatology", "sdap", "dlinear"] {
        assert!(
            md.contains(&format!("| {m} | ok |")),
            "{m} missing from\n{md}"
        );
    }
    // One learned model: every ensemble tier is skipped, not fatal.
    assert!(md.contains("| ensemble-rank1 | skipped"));

    std::fs::remove_file(out.join("s2s/dlinear.json")).unwrap();
    let o = seaice(&cfg, &["report"]);
    assert_eq!(code(&o), 0);
    let md = std::fs::read_to_string(out.join("report/summary.md")).unwrap();
    assert!(md.contains("| dlinear | skipped"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("dlinear: skipped"));
}
