//! Command-line behaviour: subcommands, resume, exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snailopt::config::{RangeSpec, RunConfig};
use snailopt::sweep::{GridDim, ParameterGrid};

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::desk(dir.join("run"));
    let grid = ParameterGrid {
        dims: vec![
            GridDim::new("A_J", 0.4, 0.55, 0.15),
            GridDim::new("rho_Ic", 0.8, 1.1, 0.3),
            GridDim::single("alpha", 0.23),
            GridDim::new("t", 8.0, 10.0, 2.0),
            GridDim::single("L_load", 1.5),
            GridDim::single("C_load", 1.0),
            GridDim::single("pitch", 3.0),
        ],
    };
    cfg.grid = snailopt::config::GridSpec::from_grid(&grid);
    cfg.optimizer.budget = 12;
    cfg.optimizer.max_warm_start = Some(8);
    cfg.drive.pump_amplitudes_ua = RangeSpec::new(0.2, 0.4, 0.1);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn snailopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snailopt"))
        .args(args)
        .env("SNAILOPT_WORKERS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_run_individually() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    let o = snailopt(&["stage1", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("stage1.csv").is_file());
    assert!(!run.join("stage1.checkpoint").exists());

    let csv = run.join("stage1.csv");
    let o = snailopt(&[
        "optimize",
        "--config",
        cfg,
        "--stage1",
        csv.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pstar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("pstar.json")).unwrap()).unwrap();
    assert_eq!(pstar["seed"], 3);

    let pstar_path = run.join("pstar.json");
    let o = snailopt(&["stage3", "--config", cfg, "--pstar", pstar_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("qstar.json").is_file());
    assert!(run.join("stage3/gain_02.csv").is_file());

    let o = snailopt(&["report", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "dispersion.csv",
        "correlation.csv",
        "histograms.csv",
        "gain_qstar.csv",
        "pstar.s2p",
    ] {
        assert!(run.join("report").join(f).is_file(), "missing report/{f}");
    }
    assert!(!run.join(".snailopt.lock").exists());
}

#[test]
fn pipeline_resumes_and_guards_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();

    let o = snailopt(&["pipeline", "--config", cfg_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("ran [stage1, optimize, stage3, report]"), "{out}");

    let o = snailopt(&["pipeline", "--config", cfg_s]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ran []"));

    // a tampered output reruns that stage and everything downstream
    let trace = dir.path().join("run/optimize_trace.csv");
    std::fs::write(&trace, "tampered").unwrap();
    let o = snailopt(&["pipeline", "--config", cfg_s]);
    assert!(
        String::from_utf8_lossy(&o.stdout).contains("ran [optimize, stage3, report]"),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );

    // a different config needs --force
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = text.replace("\"seed\": 1", "\"seed\": 2");
    std::fs::write(&cfg, &text).unwrap();
    let o = snailopt(&["pipeline", "--config", cfg_s]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("--force"));

    // a live lock blocks a second run
    let lock = dir.path().join("run/.snailopt.lock");
    std::fs::write(&lock, "1").unwrap();
    let o = snailopt(&["pipeline", "--config", cfg_s, "--force"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::remove_file(&lock).unwrap();

    let o = snailopt(&["pipeline", "--config", cfg_s, "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"metric\": {\"band_ghz\": [4.75, 6.75]}\n}\n").unwrap();
    let o = snailopt(&["stage1", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("matching_mode"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = snailopt(&[
        "stage1",
        "--config",
        dir.path().join("absent.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let cfg = tiny_config(dir.path());
    let o = snailopt(&[
        "stage3",
        "--config",
        cfg.to_str().unwrap(),
        "--pstar",
        "/nonexistent/pstar.json",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = snailopt(&["optimize", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "clap usage errors also exit 2");
}
