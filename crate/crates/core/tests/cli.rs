use std::path::Path;
use std::process::Command;

use mapvins::cli::files::{diagnostics_csv, trajectory_csv, write_file};
use mapvins::cli::{
    build_map_to, build_prior_map, evaluate_files, run_experiment, run_sweep, ExperimentConfig, Mode, SweepGrid,
};
use mapvins::evaluation::Alignment;
use mapvins::map_oracle::load_map;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mapvins"))
}

fn short(mode: Mode, seconds: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig { mode, ..Default::default() };
    let scale = seconds / c.trajectory.duration;
    c.trajectory.loops *= scale;
    c.trajectory.vertical_cycles *= scale;
    c.trajectory.duration = seconds;
    c.map.mapping_poses = 905;
    c
}

#[test]
fn default_map_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.txt");
    let cfg = ExperimentConfig::default();
    let built = build_map_to(&cfg, &path).unwrap();
    assert_eq!(built.keyframes.len(), 543);
    assert_eq!(load_map(&path).unwrap(), built);
}

#[test]
fn odometry_has_no_map_diagnostics() {
    let art = run_experiment(&short(Mode::Odometry, 5.0)).unwrap();
    assert!(art.diagnostics.is_empty());
    assert_eq!(art.stats.renders_delivered, 0);
    assert!(art.summary.keyframes.is_none());
    assert!(art.summary.nees.is_some());
}

#[test]
fn runs_are_reproducible() {
    let cfg = short(Mode::MapAided, 5.0);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(trajectory_csv(&a.estimate), trajectory_csv(&b.estimate));
    assert_eq!(diagnostics_csv(&a.diagnostics), diagnostics_csv(&b.diagnostics));
    let mut other = cfg.clone();
    other.seed += 1;
    let c = run_experiment(&other).unwrap();
    assert_ne!(trajectory_csv(&a.estimate), trajectory_csv(&c.estimate));
}

// Noisier mapping poses give a worse prior map and a worse trajectory.
#[test]
fn keyframe_noise_degrades_accuracy() {
    let base = ExperimentConfig::default();
    let grid = SweepGrid {
        seeds: vec![1],
        modes: vec![Mode::MapAided],
        qualities: vec![base.map.quality.clone()],
        keyframe_noise: vec![0.0, 0.01, 0.05],
        latencies: vec![base.map.latency_frames],
    };
    let rows = run_sweep(&base, &grid).unwrap();
    assert_eq!(rows.len(), 3);
    let ate: Vec<f64> = rows.iter().map(|r| r.ate_position_cm).collect();
    assert!(ate.windows(2).all(|w| w[0] < w[1]), "{ate:?}");
}

#[test]
fn evaluating_a_trajectory_against_itself_is_zero() {
    let art = run_experiment(&short(Mode::Odometry, 5.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.csv");
    write_file(&gt, &trajectory_csv(&art.truth)).unwrap();
    let ev = evaluate_files(&gt, &gt, Alignment::Se3, &[1.0, 2.0], &[0.01]).unwrap();
    assert!(ev.ate.position_m < 1e-9);
    assert!(ev.ate.rotation_deg < 1e-6);
    for r in &ev.rpe {
        assert!(r.translation.median < 1e-9);
    }
    assert_eq!(ev.recall, vec![(0.01, 1.0)]);
}

fn run_bin(args: &[&str], cwd: &Path) -> (bool, String, String) {
    let out = bin().args(args).current_dir(cwd).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

#[test]
fn malformed_trajectory_names_the_line() {
    let art = run_experiment(&short(Mode::Odometry, 2.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let text = trajectory_csv(&art.truth);
    let mut lines: Vec<&str> = text.lines().collect();
    lines[5] = "0.1,abc,0,0,0,0,0,1";
    write_file(&dir.path().join("bad.csv"), &(lines.join("\n") + "\n")).unwrap();
    write_file(&dir.path().join("gt.csv"), &text).unwrap();
    let (ok, _, err) = run_bin(&["evaluate", "bad.csv", "gt.csv"], dir.path());
    assert!(!ok);
    assert!(err.contains("bad.csv") && err.contains("line 6"), "{err}");
}

#[test]
fn unknown_config_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    write_file(&dir.path().join("c.toml"), "seed = 3\n\n[trajectory]\nduraton = 5.0\n").unwrap();
    let (ok, _, err) = run_bin(&["run", "--config", "c.toml"], dir.path());
    assert!(!ok);
    assert!(err.contains("line 4") && err.contains("duraton"), "{err}");
}

#[test]
fn bin_build_map_then_run_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(Mode::MapAided, 3.0);
    write_file(&dir.path().join("c.toml"), &cfg.to_toml()).unwrap();
    let (ok, out, err) = run_bin(&["build-map", "--config", "c.toml", "--out", "m.txt"], dir.path());
    assert!(ok, "{err}");
    assert!(out.contains("keyframes"));
    let (ok, out, err) = run_bin(&["run", "--config", "c.toml", "--map", "m.txt", "-o", "out"], dir.path());
    assert!(ok, "{err}");
    assert!(out.contains("map keyframes"));
    for f in ["trajectory_est.csv", "trajectory_gt.csv", "diagnostics.csv", "metrics.csv", "rpe.csv", "recall.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let built = build_prior_map(&cfg).unwrap();
    assert_eq!(load_map(&dir.path().join("m.txt")).unwrap(), built);
}

#[test]
fn threaded_rendering_completes() {
    let mut cfg = short(Mode::MapAided, 5.0);
    cfg.map.threaded = true;
    let art = run_experiment(&cfg).unwrap();
    assert!(art.stats.renders_delivered > 0);
    assert!(art.summary.ate.position_m < 0.1);
}
