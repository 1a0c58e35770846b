use std::path::Path;
use std::process::{Command, Output};

fn mtuc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtuc"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = mtuc(dir.path(), &["--seed", "9", "simulate", "--print-config"]);
    assert!(first.status.success());
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("seed = 9"));
    std::fs::write(dir.path().join("run.toml"), &text).unwrap();
    let second = mtuc(dir.path(), &["--config", "run.toml", "simulate", "--print-config"]);
    assert!(second.status.success());
    assert_eq!(String::from_utf8(second.stdout).unwrap(), text);
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[simulate]\nspeed = 3\n").unwrap();
    let out = mtuc(dir.path(), &["--config", "bad.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speed"));
}

#[test]
fn bad_episode_argument_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtuc(dir.path(), &["simulate", "--episode", "nowhere:40"]);
    assert!(!out.status.success());
    let out = mtuc(dir.path(), &["simulate", "--episode", "straight"]);
    assert!(!out.status.success());
}

#[test]
fn lane_departure_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    // Offset estimates this noisy steer the car off the road.
    std::fs::write(dir.path().join("noisy.toml"), "[simulate.noise]\ndelta_sigma = 5.0\n").unwrap();
    let args = ["--config", "noisy.toml", "simulate", "--episode", "straight:60"];
    let out = mtuc(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let run = String::from_utf8(out.stdout).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join(run.trim()).join("metrics.csv")).unwrap();
    assert!(metrics.contains("lane_departure"), "{metrics}");

    let allowed = mtuc(dir.path(), &[&["--allow-failures"], &args[..]].concat());
    assert_eq!(allowed.status.code(), Some(0));
}

#[test]
fn simulate_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtuc(dir.path(), &["--seed", "2", "simulate", "--episode", "s_bend:40"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join(String::from_utf8(out.stdout).unwrap().trim());
    for name in [
        "config.toml",
        "metrics.csv",
        "episode_s_bend_40kmh.csv",
        "theta_s_bend_40kmh.svg",
        "delta_s_bend_40kmh.svg",
        "curvature_s_bend_40kmh.svg",
        "trajectory_s_bend_40kmh.svg",
    ] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
}
