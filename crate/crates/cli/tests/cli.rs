//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fg3dmot"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--out-dir", dir.to_str().unwrap()];
    if !extra.contains(&"--seed") {
        args.extend_from_slice(&["--seed", "7"]);
    }
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(
        out.status.success(),
        "simulate failed: {}{}",
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn track(dir: &Path, mode: &str, out_name: &str, extra: &[&str]) -> PathBuf {
    let out_path = dir.join(out_name);
    let mut args = vec![
        "track".to_string(),
        "--mode".into(),
        mode.into(),
        "--detections".into(),
        dir.join("detections.txt").display().to_string(),
        "--poses".into(),
        dir.join("poses.txt").display().to_string(),
        "--out".into(),
        out_path.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let out = bin().args(&args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "track failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out_path
}

#[test]
fn pipeline_smoke_offline_track_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--objects", "3", "--frames", "30"]);
    let labels = track(dir.path(), "offline", "hyp.txt", &[]);
    let text = std::fs::read_to_string(&labels).unwrap();
    assert!(!text.trim().is_empty(), "label file must contain tracks");

    let out = run(&[
        "eval",
        "--gt",
        dir.path().join("gt.txt").to_str().unwrap(),
        "--hyp",
        labels.to_str().unwrap(),
        "--mode",
        "center3d",
        "--threshold",
        "1.0",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("MOTA"), "table output expected: {text}");
    assert!(text.contains("mota = "), "kv output expected: {text}");
    let mota: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("mota = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(mota > 0.9, "pipeline smoke MOTA {mota}");
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        simulate(dir.path(), &["--objects", "4", "--frames", "40"]);
    }
    for name in ["gt.txt", "detections.txt", "poses.txt"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical seeds");
    }
}

#[test]
fn simulate_s1_defaults_have_five_tracks() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let gt = std::fs::read_to_string(dir.path().join("gt.txt")).unwrap();
    let mut ids: Vec<&str> = gt
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 5);
}

#[test]
fn online_equals_offline_on_clean_input() {
    let dir = tempfile::tempdir().unwrap();
    simulate(
        dir.path(),
        &[
            "--objects",
            "3",
            "--frames",
            "25",
            "--noise-sigma",
            "0",
            "--miss-prob",
            "0",
            "--clutter-rate",
            "0",
        ],
    );
    let off = track(dir.path(), "offline", "off.txt", &[]);
    let on = track(dir.path(), "online", "on.txt", &[]);
    let off_text = std::fs::read_to_string(off).unwrap();
    let on_text = std::fs::read_to_string(on).unwrap();
    assert!(!off_text.is_empty());
    assert_eq!(off_text, on_text, "clean input must give identical files");
}

#[test]
fn track_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--objects", "3", "--frames", "30"]);
    let a = track(dir.path(), "offline", "a.txt", &[]);
    let b = track(dir.path(), "offline", "b.txt", &[]);
    assert_eq!(
        std::fs::read(a).unwrap(),
        std::fs::read(b).unwrap(),
        "identical runs must produce identical label files"
    );
}

#[test]
fn config_round_trip_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--objects", "3", "--frames", "30"]);
    let cfg = dir.path().join("effective.cfg");
    let first = track(
        dir.path(),
        "offline",
        "first.txt",
        &["--dump-config", cfg.to_str().unwrap()],
    );
    // Rerun with the dumped effective config and no --mode flag.
    let second = dir.path().join("second.txt");
    let out = bin()
        .args([
            "track",
            "--detections",
            dir.path().join("detections.txt").to_str().unwrap(),
            "--poses",
            dir.path().join("poses.txt").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            second.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(first).unwrap(),
        std::fs::read(second).unwrap(),
        "config round trip must be bit-exact"
    );
}

#[test]
fn dump_traj_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--objects", "2", "--frames", "20"]);
    let traj = dir.path().join("traj.csv");
    track(
        dir.path(),
        "offline",
        "hyp.txt",
        &["--dump-traj", traj.to_str().unwrap()],
    );
    let text = std::fs::read_to_string(traj).unwrap();
    assert!(text.starts_with("frame,track_id,px,py,pz,vx,vy,vz"));
    assert!(text.lines().count() > 10);
}

#[test]
fn manifest_processes_sequences_in_parallel() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), &["--objects", "2", "--frames", "20"]);
    simulate(b.path(), &["--objects", "2", "--frames", "20", "--seed", "9"]);
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.txt");
    let out_a = dir.path().join("a.txt");
    let out_b = dir.path().join("b.txt");
    std::fs::write(
        &manifest,
        format!(
            "{} {} {}\n{} {} {}\n",
            a.path().join("detections.txt").display(),
            out_a.display(),
            a.path().join("poses.txt").display(),
            b.path().join("detections.txt").display(),
            out_b.display(),
            b.path().join("poses.txt").display(),
        ),
    )
    .unwrap();
    let out = run(&[
        "track",
        "--manifest",
        manifest.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(out.status.success());
    assert!(out_a.exists() && out_b.exists());
}

#[test]
fn missing_detections_flag_exits_one_with_usage() {
    let out = run(&["track", "--out", "/tmp/x.txt"]);
    assert_eq!(out.status.code(), Some(1));
    let text = format!("{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("Usage") || text.contains("usage"), "{text}");
}

#[test]
fn eval_bad_path_exits_one() {
    let out = run(&[
        "eval",
        "--gt",
        "/nonexistent/gt.txt",
        "--hyp",
        "/nonexistent/hyp.txt",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_gt_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--objects", "3", "--frames", "20"]);
    let gt = dir.path().join("gt.txt");
    let out = run(&[
        "eval",
        "--gt",
        gt.to_str().unwrap(),
        "--hyp",
        gt.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("mota = 1"));
}

#[test]
fn simulate_rejects_single_frame() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--frames",
        "1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_detection_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("bad.txt");
    std::fs::write(&det, "0,2,not-a-number\n").unwrap();
    let out = run(&[
        "track",
        "--detections",
        det.to_str().unwrap(),
        "--out",
        dir.path().join("out.txt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
