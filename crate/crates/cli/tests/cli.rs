use std::path::Path;
use std::process::{Command, Output};

use mimic_core::motion_io::{
    extract_tpose, load_motion, motion_to_json, skeleton_to_json, Dof, Joint, MotionSequence, Skeleton,
};
use mimic_core::rotmath::Vec3;
use serde_json::Value;

fn mimic(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimic")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn arm(scale: f64, planar: bool) -> Skeleton {
    let dof = if planar { Dof::One { axis: Vec3::Y } } else { Dof::Three };
    let j = |name: &str, parent: Option<usize>, off: Vec3, dof: Dof| Joint { name: name.into(), parent, offset: off, dof, limits: None };
    Skeleton::new(
        scale,
        vec![
            j("root", None, Vec3::ZERO, Dof::Three),
            j("shoulder", Some(0), Vec3::new(0.0, 0.2, 0.3) * scale, dof),
            j("elbow", Some(1), Vec3::new(0.3, 0.0, 0.0) * scale, dof),
            j("hand", Some(2), Vec3::new(0.3, 0.0, 0.0) * scale, Dof::Zero),
        ],
    )
    .unwrap()
}

#[test]
fn genref_squat_loads() {
    let d = tempfile::tempdir().unwrap();
    ok(&mimic(&["genref", "--task", "squat", "--frames", "60", "--skel", "squatter", "--out", "sq.json"], d.path()));
    let m = load_motion(d.path().join("sq.json")).unwrap();
    assert_eq!(m.len(), 60);
    assert_eq!(m.meta["tool_version"], env!("CARGO_PKG_VERSION"));
    assert!(m.meta["config_hash"].as_str().is_some_and(|h| h.len() == 16));
}

#[test]
fn genref_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let args = ["genref", "--task", "squat", "--frames", "60", "--out"];
    ok(&mimic(&[&args[..], &["plain.json"]].concat(), d.path()));
    ok(&mimic(&[&args[..], &["tp.json", "--inject-teleport"]].concat(), d.path()));
    ok(&mimic(&[&args[..], &["fl.json", "--inject-float", "10:20"]].concat(), d.path()));
    let plain = load_motion(d.path().join("plain.json")).unwrap();
    let tp = load_motion(d.path().join("tp.json")).unwrap();
    let span = tp.meta["teleport_span"].as_array().unwrap();
    let a = span[0].as_u64().unwrap() as usize;
    assert!((tp.frames[a].root_pos - tp.frames[a - 1].root_pos).norm() > 0.5);
    let fl = load_motion(d.path().join("fl.json")).unwrap();
    assert!((fl.frames[15].root_pos.z - plain.frames[15].root_pos.z - 0.3).abs() < 1e-12);
    assert_eq!(fl.frames[25], plain.frames[25]);
}

#[test]
fn match_identity_is_diagonal() {
    let d = tempfile::tempdir().unwrap();
    ok(&mimic(&["genref", "--task", "wave", "--frames", "6", "--out", "w.json"], d.path()));
    let plot = ok(&mimic(&["match", "--ref", "w.json", "--traj", "w.json", "--brute-force", "--out", "m.json"], d.path()));
    let rows: Vec<&str> = plot.lines().collect();
    assert_eq!(rows.len(), 6);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.find('#'), Some(i), "{plot}");
    }
    let j: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(j["brute_force"]["agrees"], true);
    assert_eq!(j["matching"]["pairs"].as_array().unwrap().len(), 6);
    assert_eq!(j["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn match_disjoint_warns() {
    let d = tempfile::tempdir().unwrap();
    ok(&mimic(&["genref", "--task", "squat", "--frames", "10", "--out", "a.json"], d.path()));
    ok(&mimic(&["genref", "--task", "squat", "--frames", "10", "--out", "b.json", "--inject-teleport", "0:10"], d.path()));
    let out = mimic(&["match", "--ref", "a.json", "--traj", "b.json", "--metric", "quadruped"], d.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty matching"));
}

#[test]
fn retarget_tpose_is_stable() {
    let d = tempfile::tempdir().unwrap();
    let src = arm(1.0, false);
    let m = MotionSequence::new(30.0, src.clone(), vec![extract_tpose(&src); 4]).unwrap();
    std::fs::write(d.path().join("src.json"), motion_to_json(&m)).unwrap();
    std::fs::write(d.path().join("tgt.json"), skeleton_to_json(&arm(0.8, false))).unwrap();
    std::fs::write(d.path().join("planar.json"), skeleton_to_json(&arm(0.8, true))).unwrap();
    let full = r#"{"mode":"full","pairs":[{"src":"shoulder","tgt":"shoulder"},{"src":"elbow","tgt":"elbow"}]}"#;
    std::fs::write(d.path().join("map.json"), full).unwrap();
    let args = |out: &'static str, tgt: &'static str| ["retarget", "--motion", "src.json", "--map", "map.json", "--target-skel", tgt, "--out", out];
    ok(&mimic(&args("o1.json", "tgt.json"), d.path()));
    ok(&mimic(&args("o2.json", "tgt.json"), d.path()));
    let b1 = std::fs::read(d.path().join("o1.json")).unwrap();
    assert_eq!(b1, std::fs::read(d.path().join("o2.json")).unwrap());
    let out = load_motion(d.path().join("o1.json")).unwrap();
    let tp = extract_tpose(&arm(0.8, false));
    assert!(out.frames.iter().all(|f| *f == tp));

    ok(&mimic(&[&args("p.json", "planar.json")[..], &["--planar"]].concat(), d.path()));
    let p = load_motion(d.path().join("p.json")).unwrap();
    assert!(p.frames.iter().all(|f| *f == extract_tpose(&arm(0.8, true))));
}

#[test]
fn retarget_partial_reports_untouched() {
    let d = tempfile::tempdir().unwrap();
    let src = arm(1.0, false);
    let m = MotionSequence::new(30.0, src.clone(), vec![extract_tpose(&src)]).unwrap();
    std::fs::write(d.path().join("src.json"), motion_to_json(&m)).unwrap();
    std::fs::write(d.path().join("tgt.json"), skeleton_to_json(&arm(1.0, false))).unwrap();
    let partial = r#"{"mode":"partial","targets":["shoulder"],"pairs":[{"src":"shoulder","tgt":"shoulder"}]}"#;
    std::fs::write(d.path().join("map.json"), partial).unwrap();
    let out = mimic(&["retarget", "--motion", "src.json", "--map", "map.json", "--target-skel", "tgt.json", "--out", "o.json"], d.path());
    ok(&out);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("o.report.json")).unwrap()).unwrap();
    let untouched: Vec<&str> = rep["report"]["untouched_target_joints"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(untouched.contains(&"elbow"), "{untouched:?}");
    assert!(rep["config_hash"].is_string());
}

#[test]
fn retarget_bad_map_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let src = arm(1.0, false);
    let m = MotionSequence::new(30.0, src.clone(), vec![extract_tpose(&src)]).unwrap();
    std::fs::write(d.path().join("src.json"), motion_to_json(&m)).unwrap();
    std::fs::write(d.path().join("map.json"), r#"{"mode":"full","pairs":[{"src":"knee","tgt":"elbow"}]}"#).unwrap();
    let out = mimic(&["retarget", "--motion", "src.json", "--map", "map.json", "--target-skel", "squatter", "--out", "o.json"], d.path());
    assert_eq!(out.status.code(), Some(2));
}

const SWING: &str = "task = \"swing\"\niterations = 2\n[robot]\npreset = \"pendulum\"\n[sim]\nhorizon = 20\n[ppo]\nenvs = 4\nsteps = 8\nminibatch = 16\nepochs = 2\n";

#[test]
fn train_zero_iterations() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.toml"), SWING).unwrap();
    let echo = ok(&mimic(&["train", "--config", "run.toml", "--seed", "3", "--out", "run", "--iterations", "0"], d.path()));
    assert!(echo.contains("seed = 3") && echo.contains("iterations = 0"), "{echo}");
    let mut files: Vec<String> =
        std::fs::read_dir(d.path().join("run")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["checkpoint_0000.json", "config.toml", "metrics.csv"]);
    let csv = std::fs::read_to_string(d.path().join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn train_is_deterministic_and_evaluates() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.toml"), SWING).unwrap();
    ok(&mimic(&["train", "--config", "run.toml", "--seed", "5", "--out", "a"], d.path()));
    ok(&mimic(&["train", "--config", "run.toml", "--seed", "5", "--out", "b"], d.path()));
    let a = std::fs::read(d.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("b/metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 4);
    assert_eq!(
        std::fs::read(d.path().join("a/checkpoint_final.json")).unwrap(),
        std::fs::read(d.path().join("b/checkpoint_final.json")).unwrap()
    );

    let empty = ok(&mimic(&["eval", "--checkpoint", "a/checkpoint_final.json", "--episodes", "0"], d.path()));
    let j: Value = serde_json::from_str(&empty).unwrap();
    assert!(j["blocks"].as_array().unwrap().is_empty());

    let all = ok(&mimic(&["eval", "--checkpoint", "a/checkpoint_final.json", "--episodes", "1", "--terrain", "all"], d.path()));
    let j: Value = serde_json::from_str(&all).unwrap();
    let names: Vec<&str> = j["blocks"].as_array().unwrap().iter().map(|b| b["terrain"].as_str().unwrap()).collect();
    assert_eq!(names, ["plane", "rand", "pyramid", "wave"]);
    for b in j["blocks"].as_array().unwrap() {
        assert!(b["success_rate"].is_number() && b["mean_episode_length"].is_number() && b["mean_similarity"].is_number());
    }
    assert_eq!(j["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn train_preset_sets_weights() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.toml"), SWING).unwrap();
    ok(&mimic(&["train", "--config", "run.toml", "--out", "g", "--iterations", "0", "--preset", "gailfo"], d.path()));
    let cfg = std::fs::read_to_string(d.path().join("g/config.toml")).unwrap();
    assert!(cfg.contains("lambda_me = 0.0"), "{cfg}");
    assert!(cfg.contains("lambda_adv = 1.0"), "{cfg}");
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.toml"), "task = \"imitate\"\n").unwrap();
    let out = mimic(&["train", "--config", "bad.toml", "--out", "x"], d.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(d.path().join("typo.toml"), "tsak = \"swing\"\n").unwrap();
    assert_eq!(mimic(&["train", "--config", "typo.toml", "--out", "x"], d.path()).status.code(), Some(2));
    assert_eq!(mimic(&["train", "--config", "missing.toml", "--out", "x"], d.path()).status.code(), Some(2));
    let out = mimic(&["genref", "--task", "dance", "--out", "x.json"], d.path());
    assert_eq!(out.status.code(), Some(2));
    let out = mimic(&["eval", "--checkpoint", "nope.json"], d.path());
    assert_eq!(out.status.code(), Some(2));
}
