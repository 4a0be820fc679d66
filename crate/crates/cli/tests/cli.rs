use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lad"))
        .args(args)
        .env("LAD_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Anchors and a checkpoint trained on a small dataset under `root`.
struct Fixture {
    anchors: PathBuf,
    checkpoint: PathBuf,
}

fn fixture(root: &Path) -> Fixture {
    let data = root.join("data");
    let clus = root.join("clus");
    let model = root.join("model");
    let out = lad(&["gen-data", "--kinds", "straight,fork", "--seeds", "2", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = lad(&["cluster", "--data", p(&data), "--na", "8", "--out", p(&clus)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let anchors = clus.join("anchors.json");
    let out = lad(&[
        "train", "--data", p(&data), "--anchors", p(&anchors), "--d", "32", "--epochs", "1", "--out", p(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    Fixture {
        anchors,
        checkpoint: model.join("checkpoint.json"),
    }
}

#[test]
fn unknown_kind_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lad(&["gen-data", "--kinds", "straight,hovercraft", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("hovercraft"));

    let penalties = dir.path().join("penalties.json");
    fs::write(&penalties, r#"{"CV": 0.5, "ZZ": 0.9}"#).unwrap();
    let out = lad(&["gen-data", "--penalties", p(&penalties), "--out", p(&dir.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ZZ"), "{}", stderr(&out));
}

#[test]
fn missing_subcommand_and_bad_log_level_are_usage_errors() {
    assert_eq!(code(&lad(&[])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_lad"))
        .args(["config"])
        .env("LAD_LOG_LEVEL", "chatty")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_writes_one_scene_per_scenario_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = lad(&["gen-data", "--seeds", "40", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let scenes = fs::read_dir(out_dir.join("scenes")).unwrap().count();
    assert_eq!(scenes, 7 * 40);
    let first = fs::read(out_dir.join("dataset.jsonl")).unwrap();
    let header: Value = serde_json::from_str(String::from_utf8_lossy(&first).lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(header["header"]["config"]["train_seeds"]["count"], 40);

    let again = lad(&["gen-data", "--seeds", "40", "--out", p(&out_dir)]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("overwrite"));
    assert_eq!(code(&lad(&["gen-data", "--seeds", "40", "--out", p(&out_dir), "--force"])), 0);
    assert_eq!(fs::read(out_dir.join("dataset.jsonl")).unwrap(), first);
}

#[test]
fn cluster_defaults_to_twenty_anchors_with_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&lad(&["gen-data", "--kinds", "straight,left_turn", "--seeds", "3", "--out", p(&data)])), 0);
    let out_dir = dir.path().join("anchors");
    let out = lad(&["cluster", "--data", p(&data), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let set: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("anchors.json")).unwrap()).unwrap();
    assert_eq!(set["anchors"].as_array().unwrap().len(), 20);
    assert_eq!(set["header"]["config"]["kinds"], serde_json::json!(["straight", "left_turn"]));
    let plot = fs::read_to_string(out_dir.join("anchors_plot.jsonl")).unwrap();
    let lines: Vec<&str> = plot.lines().collect();
    assert_eq!(lines.len(), 21);
    let first: Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(first["polyline"].as_array().unwrap().len(), 5);
}

#[test]
fn cluster_with_k_above_dataset_size_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&lad(&["gen-data", "--kinds", "straight", "--seeds", "1", "--out", p(&data)])), 0);
    let out = lad(&["cluster", "--data", p(&data), "--na", "100000", "--out", p(&dir.path().join("a"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("fewer than k=100000"));
}

#[test]
fn train_evaluate_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path());

    let log = fs::read_to_string(fx.checkpoint.with_file_name("loss_log.jsonl")).unwrap();
    let rows: Vec<Value> = log.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
    let boundary = rows.iter().position(|r| r["action_ce"].as_f64().unwrap() > 0.0).unwrap();
    assert!(boundary > 0);
    assert!(rows[..boundary].iter().all(|r| r["stage"] == 1));
    assert_eq!(rows[boundary]["stage"], 2);

    let eval = dir.path().join("eval");
    let out = lad(&[
        "evaluate", "--checkpoint", p(&fx.checkpoint), "--anchors", p(&fx.anchors), "--kinds", "straight",
        "--eval-seeds", "1", "--runs", "1", "--out", p(&eval),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(eval.join("report.txt")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("1 ") && l.contains("all")));
    assert!(text.lines().any(|l| l.starts_with("mean") && l.contains("all")));
    assert!(!text.lines().any(|l| l.starts_with("2 ")));

    let rollout = eval.join("rollouts/run1/straight-1000.jsonl");
    let plots = dir.path().join("plots");
    let out = lad(&["replay", p(&rollout), "--out", p(&plots)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let plot_path = plots.join("straight-1000.plot.jsonl");
    let plot = fs::read_to_string(&plot_path).unwrap();
    for line in plot.lines().skip(1) {
        let f: Value = serde_json::from_str(line).unwrap();
        assert_eq!(f["polylines"].as_array().unwrap().len(), 8);
        assert_eq!(f["scores"].as_array().unwrap().len(), 8);
        assert_eq!(f["belief"].as_array().unwrap().len(), 6);
    }
    let again = dir.path().join("plots2");
    assert_eq!(code(&lad(&["replay", p(&plot_path), "--out", p(&again)])), 0);
    assert_eq!(fs::read_to_string(again.join("straight-1000.plot.jsonl")).unwrap(), plot);

    let text = fs::read_to_string(&rollout).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[4] = lines[4].replace("\"selected\"", "\"selekted\"");
    let corrupt = dir.path().join("corrupt.jsonl");
    fs::write(&corrupt, lines.join("\n")).unwrap();
    let out = lad(&["replay", p(&corrupt), "--out", p(&plots)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("frame 3"), "{}", stderr(&out));
}

#[test]
fn evaluation_reports_three_runs_by_default_and_rejects_mismatched_dims() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path());
    let eval = dir.path().join("eval");
    let out = lad(&[
        "evaluate", "--checkpoint", p(&fx.checkpoint), "--anchors", p(&fx.anchors), "--kinds", "straight",
        "--eval-seeds", "1", "--out", p(&eval),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    for run in ["1 ", "2 ", "3 ", "mean"] {
        assert!(text.lines().any(|l| l.starts_with(run) && l.contains("all")), "{run}: {text}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["runs"].as_array().unwrap().len(), 3);
    assert_eq!(report["header"]["config"]["train"]["model"]["decoder"]["d"], 32);

    let out = lad(&[
        "evaluate", "--checkpoint", p(&fx.checkpoint), "--anchors", p(&fx.anchors), "--d", "64", "--out",
        p(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("d: 32 vs 64"), "{}", stderr(&out));
}
