use grounding_core::benchmark::{check_relation, TaskConfig};
use grounding_core::parser::{parse_grammar, reply_for, LlmClientConfig, ReplayTransport};
use grounding_core::estimator::PredicateTable;
use grounding_core::polar::{PolarParams, Point};
use grounding_core::scene::{build_scene_graph, BoundingBox, ObjectNode, SceneGraph};
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::Command;

const CYAN: &str = "put the cyan bowl above the chocolate and left of the silver spoon";

fn scene() -> SceneGraph {
    let n = |id, name: &str, x: f64, y: f64| {
        ObjectNode::new(id, name, Point::new(x, y), BoundingBox::new(x, y, 0.1, 0.1)).unwrap()
    };
    build_scene_graph(vec![n(0, "chocolate", 0.3, 0.3), n(1, "silver spoon", 0.7, 0.8), n(2, "cyan bowl", 0.8, 0.2)], 1.5)
        .unwrap()
}

fn write_scene(dir: &Path) -> PathBuf {
    let p = dir.join("scene.json");
    std::fs::write(&p, scene().to_json_string()).unwrap();
    p
}

/// Runs the binary and returns (exit code, stdout parsed as JSON).
fn grounder(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_grounder")).args(args).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let v = serde_json::from_str(stdout.trim()).unwrap_or_else(|e| panic!("{e}: {stdout:?} / {}", String::from_utf8_lossy(&out.stderr)));
    (out.status.code().unwrap(), v)
}

fn point(v: &Value) -> Point {
    Point::new(v[0].as_f64().unwrap(), v[1].as_f64().unwrap())
}

#[test]
fn cyan_bowl_grounds_into_both_relations() {
    let dir = tempfile::tempdir().unwrap();
    let scene_path = write_scene(dir.path());
    let (code, v) = grounder(&["ground", "--scene", scene_path.to_str().unwrap(), "--instruction", CYAN]);
    assert_eq!(code, 0, "{v}");
    let x = point(&v["location"]);
    let s = scene();
    let cfg = TaskConfig::test(0);
    assert!(check_relation(x, s.node(0).unwrap(), "above", &cfg).unwrap(), "{x:?}");
    assert!(check_relation(x, s.node(1).unwrap(), "left", &cfg).unwrap(), "{x:?}");
    assert_eq!(v["action"], "put");
    assert_eq!(v["source"], "cyan bowl");
    assert_eq!(v["per_relation"].as_array().unwrap().len(), 2);
    assert_eq!(v["mixtures"][0].as_array().unwrap().len(), 3);
    assert!(v["score"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_scene_is_an_io_error() {
    let (code, v) = grounder(&["ground", "--scene", "/definitely/not/here.json", "--instruction", CYAN]);
    assert_eq!(code, grounding_cli::EXIT_FILE as i32);
    assert_eq!(v["kind"], "io");
    assert!(v["message"].as_str().unwrap().contains("here.json"));
}

#[test]
fn parse_failure_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let scene_path = write_scene(dir.path());
    let (code, v) = grounder(&["ground", "--scene", scene_path.to_str().unwrap(), "--instruction", "frobnicate the bluh"]);
    assert_eq!(code, grounding_cli::EXIT_PARSE as i32);
    assert_eq!(v["kind"], "parse");
    assert_eq!(v["detail"]["token"], "frobnicate");
}

/// A table whose "close" and "far" rings around an object do not overlap.
fn strict_table() -> PredicateTable {
    let mut t = PredicateTable::canonical();
    t.entries.insert("close".into(), PolarParams::new(1.0, 1e-4, 0.0, 0.0).unwrap());
    t.entries.insert("far".into(), PolarParams::new(4.0, 1e-4, 0.0, 0.0).unwrap());
    t
}

#[test]
fn estimation_failure_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let s = build_scene_graph(
        vec![ObjectNode::new(0, "red box", Point::new(0.5, 0.5), BoundingBox::new(0.5, 0.5, 0.1, 0.1)).unwrap()],
        1.5,
    )
    .unwrap();
    let scene_path = dir.path().join("one.json");
    std::fs::write(&scene_path, s.to_json_string()).unwrap();
    let table = dir.path().join("strict.json");
    std::fs::write(&table, strict_table().to_json_string()).unwrap();
    let (code, v) = grounder(&[
        "ground",
        "--scene",
        scene_path.to_str().unwrap(),
        "--instruction",
        "move close to the red box and far from the red box",
        "--table",
        table.to_str().unwrap(),
    ]);
    assert_eq!(code, grounding_cli::EXIT_ESTIMATION as i32, "{v}");
    assert_eq!(v["kind"], "contradiction");
}

#[test]
fn coarse_and_fine_grids_agree_within_a_coarse_cell() {
    let dir = tempfile::tempdir().unwrap();
    let scene_path = write_scene(dir.path());
    let s = scene_path.to_str().unwrap();
    let (_, a) = grounder(&["ground", "--scene", s, "--instruction", CYAN, "--grid", "64"]);
    let (_, b) = grounder(&["ground", "--scene", s, "--instruction", CYAN, "--grid", "256"]);
    let (a, b) = (point(&a["location"]), point(&b["location"]));
    assert!((a.x - b.x).abs() <= 1.0 / 64.0 && (a.y - b.y).abs() <= 1.0 / 64.0, "{a:?} vs {b:?}");
}

#[test]
fn learned_mode_without_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene_path = write_scene(dir.path());
    let (code, v) = grounder(&["ground", "--scene", scene_path.to_str().unwrap(), "--instruction", CYAN, "--mode", "learned"]);
    assert_eq!(code, grounding_cli::EXIT_USAGE as i32);
    assert_eq!(v["kind"], "config");
}

#[test]
fn llm_parser_from_a_replay_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let scene_path = write_scene(dir.path());
    let config = LlmClientConfig::new("replay", "parser");
    let mut t = ReplayTransport::default();
    t.insert(&config.request_for(CYAN), reply_for(&parse_grammar(CYAN).unwrap()));
    let transcript = dir.path().join("transcript.json");
    std::fs::write(&transcript, serde_json::to_string(&t.records()).unwrap()).unwrap();
    let s = scene_path.to_str().unwrap();
    let (code, llm) = grounder(&["ground", "--scene", s, "--instruction", CYAN, "--parser", "llm", "--replay", transcript.to_str().unwrap()]);
    assert_eq!(code, 0, "{llm}");
    let (_, grammar) = grounder(&["ground", "--scene", s, "--instruction", CYAN]);
    assert_eq!(llm, grammar);

    let (code, v) = grounder(&[
        "ground",
        "--scene",
        s,
        "--instruction",
        "put the cyan bowl left of the chocolate",
        "--parser",
        "llm",
        "--replay",
        transcript.to_str().unwrap(),
    ]);
    assert_eq!(code, grounding_cli::EXIT_PARSE as i32);
    assert_eq!(v["kind"], "llm_transport");
}

#[test]
fn bench_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let (code, v) = grounder(&["bench", "--episodes", "12", "--mode", "fitted", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{v}");
        assert_eq!(v["episodes"], 12);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report: Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    assert_eq!(report["by_relation_count"].as_array().unwrap().len(), 6);
    assert!(report.get("mean_wall_ms").is_none());
}

#[test]
fn generate_fit_train_and_ground_learned() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (code, _) = grounder(&["generate", "--count", "24", "--seed", "5", "--out", &d("train.jsonl")]);
    assert_eq!(code, 0);

    let (code, v) = grounder(&["fit", "--samples", &d("train.jsonl"), "--out", &d("table.json")]);
    assert_eq!(code, 0, "{v}");
    let (code, v) = grounder(&["bench", "--episodes", "5", "--table", &d("table.json"), "--out", &d("fitted.json")]);
    assert_eq!(code, 0, "{v}");

    for out in ["m1.json", "m2.json"] {
        let (code, v) = grounder(&["train", "--data", &d("train.jsonl"), "--epochs", "2", "--lambda", "0.5", "--out", &d(out)]);
        assert_eq!(code, 0, "{v}");
        assert!(v["final_loss"].as_f64().unwrap() < v["initial_loss"].as_f64().unwrap());
    }
    assert_eq!(std::fs::read(d("m1.json")).unwrap(), std::fs::read(d("m2.json")).unwrap());

    let scene_path = write_scene(dir.path());
    let (code, v) = grounder(&[
        "ground",
        "--scene",
        scene_path.to_str().unwrap(),
        "--instruction",
        CYAN,
        "--mode",
        "learned",
        "--model",
        &d("m1.json"),
    ]);
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["mixtures"].as_array().unwrap().len(), 2);
    let (code, v) = grounder(&["bench", "--episodes", "4", "--mode", "learned", "--model", &d("m1.json"), "--out", &d("learned.json")]);
    assert_eq!(code, 0, "{v}");
}

#[test]
fn malformed_table_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("table.json");
    std::fs::write(&p, "{\"format\": \"something else\", \"entries\": {}}").unwrap();
    let (code, v) = grounder(&["bench", "--episodes", "1", "--table", p.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(code, grounding_cli::EXIT_FILE as i32);
    assert_eq!(v["kind"], "format");
}
