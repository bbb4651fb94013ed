use grounding_cli::commands::{LlmArgs, ServeArgs};
use grounding_cli::server::{build_store, router};
use grounding_core::benchmark::{check_relation, TaskConfig};
use grounding_core::estimator::PredicateTable;
use grounding_core::polar::{PolarParams, Point};
use grounding_core::scene::{build_scene_graph, BoundingBox, ObjectNode, SceneGraph};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::sync::Arc;

fn scene(size: f64) -> SceneGraph {
    let n = |id, name: &str, x: f64, y: f64| {
        ObjectNode::new(id, name, Point::new(x, y), BoundingBox::new(x, y, size, size)).unwrap()
    };
    build_scene_graph(vec![n(0, "red box", 0.55, 0.6), n(1, "tree", 0.25, 0.4), n(2, "blue cup", 0.85, 0.15)], 1.5).unwrap()
}

fn args(journal: Option<PathBuf>) -> ServeArgs {
    ServeArgs {
        port: 0,
        host: "127.0.0.1".into(),
        model: None,
        table: None,
        journal,
        resolution: 128,
        llm: LlmArgs { replay: None, llm_model: "parser".into() },
        llm_fallback: false,
    }
}

/// Serves on an ephemeral port from a background runtime; returns the base URL.
fn start(args: ServeArgs) -> String {
    let store = Arc::new(build_store(&args).unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(store)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// (status, body) for any status code.
fn call(req: ureq::Request, body: Option<Value>) -> (u16, Value) {
    let r = match body {
        Some(b) => req.send_json(b),
        None => req.call(),
    };
    let resp = match r {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("{e}"),
    };
    let status = resp.status();
    let text = resp.into_string().unwrap();
    (status, if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap() })
}

fn create(base: &str, s: &SceneGraph) -> String {
    let (status, v) = call(ureq::post(&format!("{base}/sessions")), Some(json!({ "scene": s.to_json() })));
    assert_eq!(status, 201, "{v}");
    v["id"].as_str().unwrap().to_string()
}

fn step(base: &str, id: &str, text: &str) -> (u16, Value) {
    call(ureq::post(&format!("{base}/sessions/{id}/expressions")), Some(json!({ "text": text, "mode": "fitted" })))
}

fn point(v: &Value) -> Point {
    Point::new(v[0].as_f64().unwrap(), v[1].as_f64().unwrap())
}

#[test]
fn incremental_session_over_http() {
    let base = start(args(None));
    let s = scene(0.1);
    let id = create(&base, &s);

    let (status, v) = call(ureq::get(&format!("{base}/sessions/{id}/argmax")), None);
    assert_eq!(status, 200);
    assert_eq!(v["steps"], 0);

    let (status, first) = step(&base, &id, "left of the red box");
    assert_eq!(status, 200, "{first}");
    assert_eq!(first["field"]["values"].as_array().unwrap().len(), 128 * 128);
    assert_eq!(first["field"]["grid"]["resolution"], 128);
    assert_eq!(first["components"][0].as_array().unwrap().len(), 3);

    let (status, second) = step(&base, &id, "close to the tree");
    assert_eq!(status, 200, "{second}");
    let x = point(&second["argmax"]);
    let cfg = TaskConfig::test(0);
    assert!(check_relation(x, s.node(0).unwrap(), "left", &cfg).unwrap(), "{x:?}");
    assert!(check_relation(x, s.node(1).unwrap(), "close", &cfg).unwrap(), "{x:?}");

    // A rejected expression leaves the session as it was.
    let (status, err) = step(&base, &id, "frobnicate the bluh");
    assert_eq!(status, 400);
    assert_eq!(err["kind"], "parse");
    assert_eq!(err["detail"]["token"], "frobnicate");
    let (_, am) = call(ureq::get(&format!("{base}/sessions/{id}/argmax")), None);
    assert_eq!(am["steps"], 2);
    assert_eq!(point(&am["argmax"]), x);

    let (status, f) = call(ureq::get(&format!("{base}/sessions/{id}/field?resolution=32")), None);
    assert_eq!(status, 200);
    assert_eq!(f["values"].as_array().unwrap().len(), 32 * 32);
    let (status, f) = call(ureq::get(&format!("{base}/sessions/{id}/field")), None);
    assert_eq!(status, 200);
    assert_eq!(f["values"], second["field"]["values"]);
    let (status, e) = call(ureq::get(&format!("{base}/sessions/{id}/field?resolution=8")), None);
    assert_eq!(status, 400);
    assert_eq!(e["kind"], "config");

    let (status, d) = call(ureq::get(&format!("{base}/sessions/{id}")), None);
    assert_eq!(status, 200);
    assert_eq!(d["expressions"][1]["text"], "close to the tree");

    let (status, _) = call(ureq::delete(&format!("{base}/sessions/{id}")), None);
    assert_eq!(status, 204);
    let (status, e) = step(&base, &id, "left of the tree");
    assert_eq!(status, 404);
    assert_eq!(e["kind"], "not_found");
    assert_eq!(e["detail"]["id"], id.as_str());
}

#[test]
fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("strict.json");
    let mut strict = PredicateTable::canonical();
    strict.entries.insert("close".into(), PolarParams::new(1.0, 1e-4, 0.0, 0.0).unwrap());
    strict.entries.insert("far".into(), PolarParams::new(4.0, 1e-4, 0.0, 0.0).unwrap());
    std::fs::write(&table, strict.to_json_string()).unwrap();
    let base = start(ServeArgs { table: Some(table), ..args(None) });
    let one = build_scene_graph(
        vec![ObjectNode::new(0, "red box", Point::new(0.5, 0.5), BoundingBox::new(0.5, 0.5, 0.1, 0.1)).unwrap()],
        1.5,
    )
    .unwrap();
    let id = create(&base, &one);
    let (status, _) = step(&base, &id, "close to the red box");
    assert_eq!(status, 200);
    let (status, e) = step(&base, &id, "far from the red box");
    assert_eq!(status, 409, "{e}");
    assert_eq!(e["kind"], "contradiction");
    let (_, am) = call(ureq::get(&format!("{base}/sessions/{id}/argmax")), None);
    assert_eq!(am["steps"], 1);

    let (status, e) = call(
        ureq::post(&format!("{base}/sessions/{id}/expressions")),
        Some(json!({ "text": "left of the tree", "mode": "learned" })),
    );
    assert_eq!(status, 400);
    assert_eq!(e["kind"], "config");

    let (status, e) = call(ureq::post(&format!("{base}/sessions")), Some(json!({ "scene": { "nodes": 3 } })));
    assert_eq!(status, 400, "{e}");
    let (status, e) = call(ureq::post(&format!("{base}/sessions")), Some(json!({ "stage": {} })));
    assert_eq!(status, 400);
    assert_eq!(e["kind"], "json");
    let (status, e) = call(ureq::get(&format!("{base}/nowhere")), None);
    assert_eq!(status, 404);
    assert_eq!(e["kind"], "not_found");
}

#[test]
fn journal_restores_sessions_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("sessions.jsonl");
    let base = start(args(Some(journal.clone())));
    let id = create(&base, &scene(0.1));
    step(&base, &id, "left of the red box");
    step(&base, &id, "and close to the tree");
    let (_, before) = call(ureq::get(&format!("{base}/sessions/{id}/field")), None);

    let base = start(args(Some(journal)));
    let (status, after) = call(ureq::get(&format!("{base}/sessions/{id}/field")), None);
    assert_eq!(status, 200);
    assert_eq!(before, after);
    let other = create(&base, &scene(0.1));
    assert_ne!(other, id);
}

#[test]
fn racing_steps_match_a_sequential_order() {
    let base = start(args(None));
    let s = scene(0.1);
    let id = create(&base, &s);
    let texts = ["left of the red box", "close to the tree", "below the red box"];
    let handles: Vec<_> = texts
        .iter()
        .map(|t| {
            let (base, id, t) = (base.clone(), id.clone(), t.to_string());
            std::thread::spawn(move || assert_eq!(step(&base, &id, &t).0, 200))
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let (_, d) = call(ureq::get(&format!("{base}/sessions/{id}")), None);
    let order: Vec<String> = d["expressions"].as_array().unwrap().iter().map(|e| e["text"].as_str().unwrap().into()).collect();
    assert_eq!(order.len(), 3);
    let (_, raced) = call(ureq::get(&format!("{base}/sessions/{id}/field")), None);

    let seq = create(&base, &s);
    for t in &order {
        step(&base, &seq, t);
    }
    let (_, sequential) = call(ureq::get(&format!("{base}/sessions/{seq}/field")), None);
    assert_eq!(raced, sequential);
}
