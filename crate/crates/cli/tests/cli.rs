use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pidgraph(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pidgraph"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn pidgraph_env(args: &[&str], cwd: &Path, env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pidgraph"));
    c.args(args).current_dir(cwd);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn synth(dir: &Path, layout: &str) {
    let o = pidgraph(&["synth", "--layout", layout, "--out", "fx"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn extract(dir: &Path) -> Output {
    pidgraph(&["extract", "fx/plan.png", "--annotations", "fx/annotations/plan.json", "--out", "run"], dir)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn minimal_fixture_gives_one_edge() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "minimal");
    let o = extract(tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let topo = read_json(&tmp.path().join("run/topology.json"));
    assert_eq!(topo["edges"].as_array().unwrap().len(), 1);
    assert_eq!(topo["nodes"].as_array().unwrap().len(), 2);
    let manifest = read_json(&tmp.path().join("run/manifest.json"));
    assert_eq!(manifest["summary"]["edges"], 1);
}

#[test]
fn pump_tee_turtle_and_overlay() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "pump-tee");
    assert_eq!(code(&extract(tmp.path())), 0);
    let ttl = std::fs::read_to_string(tmp.path().join("run/graph.ttl")).unwrap();
    assert!(ttl.contains("rdf:type brick:Pump"));
    assert_eq!(ttl.matches("rdf:type brick:Valve").count(), 2);
    assert!(ttl.matches("pid:connectedTo").count() >= 2);
    assert!(ttl.contains("<https://example.org/plant/Pump-4> pid:connectedTo <https://example.org/plant/Valve-1>"));
    assert!(ttl.contains("<https://example.org/plant/Pump-4> pid:connectedTo <https://example.org/plant/Valve-2>"));

    let o = pidgraph(&["overlay", "fx/plan.png", "--stage", "run", "--out", "overlay.svg"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(tmp.path().join("overlay.svg")).unwrap();
    assert_eq!(svg.matches("<rect ").count(), 4);
    assert_eq!(svg.matches("<circle ").count(), 1);
    assert!(svg.contains(r#"data-degree="3""#));
    assert!(svg.matches(r#"class="edge""#).count() >= 2);
    assert!(svg.matches(r#"class="segment""#).count() >= 2);
}

#[test]
fn truth_scores_itself_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "pump-tee");
    assert_eq!(code(&extract(tmp.path())), 0);
    std::fs::create_dir(tmp.path().join("pred")).unwrap();
    std::fs::copy(tmp.path().join("run/topology.json"), tmp.path().join("pred/plan.json")).unwrap();
    let o = pidgraph(&["eval", "--pred", "pred", "--truth", "fx/truth", "--out", "report"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&tmp.path().join("report/report.json"));
    assert_eq!(r["counts"]["fp"], 0);
    assert_eq!(r["counts"]["fn"], 0);
    assert_eq!(r["metrics"]["recall"], 1.0);
}

/// Topology JSON for `n` symbols with the given edges (pair indices).
fn topology(plan: &str, n: usize, edges: &[(usize, usize)]) -> Value {
    let id = |i: usize| format!("Valve-{:02}", i + 1);
    let nodes: Vec<Value> = (0..n)
        .map(|i| json!({"id": id(i), "class": "Valve", "bbox": [i as f64 * 40.0, 0.0, i as f64 * 40.0 + 30.0, 30.0]}))
        .collect();
    let mut e: Vec<(String, String)> = edges.iter().map(|&(a, b)| (id(a), id(b))).collect();
    e.sort();
    json!({"plan": plan, "nodes": nodes, "edges": e})
}

#[test]
fn reported_counts_through_eval() {
    // 30 + 16 + 5 + 2 symbols give 435 + 120 + 10 + 1 = 566 candidate pairs
    let tmp = tempfile::tempdir().unwrap();
    let (pred, truth) = (tmp.path().join("pred"), tmp.path().join("truth"));
    std::fs::create_dir(&pred).unwrap();
    std::fs::create_dir(&truth).unwrap();
    let pairs: Vec<(usize, usize)> = (0..30).flat_map(|a| (a + 1..30).map(move |b| (a, b))).collect();
    let true_edges = &pairs[..155];
    // 116 hits, 39 misses, 11 false alarms
    let pred_edges: Vec<(usize, usize)> = pairs[..116].iter().chain(&pairs[155..166]).copied().collect();
    let write =
        |dir: &Path, name: &str, v: Value| std::fs::write(dir.join(format!("{name}.json")), v.to_string()).unwrap();
    write(&truth, "a", topology("a", 30, true_edges));
    write(&pred, "a", topology("a", 30, &pred_edges));
    for (name, n) in [("b", 16), ("c", 5), ("d", 2)] {
        write(&truth, name, topology(name, n, &[]));
        write(&pred, name, topology(name, n, &[]));
    }
    let o =
        pidgraph(&["eval", "--pred", "pred", "--truth", "truth", "--mode", "connections", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&tmp.path().join("r/report.json"));
    assert_eq!(r["counts"], json!({"tp": 116, "fp": 11, "fn": 39, "tn": 400}));
    let m = &r["metrics"];
    for (k, want) in
        [("recall", 0.7484), ("precision", 0.9134), ("accuracy", 0.9117), ("specificity", 0.9732), ("npv", 0.9112)]
    {
        assert!((m[k].as_f64().unwrap() - want).abs() < 5e-5, "{k}: {}", m[k]);
    }
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("0.7484"), "{table}");
}

#[test]
fn missing_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "minimal");
    let o = pidgraph(&["--config", "nope.toml", "extract", "fx/plan.png", "--out", "run"], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "minimal");
    std::fs::write(tmp.path().join("bad.toml"), "[hough]\nvotez = 3\n").unwrap();
    let o = pidgraph(&["--config", "bad.toml", "extract", "fx/plan.png", "--out", "run"], tmp.path());
    assert_eq!(code(&o), 1);
    let o = pidgraph_env(&["extract", "fx/plan.png", "--out", "run"], tmp.path(), &[("PIDGRAPH__HOUGH__VOTES", "1")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn env_override_reaches_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "minimal");
    let run = |out: &str, env: &[(&str, &str)]| {
        let o = pidgraph_env(
            &["extract", "fx/plan.png", "--annotations", "fx/annotations/plan.json", "--out", out],
            tmp.path(),
            env,
        );
        assert_eq!(code(&o), 0);
        read_json(&tmp.path().join(out).join("manifest.json"))["config_hash"].clone()
    };
    assert_ne!(run("a", &[]), run("b", &[("PIDGRAPH__ATTACH__INFLATE", "4.0")]));
}

#[test]
fn input_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "minimal");
    assert_eq!(code(&pidgraph(&["extract", "missing.png", "--out", "run"], tmp.path())), 2);
    // annotations mode without a file
    assert_eq!(
        code(&pidgraph(&["extract", "fx/plan.png", "--detector-mode", "annotations", "--out", "run"], tmp.path())),
        2
    );
    // stems differ between prediction and truth
    std::fs::create_dir(tmp.path().join("pred")).unwrap();
    std::fs::write(tmp.path().join("pred/other.json"), "{}").unwrap();
    assert_eq!(code(&pidgraph(&["eval", "--pred", "pred", "--truth", "fx/truth"], tmp.path())), 2);
    // overlay without stage outputs
    assert_eq!(code(&pidgraph(&["overlay", "fx/plan.png", "--stage", "nowhere", "--out", "o.svg"], tmp.path())), 2);
}

#[test]
fn template_mode_runs_without_annotations() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "pump-tee");
    let o = pidgraph(&["extract", "fx/plan.png", "--detector-mode", "templates", "--out", "run"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let det = read_json(&tmp.path().join("run/detections.json"));
    let classes: Vec<&str> = det["symbols"].as_array().unwrap().iter().map(|s| s["class"].as_str().unwrap()).collect();
    assert!(classes.contains(&"Pump") && classes.contains(&"Valve"), "{classes:?}");
}
