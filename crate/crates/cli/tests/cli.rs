use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn cloudhealth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudhealth"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn validate_accepts_the_default_model() {
    let out = cloudhealth(&["validate"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["valid"], true);
}

#[test]
fn validate_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let doc = r#"{"version":1,"nodes":[
        {"id":"G","name":"G","kind":"Goal","children":["Ghost"]},
        {"id":"m","name":"m","kind":"Metric"}
    ],"metrics":[]}"#;
    std::fs::write(&path, doc).unwrap();
    let out = cloudhealth(&["validate", "--model", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let report = stdout_json(&out);
    assert_eq!(report["valid"], false);
    assert!(report["violations"].as_array().unwrap().len() >= 2);
}

#[test]
fn resolve_performance() {
    let out = cloudhealth(&[
        "resolve",
        "--goals",
        "Performance",
        "--services",
        "web:container",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let res = stdout_json(&out);
    let metrics: Vec<&str> = res["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m.as_str().unwrap())
        .collect();
    for m in ["response_time", "latency", "throughput"] {
        assert!(metrics.contains(&m), "{m} missing");
    }
    let assignments = res["assignments"].as_array().unwrap();
    assert!(assignments
        .iter()
        .all(|a| a["service_id"] == "web" && a["layer"] == "Container"));

    // Pure: same input, same bytes.
    let again = cloudhealth(&[
        "resolve",
        "--goals",
        "Performance",
        "--services",
        "web:container",
    ]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn exit_codes() {
    assert_eq!(cloudhealth(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cloudhealth(&["resolve"]).status.code(), Some(1));
    assert_eq!(cloudhealth(&["--help"]).status.code(), Some(0));
    assert_eq!(
        cloudhealth(&["resolve", "--goals", "Nope"]).status.code(),
        Some(2)
    );
    assert_eq!(
        cloudhealth(&["resolve", "--goals", "Responsiveness"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cloudhealth(&[
            "resolve",
            "--goals",
            "Performance",
            "--services",
            "x:mainframe"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        cloudhealth(&[
            "snapshot",
            "--replay",
            "/definitely/not/here",
            "--goals",
            "Reliability"
        ])
        .status
        .code(),
        Some(3)
    );
}

#[test]
fn record_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.ndjson");
    let out = cloudhealth(&[
        "record",
        "--goals",
        "Reliability",
        "--services",
        "frontend",
        "--duration",
        "150000",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        out.stdout.is_empty(),
        "record writes its trace to the file only"
    );

    let replay = |window: &str| {
        cloudhealth(&[
            "snapshot",
            "--replay",
            trace.to_str().unwrap(),
            "--goals",
            "Reliability",
            "--window",
            window,
        ])
    };
    // The demo scenario takes frontend down at 120 s.
    let during = replay("118000,124000");
    assert_eq!(
        during.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&during.stderr)
    );
    let snap = stdout_json(&during);
    assert_eq!(snap["scores"]["Availability"]["state"], "Unhealthy");
    let before = stdout_json(&replay("100000,110000"));
    assert_eq!(before["scores"]["Availability"]["state"], "Healthy");
    assert_eq!(during.stdout, replay("118000,124000").stdout);

    assert_eq!(replay("5,5").status.code(), Some(2));
    std::fs::write(&trace, "not a sample\n").unwrap();
    assert_eq!(replay("0,10").status.code(), Some(2));
}

#[test]
fn serve_answers_http() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_cloudhealth"))
        .args(["serve", "--port", "0", "--speed", "100"])
        .env("RUST_LOG", "info")
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited early").unwrap();
        if let Some(rest) = line.split("listening on http://").nth(1) {
            break rest.trim().to_string();
        }
    };

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "GET /api/v1/catalog HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("heartbeat"));
}

#[test]
fn serve_rejects_bad_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, r#"{"seed": 1, "services": "nope"}"#).unwrap();
    let out = cloudhealth(&["serve", "--scenario", path.to_str().unwrap(), "--port", "0"]);
    assert_eq!(out.status.code(), Some(2));
}
