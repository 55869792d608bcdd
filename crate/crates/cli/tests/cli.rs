use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn server() -> (tokio::runtime::Runtime, String) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let addr = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(docsieve_server::serve(listener));
        addr
    });
    (rt, format!("http://{addr}"))
}

fn docsieve(server: &str, cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docsieve"))
        .arg("--server")
        .arg(server)
        .args(args)
        .current_dir(cwd)
        .env_remove("DOCSIEVE_SERVER")
        .output()
        .unwrap()
}

fn json_out(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

const SMALL: [&str; 12] = [
    "--set",
    "training.epochs_phase1=3",
    "--set",
    "training.epochs_phase2=3",
    "--set",
    "training.architecture.hidden1=16",
    "--set",
    "training.architecture.hidden2=16",
    "--set",
    "training.architecture.latent=8",
    "--set",
    "training.architecture.projector_hidden=8",
];

#[test]
fn health_prints_status() {
    let (_rt, url) = server();
    let dir = tempfile::tempdir().unwrap();
    let v = json_out(&docsieve(&url, dir.path(), &["health"]));
    assert_eq!(v["status"], "ok");
}

#[test]
fn synth_run_eval_with_relative_paths() {
    let (_rt, url) = server();
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let s = json_out(&docsieve(
        &url,
        cwd,
        &["synth", "--output-dir", "data", "--n-docs", "1500", "--dim", "8", "--separation", "5", "--seed", "2"],
    ));
    assert_eq!(s["n_docs"], 1500);
    assert!(cwd.join("data/embeddings.json").exists());

    std::fs::write(cwd.join("run.json"), r#"{"accuracy_target": 0.85, "seed": 4}"#).unwrap();
    let mut args = vec![
        "run",
        "--config",
        "run.json",
        "--embeddings",
        "data/embeddings.json",
        "--query",
        "data/query.json",
        "--labels",
        "data/labels.jsonl",
        "--output-dir",
        "out",
        "--seed",
        "5",
        "--set",
        "training.architecture.projector_out=8",
    ];
    args.extend(SMALL);
    let r = json_out(&docsieve(&url, cwd, &args));
    assert_eq!(r["report"]["accuracy_target"], 0.85);
    assert_eq!(r["report"]["seed"], 5);
    assert!(cwd.join("out/report.json").exists());
    assert!(cwd.join("out/decisions.jsonl").exists());

    let m = json_out(&docsieve(
        &url,
        cwd,
        &["eval", "--decisions", "out/decisions.jsonl", "--truth", "data/labels.jsonl"],
    ));
    assert_eq!(m["accuracy"], r["report"]["realized_accuracy"]);
}

#[test]
fn sweep_accepts_alpha_list() {
    let (_rt, url) = server();
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    json_out(&docsieve(
        &url,
        cwd,
        &["synth", "--output-dir", "d", "--n-docs", "1200", "--dim", "8", "--separation", "5"],
    ));
    let mut args = vec![
        "sweep",
        "--embeddings",
        "d/embeddings.json",
        "--query",
        "d/query.json",
        "--labels",
        "d/labels.jsonl",
        "--output-dir",
        "o",
        "--alphas",
        "0.8,0.9,0.95",
        "--set",
        "training.architecture.projector_out=8",
    ];
    args.extend(SMALL);
    let v = json_out(&docsieve(&url, cwd, &args));
    let alphas: Vec<f64> = v.as_array().unwrap().iter().map(|p| p["alpha"].as_f64().unwrap()).collect();
    assert_eq!(alphas, vec![0.8, 0.9, 0.95]);
}

#[test]
fn missing_fields_fail_before_contacting_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let out = docsieve("http://127.0.0.1:9", dir.path(), &["eval", "--decisions", "x.jsonl"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incomplete or invalid request"), "{err}");
}

#[test]
fn unreachable_server_exits_non_zero() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let out = docsieve(&url, dir.path(), &["health"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&url));
}

#[test]
fn server_errors_are_reported() {
    let (_rt, url) = server();
    let dir = tempfile::tempdir().unwrap();
    let out = docsieve(&url, dir.path(), &["eval", "--decisions", "nope.jsonl", "--truth", "nope.jsonl"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("404") && err.contains("nope.jsonl"), "{err}");
}
