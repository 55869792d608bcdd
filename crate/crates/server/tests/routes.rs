use serde_json::{json, Value};

async fn spawn() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(docsieve_server::serve(listener));
    format!("http://{addr}")
}

#[tokio::test]
async fn health_is_ok() {
    let base = spawn().await;
    let v: Value = reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn malformed_body_yields_error_body() {
    let base = spawn().await;
    let r = reqwest::Client::new()
        .post(format!("{base}/v1/synth"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert!(r.status().is_client_error());
    let v: Value = r.json().await.unwrap();
    assert!(v["error"].as_str().is_some_and(|s| !s.is_empty()));
}

#[tokio::test]
async fn synth_writes_files_and_calibrate_consumes_them() {
    let base = spawn().await;
    let dir = tempfile::tempdir().unwrap();
    let http = reqwest::Client::new();
    let data = dir.path().join("data");
    let r: Value = http
        .post(format!("{base}/v1/synth"))
        .json(&json!({"spec": {"n_docs": 2000, "dim": 8, "seed": 3}, "output_dir": data}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(r["n_docs"], 2000);
    assert!(data.join("embeddings.json").exists());

    // Scores equal to the labels themselves separate the classes perfectly.
    let labels = std::fs::read_to_string(data.join("labels.jsonl")).unwrap();
    let mut scores = String::new();
    for line in labels.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let s = if v["label"].as_bool().unwrap() { 0.95 } else { 0.05 };
        scores.push_str(&format!("{{\"doc_id\":{},\"score\":{s}}}\n", v["doc_id"]));
    }
    let scores_path = dir.path().join("scores.jsonl");
    std::fs::write(&scores_path, scores).unwrap();
    let resp = http
        .post(format!("{base}/v1/calibrate"))
        .json(&json!({
            "scores": scores_path,
            "labels": data.join("labels.jsonl"),
            "output_dir": dir.path().join("cal"),
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let c: Value = resp.json().await.unwrap();
    assert!(c["estimated_accuracy"].as_f64().unwrap() >= 0.9);
    assert!(c["estimated_unfiltered_mass"].as_f64().unwrap() < 0.5);
}

#[tokio::test]
async fn unknown_route_is_404() {
    let base = spawn().await;
    let r = reqwest::get(format!("{base}/v1/nope")).await.unwrap();
    assert_eq!(r.status(), 404);
}
