use docsieve_client::{Client, ClientError};
use docsieve_core::api::{EvalRequest, SynthRequest};
use docsieve_core::pipeline::{OracleSource, PipelineConfig, RunSettings};
use docsieve_core::proxy::{Architecture, TrainingConfig};
use docsieve_core::synth::SynthSpec;

async fn spawn_server() -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(docsieve_server::serve(listener));
    Client::new(format!("http://{addr}/"))
}

fn small_settings() -> RunSettings {
    RunSettings {
        training: TrainingConfig {
            epochs_phase1: 3,
            epochs_phase2: 3,
            architecture: Architecture {
                hidden1: 16,
                hidden2: 16,
                latent: 8,
                projector_hidden: 8,
                projector_out: 8,
            },
            ..TrainingConfig::default()
        },
        ..RunSettings::default()
    }
}

#[tokio::test]
async fn health_reports_version() {
    let client = spawn_server().await;
    let h = client.health().await.unwrap();
    assert_eq!(h.status, "ok");
    assert!(!h.version.is_empty());
}

#[tokio::test]
async fn synth_run_eval_round_trip() {
    let client = spawn_server().await;
    let dir = tempfile::tempdir().unwrap();
    let data = client
        .synth(&SynthRequest {
            spec: SynthSpec {
                n_docs: 1500,
                dim: 8,
                separation: 5.0,
                ..SynthSpec::default()
            },
            output_dir: dir.path().join("data"),
        })
        .await
        .unwrap();
    assert_eq!(data.n_docs, 1500);
    assert_eq!(data.n_positives, 300);

    let config = PipelineConfig {
        embeddings: data.embeddings.clone(),
        query: data.query.clone(),
        oracle: OracleSource::Labels {
            path: data.labels.clone(),
        },
        output_dir: dir.path().join("run"),
        settings: small_settings(),
        ..PipelineConfig::default()
    };
    let run = client.run(&config).await.unwrap();
    assert!(run.report_path.exists());
    assert_eq!(run.report.n_docs, 1500);

    let metrics = client
        .eval(&EvalRequest {
            decisions: run.decisions,
            truth: data.labels,
        })
        .await
        .unwrap();
    assert_eq!(Some(metrics.accuracy), run.report.realized_accuracy);
    assert_eq!(metrics.n, run.report.n_online);

    let curve = client.sweep(&config).await.unwrap();
    assert_eq!(curve.len(), config.sweep.len());
}

#[tokio::test]
async fn missing_input_is_a_not_found_error() {
    let client = spawn_server().await;
    let err = client
        .eval(&EvalRequest {
            decisions: "/nonexistent/decisions.jsonl".into(),
            truth: "/nonexistent/labels.jsonl".into(),
        })
        .await
        .unwrap_err();
    match err {
        ClientError::Api { status, message } => {
            assert_eq!(status, 404);
            assert!(message.contains("decisions.jsonl"), "{message}");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[tokio::test]
async fn invalid_settings_are_rejected() {
    let client = spawn_server().await;
    let dir = tempfile::tempdir().unwrap();
    let err = client
        .synth(&SynthRequest {
            spec: SynthSpec {
                positive_fraction: 1.5,
                ..SynthSpec::default()
            },
            output_dir: dir.path().to_path_buf(),
        })
        .await
        .unwrap_err();
    assert!(matches!(err, ClientError::Api { status: 422, .. }), "{err:?}");
}

#[tokio::test]
async fn unreachable_server_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = Client::new(format!("http://{addr}")).health().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport { .. }), "{err:?}");
}
