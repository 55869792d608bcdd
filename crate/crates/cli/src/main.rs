use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use docsieve_cli::Request;
use docsieve_client::{Client, DEFAULT_SERVER};
use docsieve_core::api::{CalibrateRequest, EvalRequest, ScoreRequest, SynthRequest, TrainRequest};
use docsieve_core::pipeline::PipelineConfig;

#[derive(Parser)]
#[command(name = "docsieve", version, about = "Filter document collections with a trained proxy and an oracle cascade")]
struct Cli {
    /// Base URL of a running docsieve-server.
    #[arg(long, global = true, env = "DOCSIEVE_SERVER", default_value = DEFAULT_SERVER)]
    server: String,

    #[command(subcommand)]
    command: Command,
}

/// Shared by every subcommand: a JSON request document plus raw overrides.
#[derive(Args)]
struct Common {
    /// JSON file with the request body; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override any request field, e.g. `--set training.epochs_phase1=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    assignments: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check that the service is up.
    Health,
    /// Generate a synthetic workload.
    Synth(SynthArgs),
    /// Train a proxy on labeled documents.
    Train(TrainArgs),
    /// Score documents with a trained proxy.
    Score(ScoreArgs),
    /// Calibrate score distributions and pick thresholds.
    Calibrate(CalibrateArgs),
    /// Run the full pipeline.
    Run(RunArgs),
    /// Score cascade decisions against ground truth.
    Eval(EvalArgs),
    /// Run the pipeline and report the accuracy/reduction tradeoff over targets.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Where to write the trained proxy manifest.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs_phase1: Option<usize>,
    #[arg(long)]
    epochs_phase2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    proxy: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Score only the ids in this label file.
    #[arg(long)]
    only: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    calibration_fraction: Option<f64>,
    #[arg(long)]
    accuracy_target: Option<f64>,
    #[arg(long)]
    n_bins: Option<usize>,
    #[arg(long)]
    smoothing_window: Option<usize>,
    /// Disable jitter in the reconstruction.
    #[arg(long)]
    no_jitter: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    /// Answer oracle requests from this label file.
    #[arg(long, conflicts_with = "oracle_url")]
    labels: Option<PathBuf>,
    /// Chat-completions endpoint base URL (e.g. http://host/v1) used as the oracle.
    #[arg(long, requires = "texts")]
    oracle_url: Option<String>,
    #[arg(long, requires = "oracle_url")]
    oracle_model: Option<String>,
    /// Environment variable holding the oracle's API key.
    #[arg(long, requires = "oracle_url")]
    oracle_api_key_env: Option<String>,
    /// JSON Lines of {"doc_id","text"} shown to the oracle.
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    calibration_fraction: Option<f64>,
    #[arg(long)]
    accuracy_target: Option<f64>,
    #[arg(long)]
    n_bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_concurrent: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Comma-separated accuracy targets.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn base(common: &Common) -> Result<Request> {
    Request::new(common.config.as_deref())
}

fn synth_request(a: &SynthArgs) -> Result<SynthRequest> {
    let mut r = base(&a.common)?;
    r.set_path("output_dir", a.output_dir.as_deref())?
        .set_opt("spec.n_docs", a.n_docs)?
        .set_opt("spec.dim", a.dim)?
        .set_opt("spec.positive_fraction", a.positive_fraction)?
        .set_opt("spec.separation", a.separation)?
        .set_opt("spec.noise_sigma", a.noise_sigma)?
        .set_opt("spec.seed", a.seed)?
        .assign(&a.common.assignments)?
        .resolve_paths(&["output_dir"])?;
    r.build()
}

fn train_request(a: &TrainArgs) -> Result<TrainRequest> {
    let mut r = base(&a.common)?;
    r.set_path("embeddings", a.embeddings.as_deref())?
        .set_path("query", a.query.as_deref())?
        .set_path("labels", a.labels.as_deref())?
        .set_path("output", a.output.as_deref())?
        .set_opt("training.epochs_phase1", a.epochs_phase1)?
        .set_opt("training.epochs_phase2", a.epochs_phase2)?
        .set_opt("training.seed", a.seed)?
        .assign(&a.common.assignments)?
        .resolve_paths(&["embeddings", "query", "labels", "output"])?;
    r.build()
}

fn score_request(a: &ScoreArgs) -> Result<ScoreRequest> {
    let mut r = base(&a.common)?;
    r.set_path("embeddings", a.embeddings.as_deref())?
        .set_path("query", a.query.as_deref())?
        .set_path("proxy", a.proxy.as_deref())?
        .set_path("output", a.output.as_deref())?
        .set_path("only", a.only.as_deref())?
        .assign(&a.common.assignments)?
        .resolve_paths(&["embeddings", "query", "proxy", "output", "only"])?;
    r.build()
}

fn calibrate_request(a: &CalibrateArgs) -> Result<CalibrateRequest> {
    let mut r = base(&a.common)?;
    r.set_path("scores", a.scores.as_deref())?
        .set_path("labels", a.labels.as_deref())?
        .set_path("output_dir", a.output_dir.as_deref())?
        .set_opt("calibration_fraction", a.calibration_fraction)?
        .set_opt("accuracy_target", a.accuracy_target)?
        .set_opt("n_bins", a.n_bins)?
        .set_opt("reconstruction.smoothing_window", a.smoothing_window)?
        .set_opt("reconstruction.jitter", a.no_jitter.then_some(false))?
        .set_opt("seed", a.seed)?
        .assign(&a.common.assignments)?
        .resolve_paths(&["scores", "labels", "output_dir"])?;
    r.build()
}

fn pipeline_request(a: &PipelineArgs, alphas: Option<&[f64]>) -> Result<PipelineConfig> {
    let mut r = base(&a.common)?;
    r.set_path("embeddings", a.embeddings.as_deref())?
        .set_path("query", a.query.as_deref())?
        .set_path("truth", a.truth.as_deref())?
        .set_path("output_dir", a.output_dir.as_deref())?
        .set_opt("train_fraction", a.train_fraction)?
        .set_opt("calibration_fraction", a.calibration_fraction)?
        .set_opt("accuracy_target", a.accuracy_target)?
        .set_opt("n_bins", a.n_bins)?
        .set_opt("seed", a.seed)?
        .set_opt("max_concurrent", a.max_concurrent)?
        .set_opt("sweep", alphas.map(|v| json!(v)))?;
    if let Some(labels) = &a.labels {
        r.set("oracle", json!({"kind": "labels"}))?.set_path("oracle.path", Some(labels))?;
    }
    if let Some(url) = &a.oracle_url {
        r.set("oracle", json!({"kind": "http", "endpoint": {"endpoint": {"base_url": url, "model": "default"}}}))?
            .set_path("oracle.texts", a.texts.as_deref())?
            .set_opt("oracle.endpoint.endpoint.model", a.oracle_model.clone())?
            .set_opt("oracle.endpoint.endpoint.api_key_env", a.oracle_api_key_env.clone())?;
    }
    r.assign(&a.common.assignments)?
        .resolve_paths(&["embeddings", "query", "truth", "output_dir", "oracle.path", "oracle.texts"])?;
    r.build()
}

fn eval_request(a: &EvalArgs) -> Result<EvalRequest> {
    let mut r = base(&a.common)?;
    r.set_path("decisions", a.decisions.as_deref())?
        .set_path("truth", a.truth.as_deref())?
        .assign(&a.common.assignments)?
        .resolve_paths(&["decisions", "truth"])?;
    r.build()
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    let client = Client::new(&cli.server);
    let ctx = || format!("request to {}", client.base_url());
    match &cli.command {
        Command::Health => print(&client.health().await.with_context(ctx)?),
        Command::Synth(a) => print(&client.synth(&synth_request(a)?).await.with_context(ctx)?),
        Command::Train(a) => print(&client.train(&train_request(a)?).await.with_context(ctx)?),
        Command::Score(a) => print(&client.score(&score_request(a)?).await.with_context(ctx)?),
        Command::Calibrate(a) => print(&client.calibrate(&calibrate_request(a)?).await.with_context(ctx)?),
        Command::Run(a) => {
            let files = client.run(&pipeline_request(&a.pipeline, None)?).await.with_context(ctx)?;
            print(&files)
        }
        Command::Eval(a) => print(&client.eval(&eval_request(a)?).await.with_context(ctx)?),
        Command::Sweep(a) => {
            let config = pipeline_request(&a.pipeline, a.alphas.as_deref())?;
            print(&client.sweep(&config).await.with_context(ctx)?)
        }
    }
}
