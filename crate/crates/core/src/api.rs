//! Request and response bodies of the HTTP service, and the operations behind
//! them. Paths are interpreted on the machine running the service.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate_with, stratified_sample, BinGrid, Calibration, ReconstructionOptions};
use crate::cascade::{select_thresholds, AccuracyModel, CascadeResult, ThresholdPair};
use crate::error::{Error, Result};
use crate::pipeline::{
    eval_report, run_pipeline, run_workload, tradeoff_curve, Metrics, PipelineConfig, RunFiles, TradeoffPoint,
};
use crate::proxy::{load_params, save_params, score_store, train_proxy_phases, Parallelism, ScoreSet, TrainingConfig, TrainingLog};
use crate::store::{load_embeddings, write_json, LabelSet, QueryRecord, Workload};
use crate::synth::{generate, save_workload, SynthSpec};

/// Error body returned with every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    #[serde(default)]
    pub spec: SynthSpec,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthResponse {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub query: PathBuf,
    pub n_docs: usize,
    pub n_positives: usize,
}

pub fn synth(req: &SynthRequest) -> Result<SynthResponse> {
    let (workload, labels) = generate(&req.spec)?;
    save_workload(&req.output_dir, &workload, &labels)?;
    Ok(SynthResponse {
        embeddings: req.output_dir.join("embeddings.json"),
        labels: req.output_dir.join("labels.jsonl"),
        query: req.output_dir.join("query.json"),
        n_docs: workload.collection.len(),
        n_positives: labels.positives(),
    })
}

fn load_workload(embeddings: &PathBuf, query: &PathBuf, accuracy_target: f64) -> Result<Workload> {
    let store = load_embeddings(embeddings)?;
    let q = QueryRecord::load(query)?;
    Workload::new(q.text, q.embedding, Arc::new(store), accuracy_target)
}

/// Trains a proxy on every labeled document in `labels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub embeddings: PathBuf,
    pub query: PathBuf,
    pub labels: PathBuf,
    /// Manifest path for the trained parameters.
    pub output: PathBuf,
    #[serde(default)]
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub proxy: PathBuf,
    pub n_train: usize,
    pub n_positive: usize,
    pub log: TrainingLog,
}

pub fn train(req: &TrainRequest) -> Result<TrainResponse> {
    let workload = load_workload(&req.embeddings, &req.query, 1.0)?;
    let labels = LabelSet::read_jsonl(&req.labels)?;
    let trained = train_proxy_phases(&workload, &labels, &req.training)?;
    save_params(&trained.after_phase2, &req.training, &req.output)?;
    Ok(TrainResponse {
        proxy: req.output.clone(),
        n_train: labels.len(),
        n_positive: labels.positives(),
        log: trained.log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub embeddings: PathBuf,
    pub query: PathBuf,
    pub proxy: PathBuf,
    /// Where to write `{"doc_id","score"}` JSON Lines.
    pub output: PathBuf,
    /// Score only these ids (a JSON Lines label file); all documents when absent.
    #[serde(default)]
    pub only: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: PathBuf,
    pub n_scored: usize,
}

pub fn score(req: &ScoreRequest) -> Result<ScoreResponse> {
    let workload = load_workload(&req.embeddings, &req.query, 1.0)?;
    let (params, _) = load_params(&req.proxy)?;
    let store = match &req.only {
        Some(path) => {
            let only = LabelSet::read_jsonl(path)?;
            let ids: Vec<&str> = only.iter().map(|(id, _)| id).collect();
            workload.collection.subset(&ids)?
        }
        None => (*workload.collection).clone(),
    };
    let scores = score_store(&params, &workload.query_embedding, &store, Parallelism::Parallel)?;
    scores.write_jsonl(&req.output)?;
    Ok(ScoreResponse {
        scores: req.output.clone(),
        n_scored: scores.len(),
    })
}

/// Draws a stratified calibration sample from `scores`, labels it from the
/// label file, reconstructs both class distributions and picks thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrateRequest {
    pub scores: PathBuf,
    pub labels: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_calibration_fraction")]
    pub calibration_fraction: f64,
    #[serde(default = "default_alpha")]
    pub accuracy_target: f64,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub reconstruction: ReconstructionOptions,
    #[serde(default)]
    pub seed: u64,
}

fn default_calibration_fraction() -> f64 {
    0.05
}

fn default_alpha() -> f64 {
    0.90
}

fn default_bins() -> usize {
    crate::calibrate::DEFAULT_BINS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrateResponse {
    pub calibration: PathBuf,
    pub calibration_csv: PathBuf,
    pub sample_size: usize,
    pub prior_positive: f64,
    pub thresholds: ThresholdPair,
    pub estimated_accuracy: f64,
    pub estimated_unfiltered_mass: f64,
}

pub fn calibrate(req: &CalibrateRequest) -> Result<CalibrateResponse> {
    let scores = ScoreSet::read_jsonl(&req.scores)?;
    let labels = LabelSet::read_jsonl(&req.labels)?;
    let grid = BinGrid::new(req.n_bins)?;
    let sample = stratified_sample(&scores, &grid, req.calibration_fraction, crate::rng::derive(req.seed, 2))?;
    let sample_labels = labels.restrict(&sample)?;
    let cal = calibrate_with(&scores, &sample_labels, &grid, req.reconstruction, crate::rng::derive(req.seed, 3))?;
    let model = AccuracyModel::new(&cal)?;
    let thresholds = select_thresholds(&model, req.accuracy_target)?;
    fs::create_dir_all(&req.output_dir).map_err(|e| Error::io(&req.output_dir, e))?;
    let calibration = req.output_dir.join("calibration.json");
    write_json(&calibration, &cal)?;
    let calibration_csv = req.output_dir.join("calibration.csv");
    cal.write_csv(&calibration_csv)?;
    Ok(CalibrateResponse {
        calibration,
        calibration_csv,
        sample_size: cal.sample_size,
        prior_positive: cal.prior_p,
        estimated_accuracy: model.estimate_accuracy(&thresholds),
        estimated_unfiltered_mass: model.unfiltered_mass(&thresholds),
        thresholds,
    })
}

pub async fn run(config: &PipelineConfig) -> Result<RunFiles> {
    run_pipeline(config).await
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub decisions: PathBuf,
    pub truth: PathBuf,
}

pub fn eval(req: &EvalRequest) -> Result<Metrics> {
    let decisions = CascadeResult::read_jsonl(&req.decisions)?;
    let truth = LabelSet::read_jsonl(&req.truth)?;
    let result = CascadeResult {
        decisions,
        thresholds: ThresholdPair::all_oracle(),
        unfiltered_rate: 0.0,
        estimated_accuracy: 0.0,
    };
    eval_report(&result, &truth)
}

/// Runs the pipeline once, then re-selects thresholds for every target in
/// `config.sweep` from the same calibration.
pub async fn sweep(config: &PipelineConfig) -> Result<Vec<TradeoffPoint>> {
    let workload = config.load_workload()?;
    let oracle = config.build_oracle()?;
    let truth = config.load_truth()?;
    let outcome = run_workload(&workload, oracle.as_ref(), &config.settings, truth.as_ref()).await?;
    let cal: Calibration = outcome.calibration.ok_or_else(|| {
        Error::DegenerateWorkload(format!(
            "no calibration available: {}",
            outcome.report.fallback.unwrap_or_default()
        ))
    })?;
    tradeoff_curve(&cal, &outcome.scores, truth.as_ref(), &config.sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::OracleSource;
    use crate::proxy::Architecture;

    fn small_training() -> TrainingConfig {
        TrainingConfig {
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
        }
    }

    #[tokio::test]
    async fn stepwise_operations_chain_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let s = synth(&SynthRequest {
            spec: SynthSpec {
                n_docs: 1200,
                dim: 8,
                separation: 4.0,
                ..SynthSpec::default()
            },
            output_dir: d.join("data"),
        })
        .unwrap();
        assert_eq!(s.n_docs, 1200);

        let all = LabelSet::read_jsonl(&s.labels).unwrap();
        let train_ids: Vec<String> = all.iter().take(150).map(|(id, _)| id.to_string()).collect();
        let train_labels = d.join("train.jsonl");
        all.restrict(&train_ids).unwrap().write_jsonl(&train_labels).unwrap();
        let t = train(&TrainRequest {
            embeddings: s.embeddings.clone(),
            query: s.query.clone(),
            labels: train_labels,
            output: d.join("proxy.json"),
            training: small_training(),
        })
        .unwrap();
        assert_eq!(t.n_train, 150);
        assert_eq!(t.log.phase1.len(), 3);

        let sc = score(&ScoreRequest {
            embeddings: s.embeddings.clone(),
            query: s.query.clone(),
            proxy: t.proxy,
            output: d.join("scores.jsonl"),
            only: None,
        })
        .unwrap();
        assert_eq!(sc.n_scored, 1200);

        let c = calibrate(&CalibrateRequest {
            scores: sc.scores,
            labels: s.labels.clone(),
            output_dir: d.join("cal"),
            calibration_fraction: 0.1,
            accuracy_target: 0.9,
            n_bins: 32,
            reconstruction: ReconstructionOptions::default(),
            seed: 1,
        })
        .unwrap();
        assert!(c.estimated_accuracy >= 0.9);
        assert!(c.calibration.exists() && c.calibration_csv.exists());

        let cfg = PipelineConfig {
            embeddings: s.embeddings,
            query: s.query,
            oracle: OracleSource::Labels { path: s.labels.clone() },
            output_dir: d.join("run"),
            settings: crate::pipeline::RunSettings {
                training: small_training(),
                ..Default::default()
            },
            ..PipelineConfig::default()
        };
        let r = run(&cfg).await.unwrap();
        let m = eval(&EvalRequest {
            decisions: r.decisions,
            truth: s.labels,
        })
        .unwrap();
        assert_eq!(Some(m.accuracy), r.report.realized_accuracy);

        let points = sweep(&cfg).await.unwrap();
        assert_eq!(points.len(), 9);
    }
}
