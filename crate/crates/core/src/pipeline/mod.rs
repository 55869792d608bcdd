//! End-to-end workflow: train a proxy on an oracle-labeled sample, calibrate
//! its score distribution, pick thresholds, and cascade the online set.

mod eval;
mod files;
mod plots;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate_with, stratified_sample, BinGrid, Calibration, ReconstructionOptions, DEFAULT_BINS};
use crate::cascade::{execute_cascade, select_thresholds, AccuracyModel, CascadeResult, Provenance, ThresholdPair};
use crate::error::{Error, Result};
use crate::oracle::{label_batch, MemoOracle, Oracle};
use crate::proxy::{score_store, train_proxy, EncoderParams, Parallelism, ScoreSet, TrainingConfig};
use crate::rng;
use crate::store::{split_sample, LabelSet, Workload};

pub use eval::{eval_report, ClassMetrics, Metrics};
pub use files::{load_texts, run_pipeline, OracleSource, PipelineConfig, RunFiles};
pub use plots::{emit_plots, histogram_rows, tradeoff_curve, HistogramRow, PlotFiles, TradeoffPoint, DEFAULT_SWEEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub train_fraction: f64,
    pub calibration_fraction: f64,
    pub accuracy_target: f64,
    pub n_bins: usize,
    pub smoothing_window: usize,
    pub jitter: bool,
    /// Drives every random choice in a run. The proxy's own seed is derived
    /// from it, so `training.seed` is ignored by the pipeline.
    pub seed: u64,
    pub max_concurrent: usize,
    pub training: TrainingConfig,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            train_fraction: 0.10,
            calibration_fraction: 0.05,
            accuracy_target: 0.90,
            n_bins: DEFAULT_BINS,
            smoothing_window: 3,
            jitter: true,
            seed: 0,
            max_concurrent: 8,
            training: TrainingConfig::default(),
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return bad(format!("calibration_fraction {} outside (0, 1)", self.calibration_fraction));
        }
        if !(self.accuracy_target > 0.0 && self.accuracy_target <= 1.0) {
            return bad(format!("accuracy target {} outside (0, 1]", self.accuracy_target));
        }
        if self.max_concurrent == 0 {
            return bad("max_concurrent must be at least 1".into());
        }
        BinGrid::new(self.n_bins)?;
        if self.smoothing_window % 2 == 0 {
            return bad(format!("smoothing window must be odd, got {}", self.smoothing_window));
        }
        self.training.validate()
    }

    pub fn reconstruction(&self) -> ReconstructionOptions {
        ReconstructionOptions {
            jitter: self.jitter,
            smoothing_window: self.smoothing_window,
        }
    }

    fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: rng::derive(self.seed, 4),
            ..self.training.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub proxy_positive: usize,
    pub proxy_negative: usize,
    pub oracle: usize,
}

/// Distinct oracle invocations per stage. Cascade calls exclude labels
/// already obtained for the calibration sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCalls {
    pub training: usize,
    pub calibration: usize,
    pub cascade: usize,
}

impl OracleCalls {
    pub fn total(&self) -> usize {
        self.training + self.calibration + self.cascade
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub query: String,
    pub seed: u64,
    pub accuracy_target: f64,
    pub n_docs: usize,
    pub n_train: usize,
    pub n_online: usize,
    pub n_calibration: usize,
    pub thresholds: ThresholdPair,
    pub estimated_accuracy: f64,
    pub estimated_unfiltered_mass: f64,
    /// Fraction of online documents inside `[lb, rb]`.
    pub unfiltered_rate: f64,
    /// One minus the fraction of online documents that needed the oracle.
    pub data_reduction: f64,
    pub decisions: DecisionCounts,
    pub oracle_calls: OracleCalls,
    pub oracle_call_count: usize,
    pub realized_accuracy: Option<f64>,
    pub metrics: Option<Metrics>,
    /// Why the run fell back to sending everything to the oracle, if it did.
    pub fallback: Option<String>,
}

/// Wall-clock seconds per stage. Kept apart from the report so that the
/// report stays byte-identical across runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub label_training: f64,
    pub train: f64,
    pub score: f64,
    pub label_calibration: f64,
    pub calibrate: f64,
    pub select: f64,
    pub cascade: f64,
    pub total: f64,
}

/// Everything a run produced, for callers that want more than the report.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub result: CascadeResult,
    /// Proxy scores of the online documents.
    pub scores: ScoreSet,
    pub params: Option<EncoderParams>,
    pub calibration: Option<Calibration>,
    pub calibration_labels: LabelSet,
    pub train_labels: LabelSet,
    pub timings: StageTimings,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

async fn label_ids(oracle: &dyn Oracle, query: &str, ids: &[String], max_concurrent: usize) -> Result<LabelSet> {
    let labels = label_batch(oracle, query, ids, max_concurrent)
        .await
        .map_err(|f| Error::Oracle(f.source))?;
    Ok(labels.into_iter().collect())
}

/// Runs the whole workflow against `oracle`. When `truth` is given the
/// report includes realized accuracy and per-class metrics.
pub async fn run_workload(
    workload: &Workload,
    oracle: &dyn Oracle,
    settings: &RunSettings,
    truth: Option<&LabelSet>,
) -> Result<RunOutcome> {
    settings.validate()?;
    let started = Instant::now();
    let mut timings = StageTimings::default();
    let memo = MemoOracle::new(oracle);
    let query = workload.query_text.as_str();
    let alpha = workload.accuracy_target;
    let grid = BinGrid::new(settings.n_bins)?;

    let (train_ids, online_ids) = split_sample(&workload.collection, settings.train_fraction, rng::derive(settings.seed, 1))?;
    let t = Instant::now();
    let train_labels = label_ids(&memo, query, &train_ids, settings.max_concurrent).await?;
    let training_calls = memo.invocations();
    timings.label_training = secs(t);

    let online = workload.collection.subset(&online_ids)?;
    let mut fallback = None;
    let t = Instant::now();
    let params = match train_proxy(workload, &train_labels, &settings.training_config()) {
        Ok(p) => Some(p),
        Err(Error::DegenerateWorkload(reason)) => {
            fallback = Some(reason);
            None
        }
        Err(e) => return Err(e),
    };
    timings.train = secs(t);

    let t = Instant::now();
    let scores = match &params {
        Some(p) => score_store(p, &workload.query_embedding, &online, Parallelism::Parallel)?,
        // Without a proxy every document sits mid-range and goes to the oracle.
        None => {
            let mut s = ScoreSet::new();
            for id in &online_ids {
                s.insert(id.clone(), 0.5)?;
            }
            s
        }
    };
    timings.score = secs(t);

    let mut calibration_labels = LabelSet::new();
    let mut calibration = None;
    let mut thresholds = ThresholdPair::all_oracle();
    let mut estimated_accuracy = 1.0;
    let mut estimated_unfiltered_mass = 1.0;
    if fallback.is_none() {
        let t = Instant::now();
        let sample = stratified_sample(&scores, &grid, settings.calibration_fraction, rng::derive(settings.seed, 2))?;
        calibration_labels = label_ids(&memo, query, &sample, settings.max_concurrent).await?;
        timings.label_calibration = secs(t);

        let t = Instant::now();
        match calibrate_with(&scores, &calibration_labels, &grid, settings.reconstruction(), rng::derive(settings.seed, 3)) {
            Ok(cal) => {
                timings.calibrate = secs(t);
                let t = Instant::now();
                let model = AccuracyModel::new(&cal)?;
                thresholds = select_thresholds(&model, alpha)?;
                estimated_accuracy = model.estimate_accuracy(&thresholds);
                estimated_unfiltered_mass = model.unfiltered_mass(&thresholds);
                timings.select = secs(t);
                calibration = Some(cal);
            }
            Err(Error::DegenerateWorkload(reason)) | Err(Error::Empty(reason)) => fallback = Some(reason),
            Err(e) => return Err(e),
        }
    }
    let calibration_calls = memo.invocations() - training_calls;

    let t = Instant::now();
    let result = execute_cascade(&scores, thresholds, &memo, query, estimated_accuracy, settings.max_concurrent)
        .await
        .map_err(|p| Error::Oracle(p.source))?;
    timings.cascade = secs(t);
    let cascade_calls = memo.invocations() - training_calls - calibration_calls;

    let decisions = DecisionCounts {
        proxy_positive: result.count(Provenance::ProxyPositive),
        proxy_negative: result.count(Provenance::ProxyNegative),
        oracle: result.count(Provenance::Oracle),
    };
    let n_online = online_ids.len();
    let metrics = truth.map(|t| eval_report(&result, t)).transpose()?;
    let oracle_calls = OracleCalls {
        training: training_calls,
        calibration: calibration_calls,
        cascade: cascade_calls,
    };
    let report = RunReport {
        query: workload.query_text.clone(),
        seed: settings.seed,
        accuracy_target: alpha,
        n_docs: workload.collection.len(),
        n_train: train_ids.len(),
        n_online,
        n_calibration: calibration_labels.len(),
        thresholds,
        estimated_accuracy,
        estimated_unfiltered_mass,
        unfiltered_rate: result.unfiltered_rate,
        data_reduction: 1.0 - decisions.oracle as f64 / n_online as f64,
        decisions,
        oracle_call_count: oracle_calls.total(),
        oracle_calls,
        realized_accuracy: metrics.as_ref().map(|m| m.accuracy),
        metrics,
        fallback,
    };
    timings.total = secs(started);
    Ok(RunOutcome {
        report,
        result,
        scores,
        params,
        calibration,
        calibration_labels,
        train_labels,
        timings,
    })
}
