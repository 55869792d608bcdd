use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{emit_plots, run_workload, PlotFiles, RunReport, RunSettings, DEFAULT_SWEEP};
use crate::error::{Error, Result};
use crate::oracle::{HttpOracle, HttpOracleConfig, MockOracle, Oracle, SystemClock};
use crate::proxy::save_params;
use crate::store::{load_embeddings, read_json, write_json, LabelSet, QueryRecord, Workload};

/// Where oracle labels come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSource {
    /// A label file answers every request; it doubles as ground truth.
    Labels { path: PathBuf },
    /// A chat-completion endpoint; `texts` is JSON Lines of `{"doc_id","text"}`.
    Http { endpoint: HttpOracleConfig, texts: PathBuf },
}

/// A full run described by files on disk. Serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub embeddings: PathBuf,
    pub query: PathBuf,
    pub oracle: OracleSource,
    /// Ground truth for evaluation; defaults to the label file of a label oracle.
    pub truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Accuracy targets for the tradeoff curve.
    pub sweep: Vec<f64>,
    #[serde(flatten)]
    pub settings: RunSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embeddings: PathBuf::from("embeddings.json"),
            query: PathBuf::from("query.json"),
            oracle: OracleSource::Labels {
                path: PathBuf::from("labels.jsonl"),
            },
            truth: None,
            output_dir: PathBuf::from("run"),
            sweep: DEFAULT_SWEEP.to_vec(),
            settings: RunSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load_workload(&self) -> Result<Workload> {
        let store = load_embeddings(&self.embeddings)?;
        let query = QueryRecord::load(&self.query)?;
        Workload::new(query.text, query.embedding, Arc::new(store), self.settings.accuracy_target)
    }

    pub fn build_oracle(&self) -> Result<Box<dyn Oracle>> {
        Ok(match &self.oracle {
            OracleSource::Labels { path } => Box::new(MockOracle::new(LabelSet::read_jsonl(path)?)),
            OracleSource::Http { endpoint, texts } => Box::new(HttpOracle::new(
                endpoint.clone(),
                load_texts(texts)?,
                Arc::new(SystemClock::new()),
            )?),
        })
    }

    pub fn load_truth(&self) -> Result<Option<LabelSet>> {
        match (&self.truth, &self.oracle) {
            (Some(path), _) => LabelSet::read_jsonl(path).map(Some),
            (None, OracleSource::Labels { path }) => LabelSet::read_jsonl(path).map(Some),
            (None, OracleSource::Http { .. }) => Ok(None),
        }
    }
}

/// Reads JSON Lines of `{"doc_id": "...", "text": "..."}`.
pub fn load_texts(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    #[derive(Deserialize)]
    struct Line {
        doc_id: String,
        text: String,
    }
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        if out.insert(l.doc_id.clone(), l.text).is_some() {
            return Err(Error::DuplicateId(l.doc_id));
        }
    }
    Ok(out)
}

/// Files written by [`run_pipeline`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFiles {
    pub report: RunReport,
    pub report_path: PathBuf,
    pub decisions: PathBuf,
    pub scores: PathBuf,
    pub timings: PathBuf,
    pub proxy: Option<PathBuf>,
    pub plots: PlotFiles,
}

/// Runs the workflow described by `config` and writes everything under its
/// output directory: `report.json`, `decisions.jsonl`, `scores.jsonl`,
/// `timings.json`, `proxy.json` and the plot files.
pub async fn run_pipeline(config: &PipelineConfig) -> Result<RunFiles> {
    let workload = config.load_workload()?;
    let oracle = config.build_oracle()?;
    let truth = config.load_truth()?;
    let outcome = run_workload(&workload, oracle.as_ref(), &config.settings, truth.as_ref()).await?;

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join("report.json");
    write_json(&report_path, &outcome.report)?;
    let decisions = dir.join("decisions.jsonl");
    outcome.result.write_jsonl(&decisions)?;
    let scores = dir.join("scores.jsonl");
    outcome.scores.write_jsonl(&scores)?;
    let timings = dir.join("timings.json");
    write_json(&timings, &outcome.timings)?;
    let proxy = match &outcome.params {
        Some(p) => {
            let path = dir.join("proxy.json");
            save_params(p, &config.settings.training_config(), &path)?;
            Some(path)
        }
        None => None,
    };
    let plots = emit_plots(&outcome, &config.settings, truth.as_ref(), &config.sweep, dir)?;
    Ok(RunFiles {
        report: outcome.report,
        report_path,
        decisions,
        scores,
        timings,
        proxy,
        plots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::quick_settings;
    use crate::synth::{generate, save_workload, SynthSpec};

    fn config_in(dir: &Path, out: &str, seed: u64) -> PipelineConfig {
        PipelineConfig {
            embeddings: dir.join("embeddings.json"),
            query: dir.join("query.json"),
            oracle: OracleSource::Labels {
                path: dir.join("labels.jsonl"),
            },
            output_dir: dir.join(out),
            settings: quick_settings(seed),
            ..PipelineConfig::default()
        }
    }

    #[tokio::test]
    async fn repeated_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (w, labels) = generate(&SynthSpec {
            n_docs: 1500,
            dim: 12,
            separation: 4.0,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        save_workload(dir.path(), &w, &labels).unwrap();
        let a = run_pipeline(&config_in(dir.path(), "a", 9)).await.unwrap();
        let b = run_pipeline(&config_in(dir.path(), "b", 9)).await.unwrap();
        for (x, y) in [(&a.report_path, &b.report_path), (&a.decisions, &b.decisions), (&a.scores, &b.scores)] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
        assert!(a.report.realized_accuracy.is_some());
        assert!(a.proxy.unwrap().exists());
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = config_in(dir.path(), "out", 1);
        cfg.save(&path).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);

        fs::write(&path, r#"{"embeddings":"e.json","accuracy_target":0.95,"oracle":{"kind":"labels","path":"l.jsonl"}}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.settings.accuracy_target, 0.95);
        assert_eq!(cfg.settings.n_bins, 64);
        assert_eq!(cfg.settings.train_fraction, 0.10);
        assert_eq!(cfg.sweep.len(), 9);
    }

    #[test]
    fn texts_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, "{\"doc_id\":\"a\",\"text\":\"x\"}\n\n{\"doc_id\":\"b\",\"text\":\"y\"}\n").unwrap();
        assert_eq!(load_texts(&path).unwrap().len(), 2);
        fs::write(&path, "{\"doc_id\":\"a\",\"text\":\"x\"}\n{\"doc_id\":\"a\",\"text\":\"y\"}\n").unwrap();
        assert!(matches!(load_texts(&path), Err(Error::DuplicateId(_))));
    }
}
