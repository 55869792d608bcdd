//! Query-aware proxy encoder: architecture, decision scores, contrastive
//! objectives and the two-phase training loop.

mod io;
mod loss;
mod mlp;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, EmbeddingVector, Workload};

pub use io::{load_params, save_params, ParamsManifest};
pub use loss::{loss_phase2, loss_polar, loss_qsim, loss_supcon, BellwetherRule, Bellwethers, MiniBatch};
pub use mlp::{Adam, Architecture, Dense, EncoderParams, Mlp};
pub use train::{
    labeled_examples, rebalance, train_proxy, train_proxy_phases, LabeledEmbedding, TrainedPhases, TrainingConfig,
    TrainingLog,
};

/// Rows per forward pass when scoring a collection. Fixed so results do not
/// depend on the number of worker threads.
const SCORE_CHUNK: usize = 512;

fn to_rows(rows: &[&[f32]], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (r, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        for (c, &v) in row.iter().enumerate() {
            out[[r, c]] = f64::from(v);
        }
    }
    Ok(out)
}

/// Maps an embedding into the latent space (or through the projector as well).
pub fn encode(params: &EncoderParams, e: &[f32], use_projector: bool) -> Result<Vec<f64>> {
    let x = to_rows(&[e], params.input_dim())?;
    let mut z = params.encoder.forward(x.view());
    if use_projector {
        z = params.projector.forward(z.view());
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(z.into_raw_vec_and_offset().0)
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine of two latents mapped affinely onto `[0, 1]`.
fn unit_score(zq: ArrayView1<f64>, nq: f64, zd: ArrayView1<f64>) -> Option<f64> {
    let nd = norm(zd);
    if !(nd > 0.0) || !nd.is_finite() {
        return None;
    }
    let cos = zq.dot(&zd) / (nq * nd);
    Some(((cos + 1.0) / 2.0).clamp(0.0, 1.0))
}

fn query_latent(params: &EncoderParams, e_q: &[f32]) -> Result<(ndarray::Array1<f64>, f64)> {
    let x = to_rows(&[e_q], params.input_dim())?;
    let z = params.encoder.forward(x.view()).index_axis_move(Axis(0), 0);
    let n = norm(z.view());
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateLatent("query".into()));
    }
    Ok((z, n))
}

/// Inference-path score `(cos(E(e_q), E(e_d)) + 1) / 2`; the projector is not used.
pub fn decision_score(params: &EncoderParams, e_q: &[f32], e_d: &[f32]) -> Result<f64> {
    let (zq, nq) = query_latent(params, e_q)?;
    let x = to_rows(&[e_d], params.input_dim())?;
    let zd = params.encoder.forward(x.view());
    unit_score(zq.view(), nq, zd.row(0)).ok_or_else(|| Error::DegenerateLatent("document".into()))
}

/// Per-document decision scores in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    scores: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    doc_id: String,
    score: f64,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, score: f64) -> Result<()> {
        let doc_id = doc_id.into();
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} of {doc_id:?} outside [0, 1]")));
        }
        if self.scores.insert(doc_id.clone(), score).is_some() {
            return Err(Error::DuplicateId(doc_id));
        }
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<f64> {
        self.scores.get(doc_id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Sorted by doc_id.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.scores.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.values().copied()
    }

    pub fn restrict<S: AsRef<str>>(&self, doc_ids: &[S]) -> Result<ScoreSet> {
        let mut out = ScoreSet::new();
        for id in doc_ids {
            let id = id.as_ref();
            let s = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            out.insert(id, s)?;
        }
        Ok(out)
    }

    /// JSON Lines of `{"doc_id": "...", "score": s}`.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (doc_id, &score) in &self.scores {
            let line = ScoreLine {
                doc_id: doc_id.clone(),
                score,
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = ScoreSet::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            out.insert(parsed.doc_id, parsed.score)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

/// Scores every document of the workload's collection.
pub fn score_all(params: &EncoderParams, workload: &Workload) -> Result<ScoreSet> {
    score_store(params, &workload.query_embedding, &workload.collection, Parallelism::Parallel)
}

pub fn score_store(
    params: &EncoderParams,
    query: &EmbeddingVector,
    store: &EmbeddingStore,
    parallelism: Parallelism,
) -> Result<ScoreSet> {
    if store.dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: store.dim(),
        });
    }
    let (zq, nq) = query_latent(params, query.as_slice())?;
    let n_chunks = store.len().div_ceil(SCORE_CHUNK);
    let score_chunk = |c: usize| -> Result<Vec<f64>> {
        let lo = c * SCORE_CHUNK;
        let hi = (lo + SCORE_CHUNK).min(store.len());
        let rows: Vec<&[f32]> = (lo..hi).map(|i| store.row(i)).collect();
        let z = params.encoder.forward(to_rows(&rows, store.dim())?.view());
        z.axis_iter(Axis(0))
            .enumerate()
            .map(|(k, zd)| {
                unit_score(zq.view(), nq, zd).ok_or_else(|| Error::DegenerateLatent(store.ids()[lo + k].clone()))
            })
            .collect()
    };
    let chunks: Vec<Vec<f64>> = match parallelism {
        Parallelism::Sequential => (0..n_chunks).map(score_chunk).collect::<Result<_>>()?,
        Parallelism::Parallel => (0..n_chunks).into_par_iter().map(score_chunk).collect::<Result<_>>()?,
    };
    let mut out = ScoreSet::new();
    for (id, s) in store.ids().iter().zip(chunks.into_iter().flatten()) {
        out.insert(id.clone(), s)?;
    }
    Ok(out)
}
