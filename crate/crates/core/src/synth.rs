//! Synthetic workloads: two Gaussian clusters whose mean directions sit a
//! controllable distance apart, with the positive mean direction as query.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::{save_embeddings, EmbeddingStore, EmbeddingVector, LabelSet, QueryRecord, Workload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_docs: usize,
    pub dim: usize,
    pub positive_fraction: f64,
    /// Distance between the class means, in units of `noise_sigma`.
    pub separation: f64,
    pub noise_sigma: f64,
    pub accuracy_target: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_docs: 10_000,
            dim: 32,
            positive_fraction: 0.2,
            separation: 3.0,
            noise_sigma: 1.0,
            accuracy_target: 0.9,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_docs < 10 {
            return bad(format!("n_docs must be at least 10, got {}", self.n_docs));
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction {} outside (0, 1)", self.positive_fraction));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation {} must be finite and >= 0", self.separation));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be positive", self.noise_sigma));
        }
        if !(self.accuracy_target > 0.0 && self.accuracy_target <= 1.0) {
            return bad(format!("accuracy target {} outside (0, 1]", self.accuracy_target));
        }
        Ok(())
    }

    pub fn n_positives(&self) -> usize {
        (self.positive_fraction * self.n_docs as f64).round() as usize
    }
}

/// A generated workload, its ground truth, and the class means.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub workload: Workload,
    pub labels: LabelSet,
    pub mean_positive: Vec<f64>,
    pub mean_negative: Vec<f64>,
}

fn unit_gaussian(rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Two orthonormal random directions.
fn directions(rng: &mut rng::Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = unit_gaussian(rng, dim);
    normalize(&mut u);
    let mut v = unit_gaussian(rng, dim);
    let p = dot(&u, &v);
    v.iter_mut().zip(&u).for_each(|(x, y)| *x -= p * y);
    normalize(&mut v);
    (u, v)
}

pub fn doc_id(i: usize) -> String {
    format!("doc-{i:06}")
}

pub fn generate_full(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let (u_p, u_n) = directions(&mut rng, spec.dim);
    // Equal radii on orthogonal axes put the means sep * sigma apart.
    let radius = spec.separation * spec.noise_sigma / 2f64.sqrt();
    let mean_positive: Vec<f64> = u_p.iter().map(|x| x * radius).collect();
    let mean_negative: Vec<f64> = u_n.iter().map(|x| x * radius).collect();

    let n_pos = spec.n_positives();
    let mut is_positive: Vec<bool> = (0..spec.n_docs).map(|i| i < n_pos).collect();
    is_positive.shuffle(&mut rng);

    let mut data = Vec::with_capacity(spec.n_docs * spec.dim);
    let mut labels = LabelSet::new();
    for (i, &positive) in is_positive.iter().enumerate() {
        let mean = if positive { &mean_positive } else { &mean_negative };
        for &m in mean {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((m + spec.noise_sigma * noise) as f32);
        }
        labels.insert(doc_id(i), positive);
    }
    let ids = (0..spec.n_docs).map(doc_id).collect();
    let store = EmbeddingStore::from_parts(spec.dim, ids, data)?;
    let query = EmbeddingVector::new(u_p.iter().map(|&x| x as f32).collect())?;
    let workload = Workload::new(
        format!("synthetic predicate (seed {})", spec.seed),
        query,
        Arc::new(store),
        spec.accuracy_target,
    )?;
    Ok(Synthetic {
        workload,
        labels,
        mean_positive,
        mean_negative,
    })
}

pub fn generate(spec: &SynthSpec) -> Result<(Workload, LabelSet)> {
    let s = generate_full(spec)?;
    Ok((s.workload, s.labels))
}

/// One workload per positive fraction; everything else, seed included, is shared.
pub fn selectivity_sweep(base: &SynthSpec, fractions: &[f64]) -> Result<Vec<(Workload, LabelSet)>> {
    fractions
        .iter()
        .map(|&f| {
            generate(&SynthSpec {
                positive_fraction: f,
                ..base.clone()
            })
        })
        .collect()
}

/// Writes `embeddings.json` (+ payload), `labels.jsonl` and `query.json` into `dir`.
pub fn save_workload(dir: impl AsRef<Path>, workload: &Workload, labels: &LabelSet) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_embeddings(&workload.collection, dir.join("embeddings.json"))?;
    labels.write_jsonl(dir.join("labels.jsonl"))?;
    QueryRecord {
        text: workload.query_text.clone(),
        embedding: workload.query_embedding.clone(),
    }
    .save(dir.join("query.json"))
}

/// Area under the ROC curve by rank sum; ties count one half.
pub fn auc(positive_scores: &[f64], negative_scores: &[f64]) -> f64 {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let np = positive_scores.len() as f64;
    let nn = negative_scores.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// AUC of scores keyed by doc_id against ground truth, over the ids in `scores`.
pub fn auc_of<'a>(scores: impl IntoIterator<Item = (&'a str, f64)>, truth: &LabelSet) -> Result<f64> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (id, s) in scores {
        match truth.get(id) {
            Some(true) => pos.push(s),
            Some(false) => neg.push(s),
            None => return Err(Error::UnknownId(id.to_string())),
        }
    }
    Ok(auc(&pos, &neg))
}
