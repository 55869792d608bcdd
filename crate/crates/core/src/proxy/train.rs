use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{loss_phase2, loss_qsim, BellwetherRule, MiniBatch};
use super::mlp::{Adam, Architecture, EncoderParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::store::{LabelSet, Workload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rebalance_min_ratio: f64,
    pub noise_sigma_scale: f64,
    pub architecture: Architecture,
    pub bellwether: BellwetherRule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda: 0.2,
            learning_rate: 1e-3,
            epochs_phase1: 30,
            epochs_phase2: 30,
            batch_size: 64,
            seed: 0,
            rebalance_min_ratio: 0.3,
            noise_sigma_scale: 0.1,
            architecture: Architecture::default(),
            bellwether: BellwetherRule::Hardest,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.rebalance_min_ratio > 0.0 && self.rebalance_min_ratio <= 0.5) {
            return bad(format!(
                "rebalance_min_ratio must lie in (0, 0.5], got {}",
                self.rebalance_min_ratio
            ));
        }
        if !(self.noise_sigma_scale > 0.0) {
            return bad(format!("noise_sigma_scale must be positive, got {}", self.noise_sigma_scale));
        }
        let a = &self.architecture;
        if [a.hidden1, a.hidden2, a.latent, a.projector_hidden, a.projector_out].contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: Vec<f32>,
    pub label: bool,
}

/// Appends noisy copies of the minority class until it makes up at least
/// `rebalance_min_ratio` of the set. Originals are returned first, unchanged.
pub fn rebalance(
    examples: Vec<LabeledEmbedding>,
    config: &TrainingConfig,
    seed: u64,
) -> Result<Vec<LabeledEmbedding>> {
    let positives = examples.iter().filter(|e| e.label).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateWorkload(format!(
            "training sample has {positives} positives and {negatives} negatives"
        )));
    }
    let minority_label = positives < negatives;
    let minority = positives.min(negatives);
    let total = examples.len();
    let ratio = config.rebalance_min_ratio;
    if minority as f64 / total as f64 >= ratio {
        return Ok(examples);
    }

    let mut extra = ((ratio * total as f64 - minority as f64) / (1.0 - ratio)).ceil().max(0.0) as usize;
    while ((minority + extra) as f64) / ((total + extra) as f64) < ratio {
        extra += 1;
    }

    let sources: Vec<&[f32]> = examples
        .iter()
        .filter(|e| e.label == minority_label)
        .map(|e| e.embedding.as_slice())
        .collect();
    let dim = sources[0].len();
    let sigma: Vec<f64> = (0..dim)
        .map(|d| {
            let n = sources.len() as f64;
            if sources.len() < 2 {
                return 0.0;
            }
            let mean = sources.iter().map(|s| f64::from(s[d])).sum::<f64>() / n;
            let var = sources.iter().map(|s| (f64::from(s[d]) - mean).powi(2)).sum::<f64>() / (n - 1.0);
            config.noise_sigma_scale * var.sqrt()
        })
        .collect();

    let mut rng = rng::seeded(seed);
    let mut copies = Vec::with_capacity(extra);
    for k in 0..extra {
        let src = sources[k % sources.len()];
        let embedding = src
            .iter()
            .zip(&sigma)
            .map(|(&v, &s)| {
                let noise = if s > 0.0 {
                    Normal::new(0.0, s).expect("positive sigma").sample(&mut rng)
                } else {
                    0.0
                };
                (f64::from(v) + noise) as f32
            })
            .collect();
        copies.push(LabeledEmbedding {
            embedding,
            label: minority_label,
        });
    }
    let mut out = examples;
    out.extend(copies);
    Ok(out)
}

/// Splits examples into batches that each receive a proportional share of both classes.
fn stratified_batches(labels: &[bool], batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_batches = labels.len().div_ceil(batch_size).max(1);
    let share = |v: &[usize], b: usize| {
        let lo = b * v.len() / n_batches;
        let hi = (b + 1) * v.len() / n_batches;
        v[lo..hi].to_vec()
    };
    (0..n_batches)
        .map(|b| {
            let mut batch = share(&pos, b);
            batch.extend(share(&neg, b));
            batch
        })
        .collect()
}

/// Per-epoch mean losses, useful for diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub phase1: Vec<f64>,
    pub phase2: Vec<f64>,
}

/// Parameters captured at the end of each phase.
#[derive(Clone, Debug)]
pub struct TrainedPhases {
    pub after_phase1: EncoderParams,
    pub after_phase2: EncoderParams,
    pub log: TrainingLog,
}

/// Collects the labeled training examples (store order) from `labels`.
pub fn labeled_examples(workload: &Workload, labels: &LabelSet) -> Result<Vec<LabeledEmbedding>> {
    labels.check_subset_of(&workload.collection)?;
    Ok(workload
        .collection
        .iter()
        .filter_map(|(id, row)| {
            labels.get(id).map(|label| LabeledEmbedding {
                embedding: row.to_vec(),
                label,
            })
        })
        .collect())
}

pub fn train_proxy(workload: &Workload, train_labels: &LabelSet, config: &TrainingConfig) -> Result<EncoderParams> {
    Ok(train_proxy_phases(workload, train_labels, config)?.after_phase2)
}

/// Runs both phases and keeps the phase-1 snapshot.
pub fn train_proxy_phases(
    workload: &Workload,
    train_labels: &LabelSet,
    config: &TrainingConfig,
) -> Result<TrainedPhases> {
    config.validate()?;
    let examples = labeled_examples(workload, train_labels)?;
    let examples = rebalance(examples, config, rng::derive(config.seed, 2))?;
    let query = workload.query_embedding.as_slice();
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();

    let mut params = EncoderParams::init(workload.collection.dim(), &config.architecture, rng::derive(config.seed, 1));
    let mut batch_rng = rng::seeded(rng::derive(config.seed, 3));
    let mut log = TrainingLog::default();

    let mut run_phase = |params: &mut EncoderParams,
                         epochs: usize,
                         losses: &mut Vec<f64>,
                         step: &dyn Fn(&EncoderParams, &MiniBatch) -> Result<(f64, EncoderParams)>|
     -> Result<()> {
        let mut adam = Adam::new(params, config.learning_rate);
        for _ in 0..epochs {
            let mut total = 0.0;
            let mut count = 0usize;
            for idx in stratified_batches(&labels, config.batch_size, &mut batch_rng) {
                let batch_labels: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                let m = batch_labels.iter().filter(|&&l| l).count();
                if idx.len() < 2 || m == 0 || m == idx.len() {
                    continue;
                }
                let docs: Vec<&[f32]> = idx.iter().map(|&i| examples[i].embedding.as_slice()).collect();
                let batch = MiniBatch::new(query, &docs, &batch_labels)?;
                let (loss, grads) = step(params, &batch)?;
                adam.step(params, &grads);
                total += loss;
                count += 1;
            }
            losses.push(if count > 0 { total / count as f64 } else { 0.0 });
        }
        Ok(())
    };

    let tau = config.temperature;
    run_phase(&mut params, config.epochs_phase1, &mut log.phase1, &|p, b| loss_qsim(p, b, tau))?;
    let after_phase1 = params.clone();
    let (lambda, rule) = (config.lambda, config.bellwether);
    run_phase(&mut params, config.epochs_phase2, &mut log.phase2, &|p, b| {
        loss_phase2(p, b, tau, lambda, rule)
    })?;

    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trained encoder parameters".into()));
    }
    Ok(TrainedPhases {
        after_phase1,
        after_phase2: params,
        log,
    })
}
