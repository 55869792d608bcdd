//! The three contrastive objectives and their analytic gradients.
//!
//! All losses are computed on projector outputs of a mini-batch laid out as
//! rows `[query, doc_1, ..., doc_n]`. Each loss first produces `dL/dS` for the
//! pairwise cosine matrix `S`, which is then pulled back to the latent rows and
//! through the projector and encoder.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::mlp::EncoderParams;
use crate::error::{Error, Result};

/// Which documents anchor the polarization loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellwetherRule {
    /// Least query-similar positive and most query-similar negative.
    #[default]
    Hardest,
    /// Most query-similar positive and least query-similar negative.
    Easiest,
}

/// A query plus `n >= 2` labeled documents.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    /// Row 0 is the query; rows `1..=n` are the documents.
    inputs: Array2<f64>,
    labels: Vec<bool>,
}

impl MiniBatch {
    pub fn new(query: &[f32], docs: &[&[f32]], labels: &[bool]) -> Result<Self> {
        if docs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} documents but {} labels",
                docs.len(),
                labels.len()
            )));
        }
        if docs.len() < 2 {
            return Err(Error::InvalidArgument("a mini-batch needs at least 2 documents".into()));
        }
        let dim = query.len();
        let mut inputs = Array2::zeros((docs.len() + 1, dim));
        for (r, row) in std::iter::once(query).chain(docs.iter().copied()).enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                inputs[[r, c]] = f64::from(v);
            }
        }
        Ok(Self {
            inputs,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub(crate) fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    fn check_both_classes(&self) -> Result<()> {
        let m = self.positives();
        if m == 0 || m == self.len() {
            return Err(Error::DegenerateWorkload(format!(
                "mini-batch has {m} positives and {} negatives; both classes are required",
                self.len() - m
            )));
        }
        Ok(())
    }
}

/// Indices of the two polarization anchors within the batch's documents (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bellwethers {
    pub positive: usize,
    pub negative: usize,
}

/// Unit-normalized rows and their pairwise cosine matrix.
pub(crate) struct Cosines {
    unit: Array2<f64>,
    norms: Array1<f64>,
    pub sims: Array2<f64>,
}

impl Cosines {
    pub fn new(z: ArrayView2<f64>) -> Result<Self> {
        let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
            let who = if i == 0 { "query".to_string() } else { format!("batch document {}", i - 1) };
            return Err(Error::DegenerateLatent(who));
        }
        let unit = &z / &norms.view().insert_axis(Axis(1));
        let sims = unit.dot(&unit.t());
        Ok(Self { unit, norms, sims })
    }

    /// Pulls `dL/dS` back to `dL/dz` for every row.
    pub fn backward(&self, g_sims: &Array2<f64>) -> Array2<f64> {
        let sym = g_sims + &g_sims.t();
        let mut du = sym.dot(&self.unit);
        for (i, mut row) in du.axis_iter_mut(Axis(0)).enumerate() {
            let u = self.unit.row(i);
            let radial = row.dot(&u);
            row.zip_mut_with(&u, |d, &uv| *d -= radial * uv);
            row /= self.norms[i];
        }
        du
    }
}

/// `-log(sum_{k in pos} e^{s_k/t} / sum_{k in all} e^{s_k/t})` for one anchor row, with
/// `dL/ds_k` accumulated into `g_row` scaled by `weight`. `pos` must be a subset of `all`.
fn anchor_nll(
    sims: &Array2<f64>,
    anchor: usize,
    pos: &[usize],
    rest: &[usize],
    tau: f64,
    weight: f64,
    g: &mut Array2<f64>,
) -> f64 {
    let logit = |k: usize| sims[[anchor, k]] / tau;
    let shift = pos
        .iter()
        .chain(rest)
        .map(|&k| logit(k))
        .fold(f64::NEG_INFINITY, f64::max);
    let pos_sum: f64 = pos.iter().map(|&k| (logit(k) - shift).exp()).sum();
    let rest_sum: f64 = rest.iter().map(|&k| (logit(k) - shift).exp()).sum();
    let all_sum = pos_sum + rest_sum;
    let loss = all_sum.ln() - pos_sum.ln();
    for &k in pos {
        let e = (logit(k) - shift).exp();
        g[[anchor, k]] += weight * (e / all_sum - e / pos_sum) / tau;
    }
    for &k in rest {
        let e = (logit(k) - shift).exp();
        g[[anchor, k]] += weight * (e / all_sum) / tau;
    }
    loss
}

/// Document row indices (offset by one for the query row) split by label.
fn split_rows(labels: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let pos = (0..labels.len()).filter(|&i| labels[i]).map(|i| i + 1).collect();
    let neg = (0..labels.len()).filter(|&i| !labels[i]).map(|i| i + 1).collect();
    (pos, neg)
}

/// Query-anchored InfoNCE over positives vs. all documents.
pub(crate) fn qsim_on_latents(z: ArrayView2<f64>, labels: &[bool], tau: f64) -> Result<(f64, Array2<f64>)> {
    let cos = Cosines::new(z)?;
    let (pos, neg) = split_rows(labels);
    let mut g = Array2::zeros(cos.sims.raw_dim());
    let loss = anchor_nll(&cos.sims, 0, &pos, &neg, tau, 1.0, &mut g);
    Ok((loss, cos.backward(&g)))
}

/// Supervised contrastive loss summed over document anchors; anchors with no
/// same-label partner contribute nothing.
pub(crate) fn supcon_on_latents(z: ArrayView2<f64>, labels: &[bool], tau: f64) -> Result<(f64, Array2<f64>)> {
    let cos = Cosines::new(z)?;
    let n = labels.len();
    let mut g = Array2::zeros(cos.sims.raw_dim());
    let mut loss = 0.0;
    let mut same = Vec::with_capacity(n);
    let mut other = Vec::with_capacity(n);
    for i in 0..n {
        same.clear();
        other.clear();
        for k in (0..n).filter(|&k| k != i) {
            if labels[k] == labels[i] {
                same.push(k + 1);
            } else {
                other.push(k + 1);
            }
        }
        if same.is_empty() {
            continue;
        }
        let w = 1.0 / same.len() as f64;
        loss += w * anchor_nll(&cos.sims, i + 1, &same, &other, tau, w, &mut g);
    }
    Ok((loss, cos.backward(&g)))
}

pub(crate) fn select_bellwethers(sims: &Array2<f64>, labels: &[bool], rule: BellwetherRule) -> Bellwethers {
    let score = |i: usize| sims[[0, i + 1]];
    let pick = |want: bool, prefer_high: bool| {
        let mut best: Option<usize> = None;
        for i in (0..labels.len()).filter(|&i| labels[i] == want) {
            best = match best {
                None => Some(i),
                Some(b) if (prefer_high && score(i) > score(b)) || (!prefer_high && score(i) < score(b)) => {
                    Some(i)
                }
                keep => keep,
            };
        }
        best.expect("class present")
    };
    match rule {
        BellwetherRule::Hardest => Bellwethers {
            positive: pick(true, false),
            negative: pick(false, true),
        },
        BellwetherRule::Easiest => Bellwethers {
            positive: pick(true, true),
            negative: pick(false, false),
        },
    }
}

/// Polarization loss around the two bellwethers. Bellwether choice is held fixed
/// (no gradient through the selection).
pub(crate) fn polar_on_latents(
    z: ArrayView2<f64>,
    labels: &[bool],
    tau: f64,
    rule: BellwetherRule,
) -> Result<(f64, Array2<f64>, Bellwethers)> {
    let cos = Cosines::new(z)?;
    let (pos, neg) = split_rows(labels);
    let bw = select_bellwethers(&cos.sims, labels, rule);
    let mut g = Array2::zeros(cos.sims.raw_dim());
    let loss = anchor_nll(&cos.sims, bw.positive + 1, &pos, &neg, tau, 1.0, &mut g)
        + anchor_nll(&cos.sims, bw.negative + 1, &neg, &pos, tau, 1.0, &mut g);
    Ok((loss, cos.backward(&g), bw))
}

/// Forward activations of a batch through encoder and projector.
pub(crate) struct Trace {
    enc: Vec<Array2<f64>>,
    proj: Vec<Array2<f64>>,
}

impl Trace {
    pub fn run(params: &EncoderParams, batch: &MiniBatch) -> Result<Self> {
        if batch.inputs.ncols() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                found: batch.inputs.ncols(),
            });
        }
        let enc = params.encoder.forward_trace(batch.inputs());
        let proj = params.projector.forward_trace(enc.last().expect("layers").view());
        Ok(Self { enc, proj })
    }

    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.proj.last().expect("layers").view()
    }

    pub fn backward(&self, params: &EncoderParams, grad_out: Array2<f64>) -> EncoderParams {
        let mut grads = params.zeros_like();
        let g_latent = params
            .projector
            .backward(&self.proj, grad_out, &mut grads.projector, true)
            .expect("input gradient requested");
        params.encoder.backward(&self.enc, g_latent, &mut grads.encoder, false);
        grads
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn loss_qsim(params: &EncoderParams, batch: &MiniBatch, tau: f64) -> Result<(f64, EncoderParams)> {
    check_tau(tau)?;
    batch.check_both_classes()?;
    let trace = Trace::run(params, batch)?;
    let (loss, gz) = qsim_on_latents(trace.output(), &batch.labels, tau)?;
    Ok((loss, trace.backward(params, gz)))
}

pub fn loss_supcon(params: &EncoderParams, batch: &MiniBatch, tau: f64) -> Result<(f64, EncoderParams)> {
    check_tau(tau)?;
    let trace = Trace::run(params, batch)?;
    let (loss, gz) = supcon_on_latents(trace.output(), &batch.labels, tau)?;
    Ok((loss, trace.backward(params, gz)))
}

pub fn loss_polar(
    params: &EncoderParams,
    batch: &MiniBatch,
    tau: f64,
    rule: BellwetherRule,
) -> Result<(f64, EncoderParams, Bellwethers)> {
    check_tau(tau)?;
    batch.check_both_classes()?;
    let trace = Trace::run(params, batch)?;
    let (loss, gz, bw) = polar_on_latents(trace.output(), &batch.labels, tau, rule)?;
    Ok((loss, trace.backward(params, gz), bw))
}

/// `lambda * supcon + (1 - lambda) * polar` from a single forward pass.
pub fn loss_phase2(
    params: &EncoderParams,
    batch: &MiniBatch,
    tau: f64,
    lambda: f64,
    rule: BellwetherRule,
) -> Result<(f64, EncoderParams)> {
    check_tau(tau)?;
    batch.check_both_classes()?;
    let trace = Trace::run(params, batch)?;
    let (l_sup, g_sup) = supcon_on_latents(trace.output(), &batch.labels, tau)?;
    let (l_pol, g_pol, _) = polar_on_latents(trace.output(), &batch.labels, tau, rule)?;
    let gz = g_sup * lambda + g_pol * (1.0 - lambda);
    Ok((lambda * l_sup + (1.0 - lambda) * l_pol, trace.backward(params, gz)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn z_with_sims(query_to_docs: &[f64]) -> Array2<f64> {
        // Unit vectors in 2-D at the angles that realise the requested cosines to the query.
        let mut z = Array2::zeros((query_to_docs.len() + 1, 2));
        z[[0, 0]] = 1.0;
        for (i, &c) in query_to_docs.iter().enumerate() {
            let s = (1.0 - c * c).max(0.0).sqrt();
            z[[i + 1, 0]] = c;
            z[[i + 1, 1]] = s;
        }
        z
    }

    #[test]
    fn qsim_equal_similarities_is_ln2() {
        let z = z_with_sims(&[0.3, 0.3]);
        let (loss, _) = qsim_on_latents(z.view(), &[true, false], 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn qsim_separated_is_tiny() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        let (loss, _) = qsim_on_latents(z.view(), &[true, false], 0.1).unwrap();
        let expected = (-20.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15, "{loss} vs {expected}");
    }

    #[test]
    fn qsim_is_stable_at_small_temperature() {
        let z = array![[1.0, 0.0], [0.9, 0.1], [-1.0, 0.2], [0.5, 0.5]];
        let (loss, g) = qsim_on_latents(z.view(), &[false, true, false], 0.01).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn supcon_two_same_label_is_zero() {
        let z = array![[1.0, 0.0], [0.2, 0.9], [0.7, -0.3]];
        let (loss, _) = supcon_on_latents(z.view(), &[true, true], 0.1).unwrap();
        assert!(loss.abs() < 1e-12);
        let (loss, _) = supcon_on_latents(z.view(), &[false, false], 0.1).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn supcon_two_different_labels_is_zero_by_convention() {
        let z = array![[1.0, 0.0], [0.2, 0.9], [0.7, -0.3]];
        let (loss, g) = supcon_on_latents(z.view(), &[true, false], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn polar_singleton_bellwethers() {
        let z = array![[1.0, 0.0], [0.2, 0.9], [0.7, -0.3]];
        let (_, _, bw) = polar_on_latents(z.view(), &[false, true], 0.1, BellwetherRule::Hardest).unwrap();
        assert_eq!(bw, Bellwethers { positive: 1, negative: 0 });
    }

    #[test]
    fn polar_separated_is_tiny() {
        // Two positives on +x, two negatives on -x: each anchor sees +1 within class, -1 across.
        let z = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]];
        let (loss, _, _) = polar_on_latents(z.view(), &[true, true, false, false], 0.1, BellwetherRule::Hardest).unwrap();
        // Each term: -log(2e^10 / (2e^10 + 2e^-10)) = log(1 + e^-20).
        let expected = 2.0 * (-20.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn bellwether_rules_pick_opposite_ends() {
        let z = z_with_sims(&[0.9, 0.1, 0.8, -0.5]);
        let labels = [true, true, false, false];
        let cos = Cosines::new(z.view()).unwrap();
        assert_eq!(
            select_bellwethers(&cos.sims, &labels, BellwetherRule::Hardest),
            Bellwethers { positive: 1, negative: 2 }
        );
        assert_eq!(
            select_bellwethers(&cos.sims, &labels, BellwetherRule::Easiest),
            Bellwethers { positive: 0, negative: 3 }
        );
    }

    #[test]
    fn missing_class_is_an_error() {
        let params = EncoderParams::init(
            2,
            &super::super::mlp::Architecture {
                hidden1: 3,
                hidden2: 3,
                latent: 2,
                projector_hidden: 2,
                projector_out: 2,
            },
            0,
        );
        let batch = MiniBatch::new(&[1.0, 0.0], &[&[0.5, 0.5], &[0.1, 0.2]], &[true, true]).unwrap();
        assert!(matches!(loss_qsim(&params, &batch, 0.1), Err(Error::DegenerateWorkload(_))));
        assert!(loss_polar(&params, &batch, 0.1, BellwetherRule::Hardest).is_err());
        assert!(loss_supcon(&params, &batch, 0.1).is_ok());
    }

    #[test]
    fn zero_latent_is_reported() {
        let z = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            qsim_on_latents(z.view(), &[true, false], 0.1),
            Err(Error::DegenerateLatent(who)) if who == "query"
        ));
    }
}
