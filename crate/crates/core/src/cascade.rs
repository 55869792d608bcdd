//! Threshold selection and cascade execution.
//!
//! Documents scoring above `rb` are accepted by the proxy, those below `lb` are
//! rejected by the proxy, and everything in the closed interval `[lb, rb]` is
//! sent to the oracle.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{BinGrid, Calibration};
use crate::error::{Error, Result};
use crate::oracle::{label_batch, Oracle};
use crate::proxy::ScoreSet;
use crate::store::LabelSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairRepr", into = "PairRepr")]
pub struct ThresholdPair {
    lb: f64,
    rb: f64,
}

#[derive(Serialize, Deserialize)]
struct PairRepr {
    lb: f64,
    rb: f64,
}

impl TryFrom<PairRepr> for ThresholdPair {
    type Error = Error;

    fn try_from(r: PairRepr) -> Result<Self> {
        ThresholdPair::new(r.lb, r.rb)
    }
}

impl From<ThresholdPair> for PairRepr {
    fn from(t: ThresholdPair) -> Self {
        PairRepr { lb: t.lb, rb: t.rb }
    }
}

impl ThresholdPair {
    pub fn new(lb: f64, rb: f64) -> Result<Self> {
        if !(0.0 <= lb && lb <= rb && rb <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must satisfy 0 <= lb <= rb <= 1, got ({lb}, {rb})"
            )));
        }
        Ok(Self { lb, rb })
    }

    /// Everything goes to the oracle.
    pub fn all_oracle() -> Self {
        Self { lb: 0.0, rb: 1.0 }
    }

    pub fn lb(&self) -> f64 {
        self.lb
    }

    pub fn rb(&self) -> f64 {
        self.rb
    }

    pub fn contains(&self, s: f64) -> bool {
        self.lb <= s && s <= self.rb
    }
}

/// Fraction of scores inside `[lb, rb]`.
pub fn unfiltered_rate(scores: &ScoreSet, t: &ThresholdPair) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("score set is empty".into()));
    }
    let inside = scores.values().filter(|&s| t.contains(s)).count();
    Ok(inside as f64 / scores.len() as f64)
}

/// Accuracy and unfiltered-mass estimates derived from a calibration.
///
/// `Acc(lb, rb) = pi_P * P(s > rb | P) + pi_N * P(s < lb | N) + pi_P * P(lb <= s <= rb | P)
///   + pi_N * P(lb <= s <= rb | N)`, which collapses to
/// `pi_P * P(s >= lb | P) + pi_N * P(s <= rb | N)`; that grouped form is what is
/// evaluated, so it is monotone in both thresholds even in floating point.
#[derive(Clone, Debug)]
pub struct AccuracyModel {
    grid: BinGrid,
    cal: Calibration,
    cdf_p: Vec<f64>,
    cdf_n: Vec<f64>,
}

impl AccuracyModel {
    pub fn new(cal: &Calibration) -> Result<Self> {
        if cal.pdf_p.grid() != cal.pdf_n.grid() {
            return Err(Error::GridMismatch {
                left: cal.pdf_p.grid().n_bins(),
                right: cal.pdf_n.grid().n_bins(),
            });
        }
        if !((cal.prior_p + cal.prior_n) - 1.0).abs().lt(&1e-9) || cal.prior_p < 0.0 || cal.prior_n < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "priors must be non-negative and sum to 1, got {} and {}",
                cal.prior_p, cal.prior_n
            )));
        }
        Ok(Self {
            grid: *cal.pdf_p.grid(),
            cdf_p: cal.pdf_p.cdf_edges(),
            cdf_n: cal.pdf_n.cdf_edges(),
            cal: cal.clone(),
        })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    fn combine(&self, lower_p: f64, total_p: f64, upper_n: f64) -> f64 {
        self.cal.prior_p * (total_p - lower_p) + self.cal.prior_n * upper_n
    }

    pub fn estimate_accuracy(&self, t: &ThresholdPair) -> f64 {
        self.combine(self.cal.pdf_p.cdf(t.lb), self.cal.pdf_p.cdf(1.0), self.cal.pdf_n.cdf(t.rb))
    }

    /// Estimated probability mass inside `[lb, rb]`.
    pub fn unfiltered_mass(&self, t: &ThresholdPair) -> f64 {
        let p = self.cal.pdf_p.cdf(t.rb) - self.cal.pdf_p.cdf(t.lb);
        let n = self.cal.pdf_n.cdf(t.rb) - self.cal.pdf_n.cdf(t.lb);
        self.cal.prior_p * p + self.cal.prior_n * n
    }

    /// Accuracy with thresholds at grid edges `l <= r`.
    pub fn accuracy_at(&self, l: usize, r: usize) -> f64 {
        let last = self.cdf_p.len() - 1;
        self.combine(self.cdf_p[l], self.cdf_p[last], self.cdf_n[r])
    }

    pub fn unfiltered_at(&self, l: usize, r: usize) -> f64 {
        self.cal.prior_p * (self.cdf_p[r] - self.cdf_p[l]) + self.cal.prior_n * (self.cdf_n[r] - self.cdf_n[l])
    }

    pub fn pair_at(&self, l: usize, r: usize) -> ThresholdPair {
        ThresholdPair {
            lb: self.grid.edge(l),
            rb: self.grid.edge(r),
        }
    }
}

pub fn estimate_accuracy(cal: &Calibration, t: &ThresholdPair) -> Result<f64> {
    Ok(AccuracyModel::new(cal)?.estimate_accuracy(t))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("accuracy target {alpha} outside (0, 1]")));
    }
    Ok(())
}

/// Edge-index pairs visited by the frontier walk, in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrontierPath {
    pub l0: usize,
    pub r0: usize,
    pub points: Vec<(usize, usize)>,
}

/// Boundary identification and frontier traversal over grid edges.
///
/// `l0` is the highest lower edge that stays feasible with the upper threshold
/// at 1, `r0` the lowest upper edge feasible with the lower threshold at 0.
/// The walk starts at `(0, r0)` and ends at `(l0, last)`: at each step it
/// tightens `l` by one bin if that stays feasible (and `l <= r`), otherwise it
/// loosens `r` by one bin. Every visited point is feasible, and for every `l`
/// the walk passes through the smallest feasible `r`.
pub fn frontier_path(model: &AccuracyModel, alpha: f64) -> Result<FrontierPath> {
    check_alpha(alpha)?;
    let first = 0;
    let last = model.grid().n_edges() - 1;
    let feasible = |l: usize, r: usize| l <= r && model.accuracy_at(l, r) >= alpha;

    let mut l0 = first;
    for l in first..=last {
        if feasible(l, last) {
            l0 = l;
        } else {
            break;
        }
    }
    let mut r0 = last;
    for r in (first..=last).rev() {
        if feasible(first, r) {
            r0 = r;
        } else {
            break;
        }
    }

    let (mut l, mut r) = (first, r0);
    let mut points = vec![(l, r)];
    while (l, r) != (l0, last) {
        if l + 1 <= last && feasible(l + 1, r) {
            l += 1;
        } else {
            r += 1;
        }
        points.push((l, r));
    }
    Ok(FrontierPath { l0, r0, points })
}

/// The frontier point with the smallest estimated unfiltered mass (first on ties).
pub fn select_thresholds(model: &AccuracyModel, alpha: f64) -> Result<ThresholdPair> {
    let path = frontier_path(model, alpha)?;
    let mut best = path.points[0];
    let mut best_u = model.unfiltered_at(best.0, best.1);
    for &(l, r) in &path.points[1..] {
        let u = model.unfiltered_at(l, r);
        if u < best_u {
            best = (l, r);
            best_u = u;
        }
    }
    Ok(model.pair_at(best.0, best.1))
}

/// Exhaustive search over all edge pairs `l <= r`; ties go to the smallest `l`, then `r`.
pub fn brute_force_thresholds(model: &AccuracyModel, alpha: f64) -> Result<ThresholdPair> {
    check_alpha(alpha)?;
    let (best, _) = exhaustive_search(
        model.grid().n_edges(),
        |l, r| model.accuracy_at(l, r) >= alpha,
        |l, r| model.unfiltered_at(l, r),
    );
    // (0, last) has accuracy 1 up to rounding, so it stands in when nothing passes.
    let (l, r) = best.unwrap_or((0, model.grid().n_edges() - 1));
    Ok(model.pair_at(l, r))
}

/// Returns the best feasible pair and the number of pairs evaluated.
fn exhaustive_search(
    n_edges: usize,
    feasible: impl Fn(usize, usize) -> bool,
    unfiltered: impl Fn(usize, usize) -> f64,
) -> (Option<(usize, usize)>, usize) {
    let mut best: Option<((usize, usize), f64)> = None;
    let mut evaluated = 0;
    for l in 0..n_edges {
        for r in l..n_edges {
            evaluated += 1;
            if !feasible(l, r) {
                continue;
            }
            let u = unfiltered(l, r);
            if best.is_none_or(|(_, bu)| u < bu) {
                best = Some(((l, r), u));
            }
        }
    }
    (best.map(|(p, _)| p), evaluated)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ProxyPositive,
    ProxyNegative,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub label: bool,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub decisions: BTreeMap<String, Decision>,
    pub thresholds: ThresholdPair,
    pub unfiltered_rate: f64,
    pub estimated_accuracy: f64,
}

#[derive(Serialize)]
struct DecisionLine<'a> {
    doc_id: &'a str,
    label: bool,
    provenance: Provenance,
}

impl CascadeResult {
    pub fn count(&self, provenance: Provenance) -> usize {
        self.decisions.values().filter(|d| d.provenance == provenance).count()
    }

    pub fn labels(&self) -> LabelSet {
        self.decisions.iter().map(|(k, d)| (k.clone(), d.label)).collect()
    }

    /// JSON Lines of `{"doc_id":..., "label":..., "provenance":...}` sorted by doc_id.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (doc_id, d) in &self.decisions {
            let line = DecisionLine {
                doc_id,
                label: d.label,
                provenance: d.provenance,
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<BTreeMap<String, Decision>> {
        #[derive(Deserialize)]
        struct Line {
            doc_id: String,
            label: bool,
            provenance: Provenance,
        }
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: Line = serde_json::from_str(line).map_err(|e| Error::json(path, e))?;
            if out
                .insert(
                    l.doc_id.clone(),
                    Decision {
                        label: l.label,
                        provenance: l.provenance,
                    },
                )
                .is_some()
            {
                return Err(Error::DuplicateId(l.doc_id));
            }
        }
        Ok(out)
    }
}

/// Oracle failure part-way through a cascade; `completed` holds every decision made.
#[derive(Debug, thiserror::Error)]
#[error("cascade incomplete: {} decisions made, oracle failed on {failed_doc}: {source}", completed.len())]
pub struct PartialCascade {
    pub completed: BTreeMap<String, Decision>,
    pub failed_doc: String,
    #[source]
    pub source: crate::oracle::OracleError,
}

/// Applies the thresholds, asking `oracle` about every document inside `[lb, rb]`.
pub async fn execute_cascade(
    scores: &ScoreSet,
    t: ThresholdPair,
    oracle: &dyn Oracle,
    query_text: &str,
    estimated_accuracy: f64,
    max_concurrent: usize,
) -> Result<CascadeResult, PartialCascade> {
    let mut decisions = BTreeMap::new();
    let mut ambiguous = Vec::new();
    for (id, s) in scores.iter() {
        if s > t.rb {
            decisions.insert(
                id.to_string(),
                Decision {
                    label: true,
                    provenance: Provenance::ProxyPositive,
                },
            );
        } else if s < t.lb {
            decisions.insert(
                id.to_string(),
                Decision {
                    label: false,
                    provenance: Provenance::ProxyNegative,
                },
            );
        } else {
            ambiguous.push(id.to_string());
        }
    }
    let unfiltered_rate = if scores.is_empty() {
        0.0
    } else {
        ambiguous.len() as f64 / scores.len() as f64
    };
    let oracle_decision = |label| Decision {
        label,
        provenance: Provenance::Oracle,
    };
    match label_batch(oracle, query_text, &ambiguous, max_concurrent).await {
        Ok(labels) => {
            decisions.extend(labels.into_iter().map(|(id, l)| (id, oracle_decision(l))));
            Ok(CascadeResult {
                decisions,
                thresholds: t,
                unfiltered_rate,
                estimated_accuracy,
            })
        }
        Err(partial) => {
            decisions.extend(partial.completed.into_iter().map(|(id, l)| (id, oracle_decision(l))));
            Err(PartialCascade {
                completed: decisions,
                failed_doc: partial.failed_doc,
                source: partial.source,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::ReconstructedDistribution;
    use crate::oracle::MockOracle;
    use crate::rng;
    use rand::Rng;

    fn scores(values: &[f64]) -> ScoreSet {
        let mut s = ScoreSet::new();
        for (i, &v) in values.iter().enumerate() {
            s.insert(format!("d{i}"), v).unwrap();
        }
        s
    }

    fn cal_from(grid: BinGrid, p: &[f64], n: &[f64], prior_p: f64) -> Calibration {
        Calibration {
            pdf_p: ReconstructedDistribution::from_bin_masses(grid, p, 10).unwrap(),
            pdf_n: ReconstructedDistribution::from_bin_masses(grid, n, 10).unwrap(),
            prior_p,
            prior_n: 1.0 - prior_p,
            sample_size: 20,
        }
    }

    fn random_model(r: &mut rng::Rng, n_bins: usize) -> AccuracyModel {
        let g = BinGrid::new(n_bins).unwrap();
        let p: Vec<f64> = (0..n_bins).map(|i| r.random::<f64>() * (i as f64 / n_bins as f64)).collect();
        let n: Vec<f64> = (0..n_bins).map(|i| r.random::<f64>() * (1.0 - i as f64 / n_bins as f64)).collect();
        AccuracyModel::new(&cal_from(g, &p, &n, r.random_range(0.05..0.95))).unwrap()
    }

    #[test]
    fn unfiltered_rate_examples() {
        let s = scores(&[0.1, 0.5, 0.9]);
        assert_eq!(unfiltered_rate(&s, &ThresholdPair::all_oracle()).unwrap(), 1.0);
        assert_eq!(unfiltered_rate(&s, &ThresholdPair::new(0.2, 0.8).unwrap()).unwrap(), 1.0 / 3.0);
        assert_eq!(unfiltered_rate(&s, &ThresholdPair::new(0.5, 0.5).unwrap()).unwrap(), 1.0 / 3.0);
        assert!(unfiltered_rate(&ScoreSet::new(), &ThresholdPair::all_oracle()).is_err());
    }

    #[test]
    fn threshold_pair_invariants() {
        assert!(ThresholdPair::new(0.6, 0.5).is_err());
        assert!(ThresholdPair::new(-0.1, 0.5).is_err());
        assert!(ThresholdPair::new(0.1, 1.1).is_err());
        let t: std::result::Result<ThresholdPair, _> = serde_json::from_str(r#"{"lb":0.7,"rb":0.2}"#);
        assert!(t.is_err());
    }

    #[test]
    fn full_oracle_interval_is_perfect() {
        let g = BinGrid::new(8).unwrap();
        let m = AccuracyModel::new(&cal_from(g, &[1.0; 8], &[2.0; 8], 0.4)).unwrap();
        assert!((m.estimate_accuracy(&ThresholdPair::all_oracle()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_pdfs() {
        let g = BinGrid::new(8).unwrap();
        let p = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
        let n = [1.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let m = AccuracyModel::new(&cal_from(g, &p, &n, 0.3)).unwrap();
        // The interpolated tails meet at the middle edge.
        let mid = ThresholdPair::new(0.5, 0.5).unwrap();
        assert!((m.estimate_accuracy(&mid) - 1.0).abs() < 1e-12);
        for alpha in [0.5, 0.9, 1.0] {
            let t = select_thresholds(&m, alpha).unwrap();
            assert_eq!(t.lb(), t.rb(), "alpha {alpha}");
            assert!(m.unfiltered_mass(&t) < 1e-12);
            let b = brute_force_thresholds(&m, alpha).unwrap();
            assert!(m.unfiltered_mass(&b) < 1e-12);
        }
    }

    #[test]
    fn identical_pdfs_at_full_accuracy_need_the_oracle_everywhere() {
        let g = BinGrid::new(16).unwrap();
        let m = AccuracyModel::new(&cal_from(g, &[1.0; 16], &[1.0; 16], 0.5)).unwrap();
        let t = select_thresholds(&m, 1.0).unwrap();
        assert_eq!(t, ThresholdPair::all_oracle());
        assert!((m.unfiltered_mass(&t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_edge_grid_has_three_pairs() {
        let (best, evaluated) = exhaustive_search(2, |_, _| true, |l, r| (r - l) as f64);
        assert_eq!(evaluated, 3);
        assert_eq!(best, Some((0, 0)));
        let (_, evaluated) = exhaustive_search(65, |_, _| true, |_, _| 0.0);
        assert_eq!(evaluated, 65 * 66 / 2);
    }

    #[test]
    fn frontier_points_are_feasible_and_walk_is_monotone() {
        let mut r = rng::seeded(3);
        for _ in 0..50 {
            let m = random_model(&mut r, 32);
            let alpha = r.random_range(0.7..1.0);
            let path = frontier_path(&m, alpha).unwrap();
            for w in path.points.windows(2) {
                let ((l1, r1), (l2, r2)) = (w[0], w[1]);
                assert!((l2 == l1 + 1 && r2 == r1) || (l2 == l1 && r2 == r1 + 1));
            }
            for &(l, rr) in &path.points {
                assert!(l <= rr && m.accuracy_at(l, rr) >= alpha);
            }
        }
    }

    #[test]
    fn frontier_matches_brute_force() {
        let mut r = rng::seeded(11);
        for _ in 0..200 {
            let m = random_model(&mut r, 24);
            let alpha = r.random_range(0.5..1.0);
            let fast = select_thresholds(&m, alpha).unwrap();
            let slow = brute_force_thresholds(&m, alpha).unwrap();
            assert!(m.estimate_accuracy(&fast) >= alpha - 1e-12);
            assert_eq!(m.unfiltered_mass(&fast), m.unfiltered_mass(&slow));
        }
    }

    #[test]
    fn bad_alpha_is_rejected() {
        let mut r = rng::seeded(1);
        let m = random_model(&mut r, 8);
        assert!(select_thresholds(&m, 0.0).is_err());
        assert!(brute_force_thresholds(&m, 1.5).is_err());
    }

    #[tokio::test]
    async fn cascade_routes_by_threshold() {
        let s = scores(&[0.05, 0.3, 0.5, 0.7, 0.95]);
        let truth: LabelSet = (0..5).map(|i| (format!("d{i}"), i >= 3)).collect();
        let oracle = MockOracle::new(truth.clone());

        let all = execute_cascade(&s, ThresholdPair::all_oracle(), &oracle, "q", 1.0, 4).await.unwrap();
        assert_eq!(all.count(Provenance::Oracle), 5);
        assert_eq!(all.labels(), truth);

        let none = execute_cascade(&s, ThresholdPair::new(0.0, 0.0).unwrap(), &oracle, "q", 0.5, 4)
            .await
            .unwrap();
        assert_eq!(none.count(Provenance::ProxyPositive), 5);
        assert_eq!(none.unfiltered_rate, 0.0);

        let mid = execute_cascade(&s, ThresholdPair::new(0.3, 0.7).unwrap(), &oracle, "q", 0.9, 4)
            .await
            .unwrap();
        assert_eq!(mid.count(Provenance::ProxyNegative), 1);
        assert_eq!(mid.count(Provenance::ProxyPositive), 1);
        assert_eq!(mid.count(Provenance::Oracle), 3);
        assert_eq!(mid.decisions.len(), 5);
        assert_eq!(mid.unfiltered_rate, 0.6);
    }

    #[tokio::test]
    async fn oracle_failure_keeps_completed_decisions() {
        let s = scores(&[0.05, 0.5, 0.6]);
        let mut partial_truth = LabelSet::new();
        partial_truth.insert("d1", true);
        let oracle = MockOracle::new(partial_truth);
        let err = execute_cascade(&s, ThresholdPair::new(0.4, 1.0).unwrap(), &oracle, "q", 0.9, 1)
            .await
            .unwrap_err();
        assert_eq!(err.failed_doc, "d2");
        assert_eq!(err.completed.len(), 2);
        assert_eq!(err.completed["d0"].provenance, Provenance::ProxyNegative);
        assert_eq!(err.completed["d1"].provenance, Provenance::Oracle);
    }
}
