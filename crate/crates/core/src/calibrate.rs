//! Reconstruction of per-class score distributions from a small, stratified,
//! oracle-labeled sample.
//!
//! A [`ReconstructedDistribution`] keeps one density value per bin, anchored at
//! the bin midpoint. The PDF is the linear interpolant through those midpoints,
//! held constant from the outermost midpoints out to 0 and 1, and is exposed as
//! its values at the `n_bins + 1` grid edges. With that anchoring the
//! trapezoidal integral over the edge values equals the histogram mass, so
//! normalization is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxy::ScoreSet;
use crate::rng;
use crate::store::LabelSet;

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 3;

/// Uniform bins over `[0, 1]`. Bin `i` covers `[i/n, (i+1)/n)`; the last bin is closed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct BinGrid {
    n_bins: usize,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    n_bins: usize,
}

impl TryFrom<GridRepr> for BinGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        BinGrid::new(r.n_bins)
    }
}

impl From<BinGrid> for GridRepr {
    fn from(g: BinGrid) -> Self {
        GridRepr { n_bins: g.n_bins }
    }
}

impl BinGrid {
    pub fn new(n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
        }
        Ok(Self { n_bins })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_edges(&self) -> usize {
        self.n_bins + 1
    }

    pub fn width(&self) -> f64 {
        1.0 / self.n_bins as f64
    }

    pub fn edge(&self, i: usize) -> f64 {
        if i >= self.n_bins {
            1.0
        } else {
            i as f64 / self.n_bins as f64
        }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n_bins).map(|i| self.edge(i)).collect()
    }

    pub fn midpoint(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) / self.n_bins as f64
    }

    /// Bin index of a score in `[0, 1]` (values outside are clamped).
    pub fn bin_of(&self, s: f64) -> usize {
        let b = (s * self.n_bins as f64).floor();
        if b < 0.0 {
            0
        } else {
            (b as usize).min(self.n_bins - 1)
        }
    }

    fn check_same(&self, other: &BinGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                left: self.n_bins,
                right: other.n_bins,
            });
        }
        Ok(())
    }
}

pub fn bin_counts(scores: impl IntoIterator<Item = f64>, grid: &BinGrid) -> Vec<usize> {
    let mut counts = vec![0; grid.n_bins()];
    for s in scores {
        counts[grid.bin_of(s)] += 1;
    }
    counts
}

pub fn discretize(scores: &ScoreSet, n_bins: usize) -> Result<(BinGrid, Vec<usize>)> {
    let grid = BinGrid::new(n_bins)?;
    let counts = bin_counts(scores.values(), &grid);
    Ok((grid, counts))
}

/// Draws `round(rate * c)` documents uniformly without replacement from every
/// bin of population `c`. Returned ids are sorted.
pub fn stratified_sample(scores: &ScoreSet, grid: &BinGrid, rate: f64, seed: u64) -> Result<Vec<String>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {rate} outside (0, 1]")));
    }
    let mut per_bin: Vec<Vec<&str>> = vec![Vec::new(); grid.n_bins()];
    for (id, s) in scores.iter() {
        per_bin[grid.bin_of(s)].push(id);
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    for members in &mut per_bin {
        let take = (rate * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        out.extend(members.iter().take(take).map(|s| s.to_string()));
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedScore {
    pub score: f64,
    pub weight: f64,
    /// `true` for pseudo-samples inserted by [`jitter`].
    pub synthetic: bool,
}

/// Adds one low-weight pseudo-sample, uniformly placed, to every bin that has
/// no sample of this class but does hold documents globally. The pseudo-sample
/// weight is `1 / (2 * sample_count)`; real samples keep weight 1.
pub fn jitter(class_scores: &[f64], grid: &BinGrid, global_counts: &[usize], seed: u64) -> Result<Vec<WeightedScore>> {
    if global_counts.len() != grid.n_bins() {
        return Err(Error::DimensionMismatch {
            expected: grid.n_bins(),
            found: global_counts.len(),
        });
    }
    let mut out: Vec<WeightedScore> = class_scores
        .iter()
        .map(|&score| WeightedScore {
            score,
            weight: 1.0,
            synthetic: false,
        })
        .collect();
    if class_scores.is_empty() {
        return Ok(out);
    }
    let local = bin_counts(class_scores.iter().copied(), grid);
    let weight = 1.0 / (2.0 * class_scores.len() as f64);
    let mut rng = rng::seeded(seed);
    for b in 0..grid.n_bins() {
        if local[b] == 0 && global_counts[b] > 0 {
            let lo = grid.edge(b);
            let score = lo + rng.random::<f64>() * grid.width();
            out.push(WeightedScore {
                score: score.min(1.0),
                weight,
                synthetic: true,
            });
        }
    }
    Ok(out)
}

/// A piecewise-linear PDF over a [`BinGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedDistribution {
    grid: BinGrid,
    bin_density: Vec<f64>,
    sample_count: usize,
}

impl ReconstructedDistribution {
    /// Normalizes non-negative per-bin masses into a density.
    pub fn from_bin_masses(grid: BinGrid, masses: &[f64], sample_count: usize) -> Result<Self> {
        if masses.len() != grid.n_bins() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_bins(),
                found: masses.len(),
            });
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidArgument("bin masses must be finite and non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Empty("distribution has zero total weight".into()));
        }
        let scale = 1.0 / (total * grid.width());
        Ok(Self {
            grid,
            bin_density: masses.iter().map(|m| m * scale).collect(),
            sample_count,
        })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Density at each bin midpoint.
    pub fn bin_density(&self) -> &[f64] {
        &self.bin_density
    }

    /// Probability mass of each bin under the histogram anchoring.
    pub fn bin_masses(&self) -> Vec<f64> {
        let w = self.grid.width();
        self.bin_density.iter().map(|d| d * w).collect()
    }

    /// Density at the `n_bins + 1` grid edges.
    pub fn density(&self) -> Vec<f64> {
        let m = &self.bin_density;
        let n = m.len();
        let mut e = Vec::with_capacity(n + 1);
        e.push(m[0]);
        for i in 1..n {
            e.push(0.5 * (m[i - 1] + m[i]));
        }
        e.push(m[n - 1]);
        e
    }

    /// Cumulative mass at each edge (trapezoid rule on the edge densities).
    pub fn cdf_edges(&self) -> Vec<f64> {
        let e = self.density();
        let w = self.grid.width();
        let mut c = Vec::with_capacity(e.len());
        c.push(0.0);
        for k in 0..e.len() - 1 {
            let next = c[k] + 0.5 * w * (e[k] + e[k + 1]);
            c.push(next);
        }
        c
    }

    pub fn pdf(&self, s: f64) -> f64 {
        let e = self.density();
        let s = s.clamp(0.0, 1.0);
        let k = self.grid.bin_of(s);
        let t = (s - self.grid.edge(k)) / self.grid.width();
        e[k] + t * (e[k + 1] - e[k])
    }

    /// Exact integral of the piecewise-linear PDF over `[0, s]`.
    pub fn cdf(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        let e = self.density();
        let c = self.cdf_edges();
        let k = self.grid.bin_of(s);
        let x = s - self.grid.edge(k);
        let slope = (e[k + 1] - e[k]) / self.grid.width();
        c[k] + x * e[k] + 0.5 * slope * x * x
    }

    pub fn integral(&self) -> f64 {
        *self.cdf_edges().last().expect("edges")
    }
}

/// Weighted histogram on the grid, anchored at bin midpoints and normalized.
pub fn density_estimate(samples: &[WeightedScore], grid: &BinGrid) -> Result<ReconstructedDistribution> {
    let mut masses = vec![0.0; grid.n_bins()];
    for s in samples {
        if !(s.weight >= 0.0) || !s.score.is_finite() {
            return Err(Error::InvalidArgument("sample weights must be non-negative".into()));
        }
        masses[grid.bin_of(s.score)] += s.weight;
    }
    let real = samples.iter().filter(|s| !s.synthetic).count();
    ReconstructedDistribution::from_bin_masses(*grid, &masses, real)
}

/// Moving average of the bin densities with mirrored edges, renormalized.
pub fn smooth(dist: &ReconstructedDistribution, window: usize) -> Result<ReconstructedDistribution> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "smoothing window must be a positive odd integer, got {window}"
        )));
    }
    let m = &dist.bin_density;
    let n = m.len() as isize;
    let half = (window / 2) as isize;
    let mirror = |mut i: isize| {
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let smoothed: Vec<f64> = (0..n)
        .map(|b| (-half..=half).map(|o| m[mirror(b + o)]).sum::<f64>() / window as f64)
        .collect();
    ReconstructedDistribution::from_bin_masses(dist.grid, &smoothed, dist.sample_count)
}

/// Per-class reconstructed distributions plus class priors from the sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub pdf_p: ReconstructedDistribution,
    pub pdf_n: ReconstructedDistribution,
    pub prior_p: f64,
    pub prior_n: f64,
    pub sample_size: usize,
}

impl Calibration {
    pub fn grid(&self) -> &BinGrid {
        self.pdf_p.grid()
    }

    /// CSV of `edge,pdf_p,pdf_n` for plotting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("edge,pdf_p,pdf_n\n");
        let (p, n) = (self.pdf_p.density(), self.pdf_n.density());
        for (i, edge) in self.grid().edges().into_iter().enumerate() {
            out.push_str(&format!("{edge},{},{}\n", p[i], n[i]));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionOptions {
    pub jitter: bool,
    pub smoothing_window: usize,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self {
            jitter: true,
            smoothing_window: DEFAULT_SMOOTHING_WINDOW,
        }
    }
}

impl ReconstructionOptions {
    /// Plain histogram of the sample: no jitter, no smoothing.
    pub fn naive() -> Self {
        Self {
            jitter: false,
            smoothing_window: 1,
        }
    }
}

/// Jitter → density estimate → smooth for one class, restricted to the bins
/// that hold documents globally when `global_counts` covers the grid.
pub fn reconstruct(
    class_scores: &[f64],
    grid: &BinGrid,
    global_counts: &[usize],
    options: ReconstructionOptions,
    seed: u64,
) -> Result<ReconstructedDistribution> {
    let samples = if options.jitter {
        jitter(class_scores, grid, global_counts, seed)?
    } else {
        class_scores
            .iter()
            .map(|&score| WeightedScore {
                score,
                weight: 1.0,
                synthetic: false,
            })
            .collect()
    };
    let de = density_estimate(&samples, grid)?;
    let smoothed = smooth(&de, options.smoothing_window)?;
    if global_counts.len() != grid.n_bins() {
        return Ok(smoothed);
    }
    // Smoothing must not move mass into bins no document scores in.
    let masked: Vec<f64> = smoothed
        .bin_density
        .iter()
        .zip(global_counts)
        .map(|(&d, &c)| if c > 0 { d } else { 0.0 })
        .collect();
    ReconstructedDistribution::from_bin_masses(*grid, &masked, smoothed.sample_count)
}

/// Splits the labeled sample by class and reconstructs both distributions.
///
/// `scores` is the full score set the sample was drawn from; its bin
/// populations decide where jitter may place pseudo-samples.
pub fn calibrate(
    scores: &ScoreSet,
    sample_labels: &LabelSet,
    grid: &BinGrid,
    seed: u64,
) -> Result<Calibration> {
    calibrate_with(scores, sample_labels, grid, ReconstructionOptions::default(), seed)
}

pub fn calibrate_with(
    scores: &ScoreSet,
    sample_labels: &LabelSet,
    grid: &BinGrid,
    options: ReconstructionOptions,
    seed: u64,
) -> Result<Calibration> {
    if sample_labels.is_empty() {
        return Err(Error::Empty("calibration sample is empty".into()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (id, label) in sample_labels.iter() {
        let s = scores.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        if label {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateWorkload(format!(
            "calibration sample has {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let global = bin_counts(scores.values(), grid);
    let pdf_p = reconstruct(&pos, grid, &global, options, rng::derive(seed, 1))?;
    let pdf_n = reconstruct(&neg, grid, &global, options, rng::derive(seed, 2))?;
    let total = (pos.len() + neg.len()) as f64;
    Ok(Calibration {
        pdf_p,
        pdf_n,
        prior_p: pos.len() as f64 / total,
        prior_n: neg.len() as f64 / total,
        sample_size: sample_labels.len(),
    })
}

/// Jensen–Shannon distance (base 2) between the per-bin masses of two distributions.
pub fn jsd(p: &ReconstructedDistribution, q: &ReconstructedDistribution) -> Result<f64> {
    p.grid.check_same(&q.grid)?;
    Ok(jsd_masses(&p.bin_masses(), &q.bin_masses()))
}

pub(crate) fn jsd_masses(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let mut div = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            div += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            div += 0.5 * b * (b / m).log2();
        }
    }
    div.clamp(0.0, 1.0).sqrt()
}

/// JSD of reconstructed and naive per-class distributions against the full-population ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsdReport {
    pub n_bins: usize,
    pub reconstructed_positive: f64,
    pub reconstructed_negative: f64,
    pub naive_positive: f64,
    pub naive_negative: f64,
}

/// Compares reconstruction quality against ground truth for every document in `scores`.
pub fn jsd_report(
    scores: &ScoreSet,
    truth: &LabelSet,
    sample_labels: &LabelSet,
    grid: &BinGrid,
    options: ReconstructionOptions,
    seed: u64,
) -> Result<JsdReport> {
    let split = |labels: &LabelSet| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut by: BTreeMap<bool, Vec<f64>> = BTreeMap::new();
        for (id, l) in labels.iter() {
            if let Some(s) = scores.get(id) {
                by.entry(l).or_default().push(s);
            }
        }
        Ok((by.remove(&true).unwrap_or_default(), by.remove(&false).unwrap_or_default()))
    };
    let (true_p, true_n) = split(truth)?;
    let truth_p = reconstruct(&true_p, grid, &[], ReconstructionOptions::naive(), 0)?;
    let truth_n = reconstruct(&true_n, grid, &[], ReconstructionOptions::naive(), 0)?;
    let cal = calibrate_with(scores, sample_labels, grid, options, seed)?;
    let naive = calibrate_with(scores, sample_labels, grid, ReconstructionOptions::naive(), seed)?;
    Ok(JsdReport {
        n_bins: grid.n_bins(),
        reconstructed_positive: jsd(&cal.pdf_p, &truth_p)?,
        reconstructed_negative: jsd(&cal.pdf_n, &truth_n)?,
        naive_positive: jsd(&naive.pdf_p, &truth_p)?,
        naive_negative: jsd(&naive.pdf_n, &truth_n)?,
    })
}
