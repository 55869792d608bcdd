//! Plot-ready outputs: class score histograms, accuracy/reduction tradeoff
//! over a range of accuracy targets, and the reconstruction JSD diagnostic.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RunOutcome, RunSettings};
use crate::calibrate::{jsd_report, BinGrid, Calibration};
use crate::cascade::{select_thresholds, unfiltered_rate, AccuracyModel};
use crate::error::{Error, Result};
use crate::proxy::ScoreSet;
use crate::rng;
use crate::store::{write_json, LabelSet};

/// Accuracy targets 0.80, 0.82, ..., 0.96.
pub const DEFAULT_SWEEP: [f64; 9] = [0.80, 0.82, 0.84, 0.86, 0.88, 0.90, 0.92, 0.94, 0.96];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub positive: usize,
    pub negative: usize,
}

/// Per-bin counts of positive and negative documents; unlabeled ids are skipped.
pub fn histogram_rows(scores: &ScoreSet, labels: &LabelSet, grid: &BinGrid) -> Vec<HistogramRow> {
    let mut rows: Vec<HistogramRow> = (0..grid.n_bins())
        .map(|b| HistogramRow {
            bin_lo: grid.edge(b),
            bin_hi: grid.edge(b + 1),
            positive: 0,
            negative: 0,
        })
        .collect();
    for (id, s) in scores.iter() {
        match labels.get(id) {
            Some(true) => rows[grid.bin_of(s)].positive += 1,
            Some(false) => rows[grid.bin_of(s)].negative += 1,
            None => {}
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub lb: f64,
    pub rb: f64,
    pub estimated_accuracy: f64,
    pub estimated_unfiltered_mass: f64,
    pub unfiltered_rate: f64,
    pub data_reduction: f64,
    /// Accuracy against `truth`, counting every oracle-routed document as correct.
    pub realized_accuracy: Option<f64>,
}

/// Re-selects thresholds from one calibration for each target in `alphas`.
pub fn tradeoff_curve(
    cal: &Calibration,
    scores: &ScoreSet,
    truth: Option<&LabelSet>,
    alphas: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    let model = AccuracyModel::new(cal)?;
    alphas
        .iter()
        .map(|&alpha| {
            let t = select_thresholds(&model, alpha)?;
            let u = unfiltered_rate(scores, &t)?;
            let realized = truth
                .map(|truth| -> Result<f64> {
                    let mut correct = 0usize;
                    for (id, s) in scores.iter() {
                        let label = truth.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
                        if t.contains(s) || (s > t.rb()) == label {
                            correct += 1;
                        }
                    }
                    Ok(correct as f64 / scores.len() as f64)
                })
                .transpose()?;
            Ok(TradeoffPoint {
                alpha,
                lb: t.lb(),
                rb: t.rb(),
                estimated_accuracy: model.estimate_accuracy(&t),
                estimated_unfiltered_mass: model.unfiltered_mass(&t),
                unfiltered_rate: u,
                data_reduction: 1.0 - u,
                realized_accuracy: realized,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_histogram_csv(rows: &[HistogramRow], path: &Path) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,positive,negative\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.bin_lo, r.bin_hi, r.positive, r.negative).expect("string write");
    }
    write_text(path, &out)
}

pub fn write_tradeoff_csv(points: &[TradeoffPoint], path: &Path) -> Result<()> {
    let mut out = String::from(
        "alpha,lb,rb,estimated_accuracy,estimated_unfiltered_mass,unfiltered_rate,data_reduction,realized_accuracy\n",
    );
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.alpha,
            p.lb,
            p.rb,
            p.estimated_accuracy,
            p.estimated_unfiltered_mass,
            p.unfiltered_rate,
            p.data_reduction,
            opt(p.realized_accuracy)
        )
        .expect("string write");
    }
    write_text(path, &out)
}

/// Paths written by [`emit_plots`]; optional files need a calibration or truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotFiles {
    pub histogram: PathBuf,
    pub tradeoff: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub jsd: Option<PathBuf>,
}

/// Writes `score_histogram.csv`, and when available `tradeoff.csv`,
/// `calibration.csv` and `jsd.json`, into `dir`.
///
/// Histogram classes come from `truth` when given, otherwise from the
/// cascade's own decisions.
pub fn emit_plots(
    outcome: &RunOutcome,
    settings: &RunSettings,
    truth: Option<&LabelSet>,
    alphas: &[f64],
    dir: impl AsRef<Path>,
) -> Result<PlotFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = BinGrid::new(settings.n_bins)?;
    let decided = outcome.result.labels();
    let labels = truth.unwrap_or(&decided);
    let mut files = PlotFiles {
        histogram: dir.join("score_histogram.csv"),
        ..PlotFiles::default()
    };
    write_histogram_csv(&histogram_rows(&outcome.scores, labels, &grid), &files.histogram)?;

    if let Some(cal) = &outcome.calibration {
        let path = dir.join("tradeoff.csv");
        write_tradeoff_csv(&tradeoff_curve(cal, &outcome.scores, truth, alphas)?, &path)?;
        files.tradeoff = Some(path);

        let path = dir.join("calibration.csv");
        cal.write_csv(&path)?;
        files.calibration = Some(path);

        if let Some(truth) = truth {
            let report = jsd_report(
                &outcome.scores,
                truth,
                &outcome.calibration_labels,
                &grid,
                settings.reconstruction(),
                rng::derive(settings.seed, 3),
            )?;
            let path = dir.join("jsd.json");
            write_json(&path, &report)?;
            files.jsd = Some(path);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::MockOracle;
    use crate::pipeline::run_workload;
    use crate::pipeline::tests::quick_settings;
    use crate::synth::{generate, SynthSpec};

    #[tokio::test]
    async fn plot_files_have_expected_shape() {
        let (w, truth) = generate(&SynthSpec {
            n_docs: 2000,
            dim: 16,
            separation: 5.0,
            seed: 8,
            ..SynthSpec::default()
        })
        .unwrap();
        let settings = quick_settings(8);
        let out = run_workload(&w, &MockOracle::new(truth.clone()), &settings, Some(&truth)).await.unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&out, &settings, Some(&truth), &DEFAULT_SWEEP, dir.path()).unwrap();

        let hist = fs::read_to_string(&files.histogram).unwrap();
        assert_eq!(hist.lines().count(), 1 + 64);
        let total: usize = hist
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                f[2].parse::<usize>().unwrap() + f[3].parse::<usize>().unwrap()
            })
            .sum();
        assert_eq!(total, out.report.n_online);

        let tradeoff = fs::read_to_string(files.tradeoff.unwrap()).unwrap();
        assert_eq!(tradeoff.lines().count(), 1 + DEFAULT_SWEEP.len());
        let jsd: serde_json::Value = serde_json::from_str(&fs::read_to_string(files.jsd.unwrap()).unwrap()).unwrap();
        assert!(jsd["reconstructed_positive"].as_f64().unwrap() <= 1.0);
        assert!(files.calibration.unwrap().exists());
    }

    #[tokio::test]
    async fn unfiltered_rate_grows_with_alpha() {
        let (w, truth) = generate(&SynthSpec {
            n_docs: 3000,
            dim: 16,
            separation: 4.0,
            seed: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let out = run_workload(&w, &MockOracle::new(truth.clone()), &quick_settings(4), Some(&truth)).await.unwrap();
        let cal = out.calibration.unwrap();
        let curve = tradeoff_curve(&cal, &out.scores, Some(&truth), &DEFAULT_SWEEP).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1].estimated_unfiltered_mass >= pair[0].estimated_unfiltered_mass - 1e-12);
            assert!(pair[1].unfiltered_rate >= pair[0].unfiltered_rate, "{pair:?}");
        }
        for p in &curve {
            assert!(p.estimated_accuracy >= p.alpha);
        }
    }
}
