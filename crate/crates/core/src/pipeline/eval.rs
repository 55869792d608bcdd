use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeResult, Provenance};
use crate::error::{Error, Result};
use crate::store::LabelSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when nothing was predicted as this class.
    pub precision: Option<f64>,
    /// `None` when the class does not occur in the truth.
    pub recall: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub data_reduction: f64,
    pub oracle_decisions: usize,
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores cascade decisions against ground truth.
pub fn eval_report(result: &CascadeResult, truth: &LabelSet) -> Result<Metrics> {
    if result.decisions.is_empty() {
        return Err(Error::Empty("cascade made no decisions".into()));
    }
    // Confusion counts indexed [truth][predicted].
    let mut cm = [[0usize; 2]; 2];
    for (id, d) in &result.decisions {
        let t = truth.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        cm[t as usize][d.label as usize] += 1;
    }
    let n = result.decisions.len();
    let oracle = result.count(Provenance::Oracle);
    let class = |c: usize| ClassMetrics {
        precision: ratio(cm[c][c], cm[0][c] + cm[1][c]),
        recall: ratio(cm[c][c], cm[c][0] + cm[c][1]),
        support: cm[c][0] + cm[c][1],
    };
    Ok(Metrics {
        n,
        accuracy: (cm[0][0] + cm[1][1]) as f64 / n as f64,
        data_reduction: 1.0 - oracle as f64 / n as f64,
        oracle_decisions: oracle,
        positive: class(1),
        negative: class(0),
    })
}
