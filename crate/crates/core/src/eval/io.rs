use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{auc_pairwise_oracle, confusion_matrix, metrics, roc_auc, EvalError, EvalResult, MetricsReport, RocCurve};
use crate::dataset::Label;

/// One line of a scores file: `id,label,tb_score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub label: Label,
    pub tb_score: f64,
}

pub fn read_scores_csv(path: &Path) -> EvalResult<Vec<ScoreRow>> {
    let err = |msg: String| EvalError::Scores {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<ScoreRow>().enumerate() {
        let row = rec.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
        if !(0.0..=1.0).contains(&row.tb_score) {
            return Err(err(format!("row {}: tb_score {} outside [0, 1]", i + 1, row.tb_score)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> EvalResult<()> {
    let err = |msg: String| EvalError::Scores {
        path: path.to_path_buf(),
        msg,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `fpr,tpr,threshold` per point; sentinels written as `inf` / `-inf`.
pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> EvalResult<()> {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    std::fs::write(path, out).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Everything `eval` writes to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Trapezoidal AUC; absent when one class is missing.
    pub auc: Option<f64>,
    /// Pairwise (Mann-Whitney) AUC, computed independently as a cross-check.
    pub auc_pairwise: Option<f64>,
}

impl EvalReport {
    pub fn from_rows(rows: &[ScoreRow], threshold: f64) -> EvalResult<(Self, Option<RocCurve>)> {
        let scores: Vec<f64> = rows.iter().map(|r| r.tb_score).collect();
        let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
        let cm = confusion_matrix(&scores, &labels, threshold)?;
        let (curve, auc, auc_pairwise) = match roc_auc(&scores, &labels) {
            Ok((curve, auc)) => (Some(curve), Some(auc), Some(auc_pairwise_oracle(&scores, &labels)?)),
            Err(EvalError::MissingClass { .. }) => (None, None, None),
            Err(e) => return Err(e),
        };
        Ok((
            Self {
                n_items: rows.len(),
                metrics: metrics(cm, threshold),
                auc,
                auc_pairwise,
            },
            curve,
        ))
    }
}
