//! Fixed-feature baseline: pretrained backbone activations fed to a linear
//! max-margin classifier, and the side-by-side comparison with fine-tuned
//! models.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ImageTensor, Label};
use crate::eval::{EvalError, EvalReport, RocCurve, ScoreRow};
use crate::rng;
use crate::zoo::{BackboneName, ClassifierModel, ZooError};

pub type BaselineResult<T> = Result<T, BaselineError>;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("feature width changed from {expected} to {got} at row {row}")]
    DimDrift { expected: usize, got: usize, row: usize },
    #[error("non-finite feature at row {row}")]
    NonFinite { row: usize },
    #[error("training needs both classes; no {missing} rows")]
    SingleClass { missing: Label },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("regularization strength must be positive, got {0}")]
    BadStrength(f64),
    #[error("feature cache {path}: {msg}")]
    Cache { path: PathBuf, msg: String },
    #[error("empty test set")]
    EmptyTest,
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One feature row per image, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub dims: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn empty(dims: usize) -> Self {
        Self {
            ids: Vec::new(),
            dims,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn push(&mut self, id: String, row: &[f32]) -> BaselineResult<()> {
        if row.len() != self.dims {
            return Err(BaselineError::DimDrift {
                expected: self.dims,
                got: row.len(),
                row: self.rows(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(BaselineError::NonFinite { row: self.rows() });
        }
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.dims);
        for &i in idx {
            out.ids.push(self.ids[i].clone());
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    /// Hex SHA-256 of the newline-joined id list.
    pub fn ids_hash(&self) -> String {
        ids_hash(&self.ids)
    }
}

pub fn ids_hash(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Features of `model` at its designated extraction layer, in inference mode.
pub fn extract_features(model: &ClassifierModel, images: &[(&str, &ImageTensor)]) -> BaselineResult<FeatureMatrix> {
    let mut m = FeatureMatrix::empty(model.spec().feature_dims);
    for chunk in images.chunks(10) {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|(_, i)| *i).collect();
        for ((id, _), row) in chunk.iter().zip(model.features(&imgs)?) {
            m.push(id.to_string(), &row)?;
        }
    }
    Ok(m)
}

/// Per-dimension z-scoring fitted on training rows; constant dimensions get
/// unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &FeatureMatrix) -> Self {
        let n = m.rows().max(1) as f64;
        let mut mean = vec![0.0; m.dims];
        for i in 0..m.rows() {
            for (a, &v) in mean.iter_mut().zip(m.row(i)) {
                *a += v as f64;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; m.dims];
        for i in 0..m.rows() {
            for ((a, &v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *a += (v as f64 - mu).powi(2);
            }
        }
        let scale = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (v as f64 - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// Hinge-loss weight C in `½‖w‖² + C Σ max(0, 1 − y·f(x))`.
    pub c: f64,
    pub max_epochs: usize,
    /// Stop when the projected-gradient spread falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_epochs: 1000,
            tol: 1e-4,
            seed: 0,
        }
    }
}

/// Linear max-margin classifier on standardized features. The bias is an
/// extra constant input and is regularized with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sign(l: Label) -> f64 {
    if l.is_positive() {
        1.0
    } else {
        -1.0
    }
}

/// Dual coordinate descent for the L2-regularized hinge-loss SVM.
pub fn fit_linear_classifier(features: &FeatureMatrix, labels: &[Label], cfg: &SvmConfig) -> BaselineResult<LinearSvm> {
    if features.rows() != labels.len() {
        return Err(BaselineError::LengthMismatch {
            features: features.rows(),
            labels: labels.len(),
        });
    }
    if !(cfg.c > 0.0 && cfg.c.is_finite()) {
        return Err(BaselineError::BadStrength(cfg.c));
    }
    for class in Label::ALL {
        if !labels.contains(&class) {
            return Err(BaselineError::SingleClass { missing: class });
        }
    }
    let standardizer = Standardizer::fit(features);
    let xs: Vec<Vec<f64>> = (0..features.rows())
        .map(|i| {
            let mut x = standardizer.apply(features.row(i));
            x.push(1.0);
            x
        })
        .collect();
    let ys: Vec<f64> = labels.iter().map(|&l| sign(l)).collect();
    let d = features.dims + 1;
    let mut w = vec![0.0; d];
    let mut alpha = vec![0.0; xs.len()];
    let qii: Vec<f64> = xs.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut r = rng::stream(cfg.seed, &["svm".into()]);
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut r);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = ys[i] * dot(&w, &xs[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, cfg.c);
                let step = (alpha[i] - old) * ys[i];
                for (wj, xj) in w.iter_mut().zip(&xs[i]) {
                    *wj += step * xj;
                }
            }
        }
        if pg_max - pg_min < cfg.tol {
            break;
        }
    }
    let bias = w.pop().unwrap_or(0.0);
    Ok(LinearSvm {
        standardizer,
        weights: w,
        bias,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearSvm {
    /// Signed margin; positive means TB.
    pub fn decision(&self, row: &[f32]) -> f64 {
        dot(&self.weights, &self.standardizer.apply(row)) + self.bias
    }

    /// Logistic squashing of the margin, used as the TB score.
    pub fn score(&self, row: &[f32]) -> f64 {
        1.0 / (1.0 + (-self.decision(row)).exp())
    }

    pub fn predict(&self, row: &[f32]) -> Label {
        if self.decision(row) >= 0.0 {
            Label::Tb
        } else {
            Label::Healthy
        }
    }
}

/// Which arm of the comparison a result belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    EndToEnd,
    FeatureBased,
}

impl Approach {
    pub fn as_str(self) -> &'static str {
        match self {
            Approach::EndToEnd => "end_to_end",
            Approach::FeatureBased => "feature_based",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEvaluation {
    pub approach: Approach,
    pub backbone: BackboneName,
    pub split_hash: String,
    pub report: EvalReport,
    pub roc: Option<RocCurve>,
    pub scores: Vec<ScoreRow>,
}

pub fn evaluate_baseline(
    clf: &LinearSvm,
    test: &FeatureMatrix,
    labels: &[Label],
    backbone: BackboneName,
    split_hash: &str,
) -> BaselineResult<BaselineEvaluation> {
    if test.rows() == 0 {
        return Err(BaselineError::EmptyTest);
    }
    if test.rows() != labels.len() {
        return Err(BaselineError::LengthMismatch {
            features: test.rows(),
            labels: labels.len(),
        });
    }
    let scores: Vec<ScoreRow> = (0..test.rows())
        .map(|i| ScoreRow {
            id: test.ids[i].clone(),
            label: labels[i],
            tb_score: clf.score(test.row(i)),
        })
        .collect();
    let (report, roc) = EvalReport::from_rows(&scores, crate::eval::DEFAULT_THRESHOLD)?;
    Ok(BaselineEvaluation {
        approach: Approach::FeatureBased,
        backbone,
        split_hash: split_hash.to_string(),
        report,
        roc,
        scores,
    })
}

/// Header of a cached feature matrix; the data file holds `rows × dims`
/// little-endian f32 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCacheHeader {
    pub backbone: BackboneName,
    pub layer: String,
    pub dims: usize,
    pub rows: usize,
    pub ids_hash: String,
    pub ids: Vec<String>,
}

/// Write `<stem>.f32` and `<stem>.json`.
pub fn write_feature_cache(stem: &Path, m: &FeatureMatrix, backbone: BackboneName, layer: &str) -> BaselineResult<()> {
    let err = |msg: String| BaselineError::Cache {
        path: stem.to_path_buf(),
        msg,
    };
    let header = FeatureCacheHeader {
        backbone,
        layer: layer.to_string(),
        dims: m.dims,
        rows: m.rows(),
        ids_hash: m.ids_hash(),
        ids: m.ids.clone(),
    };
    let mut f = std::fs::File::create(stem.with_extension("f32")).map_err(|e| err(e.to_string()))?;
    let mut bytes = Vec::with_capacity(m.data.len() * 4);
    for v in &m.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(|e| err(e.to_string()))?;
    let json = serde_json::to_string_pretty(&header).map_err(|e| err(e.to_string()))? + "\n";
    std::fs::write(stem.with_extension("json"), json).map_err(|e| err(e.to_string()))?;
    Ok(())
}

pub fn read_feature_cache(stem: &Path) -> BaselineResult<(FeatureCacheHeader, FeatureMatrix)> {
    let err = |msg: String| BaselineError::Cache {
        path: stem.to_path_buf(),
        msg,
    };
    let text = std::fs::read_to_string(stem.with_extension("json")).map_err(|e| err(e.to_string()))?;
    let header: FeatureCacheHeader = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let mut bytes = Vec::new();
    std::fs::File::open(stem.with_extension("f32"))
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(e.to_string()))?;
    if bytes.len() != header.rows * header.dims * 4 || header.ids.len() != header.rows {
        return Err(err(format!("size does not match {}×{} header", header.rows, header.dims)));
    }
    if ids_hash(&header.ids) != header.ids_hash {
        return Err(err("id list hash mismatch".into()));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let m = FeatureMatrix {
        ids: header.ids.clone(),
        dims: header.dims,
        data,
    };
    Ok((header, m))
}

/// A labeled evaluation of one backbone under one approach, as written to
/// `metrics.json` by `eval` and `baseline` and read back by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub approach: Approach,
    pub backbone: BackboneName,
    pub split_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl ArmReport {
    pub fn row(&self) -> ComparisonRow {
        ComparisonRow::from_report(self.backbone, self.approach, &self.split_hash, &self.report)
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub backbone: BackboneName,
    pub approach: Approach,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub split_hash: String,
}

impl ComparisonRow {
    pub fn from_report(backbone: BackboneName, approach: Approach, split_hash: &str, r: &EvalReport) -> Self {
        Self {
            backbone,
            approach,
            accuracy: r.metrics.accuracy,
            auc: r.auc,
            sensitivity: r.metrics.sensitivity,
            specificity: r.metrics.specificity,
            split_hash: split_hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Backbones present in only one arm.
    pub incomplete: Vec<BackboneName>,
    /// Whether every row was evaluated on the same test split.
    pub same_split: bool,
}

impl ComparisonReport {
    pub fn new(mut rows: Vec<ComparisonRow>) -> Self {
        rows.sort_by(|a, b| (a.backbone, a.approach).cmp(&(b.backbone, b.approach)));
        let mut incomplete: Vec<BackboneName> = rows
            .iter()
            .map(|r| r.backbone)
            .filter(|&b| {
                let arms = rows.iter().filter(|r| r.backbone == b).map(|r| r.approach).collect::<Vec<_>>();
                !(arms.contains(&Approach::EndToEnd) && arms.contains(&Approach::FeatureBased))
            })
            .collect();
        incomplete.dedup();
        let same_split = rows.windows(2).all(|w| w[0].split_hash == w[1].split_hash);
        Self {
            rows,
            incomplete,
            same_split,
        }
    }

    /// Accuracy and AUC per backbone, one column pair per approach.
    pub fn to_markdown(&self) -> String {
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "n/a".into());
        let num = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        let mut s = String::from(
            "| Backbone | End-to-end accuracy | End-to-end AUC | Feature-based accuracy | Feature-based AUC |\n|---|---|---|---|---|\n",
        );
        let mut backbones: Vec<BackboneName> = self.rows.iter().map(|r| r.backbone).collect();
        backbones.dedup();
        for b in backbones {
            let get = |a: Approach| self.rows.iter().find(|r| r.backbone == b && r.approach == a);
            let e = get(Approach::EndToEnd);
            let f = get(Approach::FeatureBased);
            s.push_str(&format!(
                "| {b} | {} | {} | {} | {} |\n",
                pct(e.and_then(|r| r.accuracy)),
                num(e.and_then(|r| r.auc)),
                pct(f.and_then(|r| r.accuracy)),
                num(f.and_then(|r| r.auc)),
            ));
        }
        if !self.same_split {
            s.push_str("\nWarning: rows were evaluated on different test splits.\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn matrix(rows: &[Vec<f32>]) -> FeatureMatrix {
        let mut m = FeatureMatrix::empty(rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            m.push(format!("r{i}"), r).unwrap();
        }
        m
    }

    #[test]
    fn separable_pair_is_fit_exactly() {
        let m = matrix(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let labels = [Label::Tb, Label::Healthy];
        let clf = fit_linear_classifier(&m, &labels, &SvmConfig::default()).unwrap();
        assert_eq!(clf.predict(m.row(0)), Label::Tb);
        assert_eq!(clf.predict(m.row(1)), Label::Healthy);
    }

    #[test]
    fn single_class_is_rejected() {
        let m = matrix(&[vec![1.0], vec![2.0]]);
        let e = fit_linear_classifier(&m, &[Label::Tb, Label::Tb], &SvmConfig::default()).unwrap_err();
        assert!(matches!(e, BaselineError::SingleClass { missing: Label::Healthy }));
    }

    #[test]
    fn dim_drift_is_rejected() {
        let mut m = FeatureMatrix::empty(3);
        assert!(matches!(m.push("a".into(), &[1.0, 2.0]), Err(BaselineError::DimDrift { .. })));
    }

    fn blobs(n: usize, shift: f32, seed: u64) -> (FeatureMatrix, Vec<Label>) {
        let mut r = rng::stream(seed, &["blobs".into()]);
        let mut m = FeatureMatrix::empty(5);
        let mut labels = Vec::new();
        for i in 0..n {
            let l = if i % 2 == 0 { Label::Tb } else { Label::Healthy };
            let off = if l == Label::Tb { shift } else { -shift };
            let row: Vec<f32> = (0..5).map(|_| StandardNormal.sample(&mut r)).map(|v: f32| v + off).collect();
            m.push(format!("x{i}"), &row).unwrap();
            labels.push(l);
        }
        (m, labels)
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let (m, mut labels) = blobs(200, 0.0, 3);
        labels.shuffle(&mut rng::stream(4, &["perm".into()]));
        let folds = 5;
        let mut correct = 0;
        for k in 0..folds {
            let test: Vec<usize> = (0..m.rows()).filter(|i| i % folds == k).collect();
            let train: Vec<usize> = (0..m.rows()).filter(|i| i % folds != k).collect();
            let tl: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
            let clf = fit_linear_classifier(&m.select(&train), &tl, &SvmConfig::default()).unwrap();
            correct += test.iter().filter(|&&i| clf.predict(m.row(i)) == labels[i]).count();
        }
        let acc = correct as f64 / m.rows() as f64;
        assert!((acc - 0.5).abs() <= 0.15, "{acc}");
    }

    #[test]
    fn duplicated_rows_keep_decision_signs() {
        let (m, labels) = blobs(60, 1.5, 5);
        let clf = fit_linear_classifier(&m, &labels, &SvmConfig::default()).unwrap();
        let idx: Vec<usize> = (0..m.rows()).chain(0..m.rows()).collect();
        let dl: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
        let clf2 = fit_linear_classifier(&m.select(&idx), &dl, &SvmConfig::default()).unwrap();
        let mut r = rng::stream(6, &["probe".into()]);
        for _ in 0..200 {
            let probe: Vec<f32> = (0..5).map(|_| r.random_range(-0.5f32..0.5) + if r.random::<bool>() { 2.0 } else { -2.0 }).collect();
            assert_eq!(clf.predict(&probe), clf2.predict(&probe));
        }
    }

    #[test]
    fn perfect_classifier_scores_full_marks() {
        let (m, labels) = blobs(40, 4.0, 7);
        let clf = fit_linear_classifier(&m, &labels, &SvmConfig::default()).unwrap();
        let ev = evaluate_baseline(&clf, &m, &labels, BackboneName::AlexNet, "h").unwrap();
        assert_eq!(ev.report.metrics.accuracy, Some(1.0));
        assert_eq!(ev.report.auc, Some(1.0));
        assert_eq!(ev.approach, Approach::FeatureBased);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = blobs(7, 0.0, 8);
        let stem = dir.path().join("alexnet-train");
        write_feature_cache(&stem, &m, BackboneName::AlexNet, "classifier.4").unwrap();
        let (h, back) = read_feature_cache(&stem).unwrap();
        assert_eq!(back, m);
        assert_eq!((h.rows, h.dims), (7, 5));
        std::fs::write(stem.with_extension("f32"), [0u8; 3]).unwrap();
        assert!(read_feature_cache(&stem).is_err());
    }

    #[test]
    fn comparison_table_lists_both_arms() {
        let row = |b, a, acc| ComparisonRow {
            backbone: b,
            approach: a,
            accuracy: Some(acc),
            auc: Some(0.9),
            sensitivity: None,
            specificity: None,
            split_hash: "s".into(),
        };
        let rep = ComparisonReport::new(vec![
            row(BackboneName::AlexNet, Approach::FeatureBased, 0.926),
            row(BackboneName::AlexNet, Approach::EndToEnd, 0.9118),
            row(BackboneName::ResNet18, Approach::EndToEnd, 0.9338),
        ]);
        assert_eq!(rep.incomplete, vec![BackboneName::ResNet18]);
        assert!(rep.same_split);
        let md = rep.to_markdown();
        assert!(md.contains("| alexnet | 91.18% | 0.9000 | 92.60% | 0.9000 |"), "{md}");
        assert!(md.contains("| resnet18 | 93.38% | 0.9000 | n/a | n/a |"), "{md}");
    }
}
