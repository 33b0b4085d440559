//! Confusion counts, sensitivity/specificity/accuracy, ROC curves and AUC.
//!
//! An item is predicted TB when its score is at or above the threshold.

mod io;
mod plot;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;

pub use self::io::{read_scores_csv, write_roc_csv, write_scores_csv, EvalReport, ScoreRow};
pub use self::plot::{render_roc_svg, RocSeries};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub type EvalResult<T> = Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scored items")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("ROC needs both classes; no {missing} items present")]
    MissingClass { missing: Label },
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("threshold {0} is not finite")]
    BadThreshold(f64),
    #[error("scores file {path}: {msg}")]
    Scores { path: std::path::PathBuf, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub const fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    /// TP / (TP + FN); `None` without positives.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.positives())
    }

    /// TN / (TN + FP); `None` without negatives.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.negatives())
    }

    /// (TP + TN) / total; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> EvalResult<()> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    Ok(())
}

pub fn confusion_matrix(scores: &[f64], labels: &[Label], threshold: f64) -> EvalResult<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    if threshold.is_nan() {
        return Err(EvalError::BadThreshold(threshold));
    }
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, Label::Tb) => cm.tp += 1,
            (true, Label::Healthy) => cm.fp += 1,
            (false, Label::Tb) => cm.fn_ += 1,
            (false, Label::Healthy) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// The three screening metrics for one operating point. A metric whose
/// denominator is zero is `None` (serialized as `null`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn metrics(cm: ConfusionMatrix, threshold: f64) -> MetricsReport {
    MetricsReport {
        threshold,
        confusion: cm,
        sensitivity: cm.sensitivity(),
        specificity: cm.specificity(),
        accuracy: cm.accuracy(),
    }
}

/// ROC points from a threshold sweep, starting at (0,0) and ending at (1,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: u64,
    pub negatives: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Threshold producing this point; the sentinels `±inf` serialize as the
    /// strings `"inf"` and `"-inf"`.
    #[serde(with = "signed_inf")]
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
}

fn class_counts(labels: &[Label]) -> EvalResult<(u64, u64)> {
    let pos = labels.iter().filter(|l| l.is_positive()).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 {
        return Err(EvalError::MissingClass { missing: Label::Tb });
    }
    if neg == 0 {
        return Err(EvalError::MissingClass { missing: Label::Healthy });
    }
    Ok((pos, neg))
}

/// Sweep thresholds `+inf`, every distinct score in descending order, then
/// `-inf`. Tied scores move together, producing a diagonal segment. Interior
/// points collinear with their neighbours are dropped.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> EvalResult<RocCurve> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
        tp: 0,
        fp: 0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
            tp,
            fp,
        });
    }
    points.push(RocPoint {
        fpr: 1.0,
        tpr: 1.0,
        threshold: f64::NEG_INFINITY,
        tp: pos,
        fp: neg,
    });
    // the lowest distinct score already reaches (1,1)
    points.dedup_by(|b, a| a.tp == b.tp && a.fp == b.fp);
    let points = drop_collinear(points);
    Ok(RocCurve {
        points,
        positives: pos,
        negatives: neg,
    })
}

/// Remove interior points lying on the segment between their neighbours.
/// Area and the curve's shape are unchanged; the test is exact on counts.
fn drop_collinear(points: Vec<RocPoint>) -> Vec<RocPoint> {
    let mut out: Vec<RocPoint> = Vec::with_capacity(points.len());
    for p in points {
        while out.len() >= 2 {
            let (a, b) = (&out[out.len() - 2], &out[out.len() - 1]);
            let lhs = (b.tp - a.tp) as u128 * (p.fp - b.fp) as u128;
            let rhs = (p.tp - b.tp) as u128 * (b.fp - a.fp) as u128;
            if lhs != rhs {
                break;
            }
            out.pop();
        }
        out.push(p);
    }
    out
}

mod signed_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
        }
    }
}

impl RocCurve {
    /// Curve from bare coordinates, without per-point counts.
    pub fn from_coords(coords: &[(f64, f64)]) -> Self {
        Self {
            points: coords
                .iter()
                .map(|&(fpr, tpr)| RocPoint {
                    fpr,
                    tpr,
                    threshold: f64::NAN,
                    tp: 0,
                    fp: 0,
                })
                .collect(),
            positives: 0,
            negatives: 0,
        }
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.fpr, p.tpr)).collect()
    }
}

/// Trapezoidal area under the curve over the FPR axis.
///
/// Accumulated on the integer counts and divided once, so the result is the
/// correctly rounded value of the exact area.
pub fn auc_trapezoid(curve: &RocCurve) -> f64 {
    if curve.positives == 0 || curve.negatives == 0 {
        return curve
            .points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum();
    }
    let twice_area: u128 = curve
        .points
        .windows(2)
        .map(|w| (w[1].fp - w[0].fp) as u128 * (w[1].tp + w[0].tp) as u128)
        .sum();
    twice_area as f64 / (2 * curve.positives as u128 * curve.negatives as u128) as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half, by enumerating every pair.
pub fn auc_pairwise_oracle(scores: &[f64], labels: &[Label]) -> EvalResult<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut credit = 0.0;
    let of = |positive: bool| scores.iter().zip(labels).filter(move |(_, l)| l.is_positive() == positive).map(|(s, _)| *s);
    for sp in of(true) {
        for sn in of(false) {
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos * neg) as f64)
}

/// Convenience: ROC curve plus its trapezoidal AUC.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> EvalResult<(RocCurve, f64)> {
    let curve = roc_curve(scores, labels)?;
    let auc = auc_trapezoid(&curve);
    Ok((curve, auc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Healthy as H, Tb as T};

    #[test]
    fn confusion_basic_cases() {
        assert_eq!(confusion_matrix(&[0.9, 0.2], &[T, H], 0.5).unwrap(), ConfusionMatrix::new(1, 1, 0, 0));
        let labels = [T, H, T, H];
        let cm = confusion_matrix(&[1.0; 4], &labels, 0.5).unwrap();
        assert_eq!((cm.fp, cm.fn_), (2, 0));
        // score equal to threshold counts as TB
        assert_eq!(confusion_matrix(&[0.5], &[H], 0.5).unwrap().fp, 1);
        assert!(matches!(confusion_matrix(&[], &[], 0.5), Err(EvalError::Empty)));
        assert!(matches!(confusion_matrix(&[0.1], &[H, T], 0.5), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn engineered_fixture_gives_requested_counts() {
        // 69 TB above, 1 TB below, 11 healthy above, 55 healthy below
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (n, score, label) in [(69, 0.8, T), (1, 0.3, T), (11, 0.7, H), (55, 0.1, H)] {
            s.extend(std::iter::repeat_n(score, n));
            l.extend(std::iter::repeat_n(label, n));
        }
        assert_eq!(confusion_matrix(&s, &l, 0.5).unwrap(), ConfusionMatrix::new(69, 55, 11, 1));
    }

    #[test]
    fn undefined_metrics_are_none() {
        let cm = ConfusionMatrix::new(0, 3, 1, 0);
        assert_eq!(cm.sensitivity(), None);
        assert_eq!(cm.specificity(), Some(0.75));
        assert_eq!(ConfusionMatrix::default().accuracy(), None);
        let r = metrics(ConfusionMatrix::new(1, 1, 0, 0), 0.5);
        assert_eq!((r.sensitivity, r.specificity, r.accuracy), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn roc_examples() {
        let c = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[T, T, H, H]).unwrap();
        assert_eq!(c.coords(), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(auc_trapezoid(&c), 1.0);
        let c = roc_curve(&[0.5; 4], &[T, H, T, H]).unwrap();
        assert_eq!(c.coords(), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc_trapezoid(&c), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [H, H, T, T];
        let c = roc_curve(&s, &l).unwrap();
        assert_eq!(c.coords(), vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(auc_trapezoid(&c), 0.75);
        assert_eq!(auc_pairwise_oracle(&s, &l).unwrap(), 0.75);
    }

    #[test]
    fn trapezoid_on_bare_coordinates() {
        assert_eq!(auc_trapezoid(&RocCurve::from_coords(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)])), 1.0);
        assert_eq!(auc_trapezoid(&RocCurve::from_coords(&[(0.0, 0.0), (1.0, 1.0)])), 0.5);
    }

    #[test]
    fn sentinel_thresholds_round_trip_through_json() {
        let c = roc_curve(&[0.2, 0.7], &[H, T]).unwrap();
        let back: RocCurve = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn one_class_input_names_missing_class() {
        let e = roc_curve(&[0.1, 0.2], &[H, H]).unwrap_err();
        assert!(e.to_string().contains("tb"), "{e}");
        let e = auc_pairwise_oracle(&[0.1], &[T]).unwrap_err();
        assert!(e.to_string().contains("healthy"), "{e}");
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(auc_pairwise_oracle(&[0.9, 0.1], &[T, H]).unwrap(), 1.0);
        assert_eq!(auc_pairwise_oracle(&[0.3; 5], &[T, H, H, T, T]).unwrap(), 0.5);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
        (2usize..=50).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u8..6).prop_map(|k| k as f64 / 5.0), 0.0f64..1.0], n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter_map("both classes", |(s, b)| {
                    let l: Vec<Label> = b.iter().map(|&t| if t { T } else { H }).collect();
                    (l.contains(&T) && l.contains(&H)).then_some((s, l))
                })
        })
    }

    proptest! {
        #[test]
        fn roc_is_monotone_and_bounded((s, l) in instance()) {
            let c = roc_curve(&s, &l).unwrap();
            prop_assert_eq!(c.coords().first().copied(), Some((0.0, 0.0)));
            prop_assert_eq!(c.coords().last().copied(), Some((1.0, 1.0)));
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn monotone_transform_invariance((s, l) in instance()) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(roc_curve(&s, &l).unwrap().coords(), roc_curve(&t, &l).unwrap().coords());
        }

        #[test]
        fn label_swap_symmetry((s, l) in instance()) {
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let swapped: Vec<Label> = l.iter().map(|x| if *x == T { H } else { T }).collect();
            prop_assert_eq!(
                auc_trapezoid(&roc_curve(&s, &l).unwrap()),
                auc_trapezoid(&roc_curve(&neg, &swapped).unwrap())
            );
        }
    }
}
