//! Binary-classification metrics, detection matching, precision-recall
//! curves and connection scoring.

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::SymbolDetection;
use crate::geom::BoundingBox;
use crate::topology::ConnectionMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Derived rates; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// F1 is taken as `2tp / (2tp + fp + fn)`, the harmonic mean of precision
/// and recall wherever that is defined.
pub fn metrics(c: &ConfusionCounts) -> MetricReport {
    MetricReport {
        recall: ratio(c.tp, c.tp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        specificity: ratio(c.tn, c.tn + c.fp),
        npv: ratio(c.tn, c.tn + c.fn_),
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: ConfusionCounts,
    /// Per prediction, in input order: index of the matched truth.
    pub pred_match: Vec<Option<usize>>,
    /// Per truth, in input order: whether it was matched.
    pub truth_matched: Vec<bool>,
}

/// Prediction indices by descending score; ties by box then id so the order
/// never depends on input order.
fn score_order(pred: &[SymbolDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| {
        pred[b]
            .score
            .total_cmp(&pred[a].score)
            .then_with(|| pred[a].bbox.lex_cmp(&pred[b].bbox))
            .then_with(|| pred[a].id.cmp(&pred[b].id))
    });
    order
}

/// Greedy matching in descending score order. Each prediction takes the
/// unmatched same-class truth with the highest IoU at or above the
/// threshold. True negatives are not defined for detection and stay 0.
pub fn match_detections(pred: &[SymbolDetection], truth: &[SymbolDetection], iou_threshold: f64) -> MatchResult {
    let mut truth_matched = vec![false; truth.len()];
    let mut pred_match = vec![None; pred.len()];
    for p in score_order(pred) {
        let mut best: Option<(f64, usize)> = None;
        for (t, tr) in truth.iter().enumerate() {
            if truth_matched[t] || tr.class != pred[p].class {
                continue;
            }
            let v = pred[p].bbox.iou(&tr.bbox);
            if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, t));
            }
        }
        if let Some((_, t)) = best {
            truth_matched[t] = true;
            pred_match[p] = Some(t);
        }
    }
    let tp = pred_match.iter().filter(|m| m.is_some()).count() as u64;
    let counts = ConfusionCounts::new(tp, pred.len() as u64 - tp, truth.len() as u64 - tp, 0);
    MatchResult { counts, pred_match, truth_matched }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per prediction, by descending score threshold.
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

impl PrCurve {
    /// CSV with header `threshold,recall,precision`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["threshold", "recall", "precision"]).expect("in-memory write");
        for p in &self.points {
            w.serialize((p.threshold, p.recall, p.precision)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }
}

/// All-point interpolated AP from a ranked list of hit flags.
pub fn ap_from_ranked(hits: &[bool], n_truth: usize, scores: &[f64]) -> PrCurve {
    let mut points = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        let recall = if n_truth == 0 { 0.0 } else { tp as f64 / n_truth as f64 };
        points.push(PrPoint { threshold: scores[k], recall, precision: tp as f64 / (k + 1) as f64 });
    }
    let ap = if n_truth == 0 {
        0.0
    } else {
        // precision envelope from the right, then sum over recall steps
        let mut env: Vec<f64> = points.iter().map(|p| p.precision).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        let mut prev_recall = 0.0;
        let mut sum = 0.0;
        for (p, e) in points.iter().zip(&env) {
            sum += (p.recall - prev_recall) * e;
            prev_recall = p.recall;
        }
        sum
    };
    PrCurve { points, ap }
}

/// Ranks predictions by score, marks each as a hit by greedy matching, and
/// integrates the precision envelope over recall.
pub fn average_precision(pred: &[SymbolDetection], truth: &[SymbolDetection], iou_threshold: f64) -> PrCurve {
    let m = match_detections(pred, truth, iou_threshold);
    let order = score_order(pred);
    let hits: Vec<bool> = order.iter().map(|&i| m.pred_match[i].is_some()).collect();
    let scores: Vec<f64> = order.iter().map(|&i| pred[i].score).collect();
    ap_from_ranked(&hits, truth.len(), &scores)
}

#[derive(Debug, Error, PartialEq)]
#[error("symbol sets differ: only predicted {only_pred:?}, only in truth {only_truth:?}")]
pub struct SymbolSetMismatch {
    pub only_pred: Vec<String>,
    pub only_truth: Vec<String>,
}

/// Classifies every unordered symbol pair. Matrices may list the symbols in
/// different orders but must cover the same ids.
pub fn score_connections(
    pred: &ConnectionMatrix,
    truth: &ConnectionMatrix,
) -> Result<ConfusionCounts, SymbolSetMismatch> {
    let pi: HashMap<&str, usize> = pred.symbol_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let ti: HashMap<&str, usize> = truth.symbol_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut only_pred: Vec<String> = pi.keys().filter(|k| !ti.contains_key(*k)).map(|k| k.to_string()).collect();
    let mut only_truth: Vec<String> = ti.keys().filter(|k| !pi.contains_key(*k)).map(|k| k.to_string()).collect();
    if !only_pred.is_empty() || !only_truth.is_empty() || pi.len() != pred.len() || ti.len() != truth.len() {
        only_pred.sort();
        only_truth.sort();
        return Err(SymbolSetMismatch { only_pred, only_truth });
    }
    let ids = truth.symbol_ids();
    let mut c = ConfusionCounts::default();
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            let t = truth.get(a, b);
            let p = pred.get(pi[ids[a].as_str()], pi[ids[b].as_str()]);
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::SymbolClass;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn det(id: &str, class: &str, b: [f64; 4], score: f64) -> SymbolDetection {
        SymbolDetection {
            id: id.into(),
            class: SymbolClass::new(class),
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            score,
        }
    }

    #[test]
    fn reported_counts() {
        let r = metrics(&ConfusionCounts::new(116, 11, 39, 400));
        assert_abs_diff_eq!(r.recall.unwrap(), 116.0 / 155.0, epsilon = 1e-12);
        assert_eq!(format!("{:.4}", r.recall.unwrap()), "0.7484");
        assert_eq!(format!("{:.4}", r.precision.unwrap()), "0.9134");
        assert_eq!(format!("{:.4}", r.accuracy.unwrap()), "0.9117");
        assert_eq!(format!("{:.4}", r.specificity.unwrap()), "0.9732");
        assert_eq!(format!("{:.4}", r.npv.unwrap()), "0.9112");
    }

    #[test]
    fn degenerate_counts() {
        let r = metrics(&ConfusionCounts::default());
        assert!(r.recall.is_none() && r.precision.is_none() && r.f1.is_none());
        assert!(r.accuracy.is_none() && r.specificity.is_none() && r.npv.is_none());
        let one = metrics(&ConfusionCounts::new(1, 0, 0, 0));
        assert_eq!((one.recall, one.precision, one.f1, one.accuracy), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(one.specificity, None);
    }

    proptest! {
        #[test]
        fn metric_formulas(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let r = metrics(&ConfusionCounts::new(tp, fp, fn_, tn));
            let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
            if let (Some(p), Some(rc)) = (r.precision, r.recall) {
                if p + rc > 0.0 {
                    prop_assert!((r.f1.unwrap() - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
                }
            }
            if tp + fn_ > 0.0 { prop_assert!((r.recall.unwrap() - tp / (tp + fn_)).abs() < 1e-12); }
            if tn + fp > 0.0 { prop_assert!((r.specificity.unwrap() - tn / (tn + fp)).abs() < 1e-12); }
            for v in [r.recall, r.precision, r.f1, r.accuracy, r.specificity, r.npv].into_iter().flatten() {
                prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        let c = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &c), 0.0);
        assert_abs_diff_eq!(iou(&a, &b), 50.0 / 150.0, epsilon = 1e-15);
    }

    #[test]
    fn matching_examples() {
        let t = vec![
            det("Pump-1", "Pump", [0.0, 0.0, 10.0, 10.0], 1.0),
            det("Valve-2", "Valve", [20.0, 0.0, 30.0, 10.0], 1.0),
        ];
        let m = match_detections(&t, &t, 0.5);
        assert_eq!(m.counts, ConfusionCounts::new(2, 0, 0, 0));

        let m = match_detections(&t[..1], &[], 0.5);
        assert_eq!(m.counts, ConfusionCounts::new(0, 1, 0, 0));

        // both preds overlap the truth; the higher score takes it
        let preds = vec![det("a", "Pump", [1.0, 0.0, 11.0, 10.0], 0.7), det("b", "Pump", [0.0, 1.0, 10.0, 11.0], 0.9)];
        let m = match_detections(&preds, &t[..1], 0.5);
        assert_eq!(m.counts, ConfusionCounts::new(1, 1, 0, 0));
        assert_eq!(m.pred_match, [None, Some(0)]);

        // class must agree
        let wrong = vec![det("x", "Valve", [0.0, 0.0, 10.0, 10.0], 1.0)];
        assert_eq!(match_detections(&wrong, &t[..1], 0.5).counts, ConfusionCounts::new(0, 1, 1, 0));
    }

    #[test]
    fn ap_examples() {
        let c = ap_from_ranked(&[true, false, true], 2, &[0.9, 0.8, 0.7]);
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pts[0], (0.5, 1.0));
        assert_eq!(pts[1], (0.5, 0.5));
        assert_abs_diff_eq!(pts[2].1, 2.0 / 3.0, epsilon = 1e-12);
        // hand sum: 0.5 * 1.0 + 0.5 * (2/3)
        assert_abs_diff_eq!(c.ap, 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(format!("{:.4}", c.ap), "0.8333");

        let t = vec![det("Pump-1", "Pump", [0.0, 0.0, 10.0, 10.0], 1.0)];
        assert_eq!(average_precision(&t, &t, 0.5).ap, 1.0);
        let miss = vec![det("x", "Pump", [50.0, 50.0, 60.0, 60.0], 0.9)];
        assert_eq!(average_precision(&miss, &t, 0.5).ap, 0.0);
        assert_eq!(c.to_csv().lines().next(), Some("threshold,recall,precision"));
        assert_eq!(c.to_csv().lines().count(), 4);
    }

    proptest! {
        #[test]
        fn ap_bounds_and_separation(hits in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..4) {
            let n_truth = hits.iter().filter(|h| **h).count() + extra;
            let scores: Vec<f64> = (0..hits.len()).map(|i| 1.0 - i as f64 / 100.0).collect();
            let c = ap_from_ranked(&hits, n_truth, &scores);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c.ap));
            for w in c.points.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
            }
            // AP = 1 exactly when every hit outranks every miss and nothing is missed
            let separated = hits.iter().skip_while(|h| **h).all(|h| !*h);
            let perfect = n_truth > 0 && extra == 0 && separated;
            prop_assert_eq!((c.ap - 1.0).abs() < 1e-12, perfect);
        }
    }

    fn matrix(ids: &[&str], edges: &[(&str, &str)]) -> ConnectionMatrix {
        ConnectionMatrix::from_edges(ids.iter().map(|s| s.to_string()).collect(), edges).unwrap()
    }

    #[test]
    fn connection_scoring() {
        let ids = ["A", "B", "C", "D"];
        let truth = matrix(&ids, &[("A", "B"), ("C", "D")]);
        let pred = matrix(&ids, &[("A", "B"), ("A", "C")]);
        assert_eq!(score_connections(&pred, &truth).unwrap(), ConfusionCounts::new(1, 1, 1, 3));
        assert_eq!(score_connections(&truth, &truth).unwrap(), ConfusionCounts::new(2, 0, 0, 4));
        assert_eq!(score_connections(&matrix(&ids, &[]), &truth).unwrap().fn_, 2);
        // order of ids does not matter
        let shuffled = matrix(&["D", "C", "B", "A"], &[("A", "B"), ("A", "C")]);
        assert_eq!(score_connections(&shuffled, &truth).unwrap(), ConfusionCounts::new(1, 1, 1, 3));
        let err = score_connections(&matrix(&["A", "E"], &[]), &matrix(&["A", "B"], &[])).unwrap_err();
        assert_eq!(err.only_pred, ["E"]);
        assert_eq!(err.only_truth, ["B"]);
    }

    proptest! {
        #[test]
        fn swapping_exchanges_fp_fn(n in 2usize..8, a in prop::collection::vec((0usize..8, 0usize..8), 0..12), b in prop::collection::vec((0usize..8, 0usize..8), 0..12)) {
            let ids: Vec<String> = (0..n).map(|i| format!("S-{i}")).collect();
            let build = |pairs: &[(usize, usize)]| {
                let mut m = ConnectionMatrix::new(ids.clone());
                for &(i, j) in pairs {
                    m.connect(i % n, j % n);
                }
                m
            };
            let (p, t) = (build(&a), build(&b));
            let x = score_connections(&p, &t).unwrap();
            let y = score_connections(&t, &p).unwrap();
            prop_assert_eq!((x.tp, x.fp, x.fn_, x.tn), (y.tp, y.fn_, y.fp, y.tn));
            prop_assert_eq!(x.total() as usize, n * (n - 1) / 2);
        }
    }
}
