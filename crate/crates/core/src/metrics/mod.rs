//! Confusion matrices and the Table-6 metric suite: accuracy, per-class
//! precision / recall / F1 with support-weighted averages, and multiclass MCC.

mod render;
mod report;

pub use render::{render_confusion_png, write_confusion_png};
pub use report::{audit_reported_row, comparison_table, evaluate, evaluate_probabilities, EvaluationReport, WeightedMetrics};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {truths} truths vs {preds} predictions")]
    LengthMismatch { truths: usize, preds: usize },
    #[error("class index {index} out of range for K = {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("empty evaluation")]
    EmptyEvaluation,
    #[error("zero total support")]
    ZeroSupport,
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("confusion matrix is not square")]
    NotSquare,
}

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Wraps raw counts; classes are named by index.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = counts.len();
        if k < 2 {
            return Err(MetricsError::TooFewClasses(k));
        }
        if counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::NotSquare);
        }
        Ok(Self {
            classes: (0..k).map(|i| i.to_string()).collect(),
            counts,
        })
    }

    pub fn with_classes(mut self, classes: Vec<String>) -> Self {
        assert_eq!(classes.len(), self.k(), "one name per class");
        self.classes = classes;
        self
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Row sum n_i.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Column sum.
    pub fn predicted(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    pub fn false_positives(&self, i: usize) -> u64 {
        self.predicted(i) - self.counts[i][i]
    }

    pub fn false_negatives(&self, i: usize) -> u64 {
        self.support(i) - self.counts[i][i]
    }
}

pub fn confusion_matrix(truths: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch {
            truths: truths.len(),
            preds: preds.len(),
        });
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in truths.iter().zip(preds) {
        for index in [t, p] {
            if index >= k {
                return Err(MetricsError::IndexOutOfRange { index, k });
            }
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

/// trace / N.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = cm.total();
    if n == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    Ok(cm.trace() as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when any of the three ratios had a zero denominator and was
    /// reported as 0.
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn per_class_prf(cm: &ConfusionMatrix) -> Result<Vec<ClassMetrics>, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    Ok((0..cm.k())
        .map(|i| {
            let tp = cm.true_positives(i) as f64;
            let (precision, dp) = ratio(tp, (cm.true_positives(i) + cm.false_positives(i)) as f64);
            let (recall, dr) = ratio(tp, (cm.true_positives(i) + cm.false_negatives(i)) as f64);
            let (f1, df) = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cm.support(i),
                degenerate: dp || dr || df,
            }
        })
        .collect())
}

/// Σ n_i·v_i / Σ n_i.
pub fn weighted_average(values: &[f64], supports: &[u64]) -> Result<f64, MetricsError> {
    if values.len() != supports.len() {
        return Err(MetricsError::LengthMismatch {
            truths: supports.len(),
            preds: values.len(),
        });
    }
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(MetricsError::ZeroSupport);
    }
    let num: f64 = values.iter().zip(supports).map(|(v, &n)| v * n as f64).sum();
    Ok(num / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mcc {
    pub value: f64,
    /// The denominator was zero (a constant row or column marginal); value is 0.
    pub degenerate: bool,
}

/// Matthews correlation in covariance form over the K×K matrix:
/// `(c·s − Σ p_k t_k) / √((s² − Σ p_k²)(s² − Σ t_k²))`, with `c` the trace,
/// `s` the total, `p_k` column sums and `t_k` row sums. Equals the binary
/// `(TP·TN − FP·FN)/√(...)` formula at K = 2.
pub fn mcc(cm: &ConfusionMatrix) -> Result<Mcc, MetricsError> {
    let s = cm.total() as f64;
    if s == 0.0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    let c = cm.trace() as f64;
    let k = cm.k();
    let t: Vec<f64> = (0..k).map(|i| cm.support(i) as f64).collect();
    let p: Vec<f64> = (0..k).map(|i| cm.predicted(i) as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        return Ok(Mcc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Mcc {
        value: ((c * s - pt) / den).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Index of the largest entry; ties go to the lowest index. The flag reports
/// whether a tie occurred.
pub fn argmax_with_tie(row: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    let tie = row.iter().enumerate().any(|(i, v)| i != best && *v == row[best]);
    (best, tie)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Per-sample reference implementations that never build a confusion
    //! matrix.

    pub fn accuracy(t: &[usize], p: &[usize]) -> f64 {
        t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64
    }

    pub fn prf(t: &[usize], p: &[usize], class: usize) -> (f64, f64, f64, usize) {
        let mut tp = 0.0;
        let mut pred = 0.0;
        let mut real = 0.0;
        for (&a, &b) in t.iter().zip(p) {
            if b == class {
                pred += 1.0;
            }
            if a == class {
                real += 1.0;
                if b == class {
                    tp += 1.0;
                }
            }
        }
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if real > 0.0 { tp / real } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1, real as usize)
    }

    /// Pearson correlation between the N×K one-hot truth and prediction
    /// matrices, treated as flattened paired samples with per-column means.
    pub fn mcc(t: &[usize], p: &[usize], k: usize) -> f64 {
        let n = t.len() as f64;
        let onehot = |v: usize, c: usize| if v == c { 1.0 } else { 0.0 };
        let mut cov_xy = 0.0;
        let mut cov_xx = 0.0;
        let mut cov_yy = 0.0;
        for c in 0..k {
            let mx = t.iter().map(|&v| onehot(v, c)).sum::<f64>() / n;
            let my = p.iter().map(|&v| onehot(v, c)).sum::<f64>() / n;
            for (&a, &b) in t.iter().zip(p) {
                let x = onehot(a, c) - mx;
                let y = onehot(b, c) - my;
                cov_xy += x * y;
                cov_xx += x * x;
                cov_yy += y * y;
            }
        }
        if cov_xx == 0.0 || cov_yy == 0.0 {
            0.0
        } else {
            cov_xy / (cov_xx * cov_yy).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn worked_binary_example() {
        let m = cm(&[&[6, 2], &[1, 3]]);
        assert_eq!(accuracy(&m).unwrap(), 0.75);
        let pc = per_class_prf(&m).unwrap();
        assert!((pc[0].precision - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(pc[0].recall, 0.75);
        assert!((pc[0].f1 - 0.8).abs() < 1e-15);
        assert!((mcc(&m).unwrap().value - 16.0 / 1120f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn counting_and_errors() {
        let m = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1], vec![0, 1]]);
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 2), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(confusion_matrix(&[0, 2], &[0, 1], 2), Err(MetricsError::IndexOutOfRange { index: 2, k: 2 })));
        let empty = cm(&[&[0, 0], &[0, 0]]);
        assert_eq!(accuracy(&empty), Err(MetricsError::EmptyEvaluation));
        assert_eq!(accuracy(&empty).unwrap_err().to_string(), "empty evaluation");
    }

    #[test]
    fn weighted_average_examples() {
        assert!((weighted_average(&[0.75, 0.5], &[8, 4]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((weighted_average(&[0.2, 0.4], &[5, 5]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(weighted_average(&[0.9], &[3]).unwrap(), 0.9);
        assert_eq!(weighted_average(&[0.9], &[0]), Err(MetricsError::ZeroSupport));
    }

    #[test]
    fn degenerate_conventions() {
        let m = cm(&[&[2, 2], &[2, 2]]);
        assert_eq!(mcc(&m).unwrap().value, 0.0);
        let perfect = cm(&[&[3, 0, 0], &[0, 4, 0], &[0, 0, 5]]);
        assert_eq!(mcc(&perfect).unwrap().value, 1.0);
        assert!(per_class_prf(&perfect).unwrap().iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        let one_column = cm(&[&[5, 0], &[5, 0]]);
        assert_eq!(mcc(&one_column).unwrap(), Mcc { value: 0.0, degenerate: true });
        let absent = cm(&[&[2, 0, 0], &[0, 2, 0], &[0, 0, 0]]);
        let pc = per_class_prf(&absent).unwrap();
        assert_eq!((pc[2].precision, pc[2].recall, pc[2].f1, pc[2].support), (0.0, 0.0, 0.0, 0));
        assert!(pc[2].degenerate && !pc[0].degenerate);
    }

    #[test]
    fn ties_resolve_low() {
        assert_eq!(argmax_with_tie(&[0.2, 0.4, 0.4]), (1, true));
        assert_eq!(argmax_with_tie(&[0.5, 0.3, 0.2]), (0, false));
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
        (2usize..=6, 10usize..=200).prop_flat_map(|(k, n)| {
            (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
        })
    }

    proptest! {
        #[test]
        fn matches_per_sample_oracle((k, t, p) in instance()) {
            let m = confusion_matrix(&t, &p, k).unwrap();
            let mut nested = vec![vec![0u64; k]; k];
            for a in 0..k { for b in 0..k { nested[a][b] = (0..t.len()).filter(|&j| t[j] == a && p[j] == b).count() as u64; } }
            prop_assert_eq!(&m.counts, &nested);
            prop_assert!((accuracy(&m).unwrap() - oracle::accuracy(&t, &p)).abs() < 1e-9);
            let pc = per_class_prf(&m).unwrap();
            for (c, row) in pc.iter().enumerate() {
                let (pr, re, f1, n) = oracle::prf(&t, &p, c);
                prop_assert!((row.precision - pr).abs() < 1e-9);
                prop_assert!((row.recall - re).abs() < 1e-9);
                prop_assert!((row.f1 - f1).abs() < 1e-9);
                prop_assert_eq!(row.support as usize, n);
            }
            prop_assert!((mcc(&m).unwrap().value - oracle::mcc(&t, &p, k)).abs() < 1e-9);
            let recalls: Vec<f64> = pc.iter().map(|c| c.recall).collect();
            let supports: Vec<u64> = pc.iter().map(|c| c.support).collect();
            prop_assert!((weighted_average(&recalls, &supports).unwrap() - accuracy(&m).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn relabeling_invariance((k, t, p) in instance(), shift in 1usize..6) {
            let perm = |v: &usize| (v + shift) % k;
            let a = EvaluationReport::from_confusion(confusion_matrix(&t, &p, k).unwrap(), 0).unwrap();
            let pt: Vec<usize> = t.iter().map(perm).collect();
            let pp: Vec<usize> = p.iter().map(perm).collect();
            let b = EvaluationReport::from_confusion(confusion_matrix(&pt, &pp, k).unwrap(), 0).unwrap();
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.mcc - b.mcc).abs() < 1e-12);
            prop_assert!((a.weighted.precision - b.weighted.precision).abs() < 1e-12);
            prop_assert!((a.weighted.recall - b.weighted.recall).abs() < 1e-12);
            prop_assert!((a.weighted.f1 - b.weighted.f1).abs() < 1e-12);
        }

        #[test]
        fn binary_mcc_is_the_two_by_two_formula(tp in 0u64..50, fneg in 0u64..50, fp in 0u64..50, tn in 0u64..50) {
            prop_assume!(tp + fneg + fp + tn > 0);
            let m = cm(&[&[tp, fneg], &[fp, tn]]);
            let (tp, fneg, fp, tn) = (tp as f64, fneg as f64, fp as f64, tn as f64);
            let den = ((tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg)).sqrt();
            let expected = if den == 0.0 { 0.0 } else { (tp * tn - fp * fneg) / den };
            prop_assert!((mcc(&m).unwrap().value - expected).abs() < 1e-12);
        }
    }
}
