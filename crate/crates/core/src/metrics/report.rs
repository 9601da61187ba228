use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{accuracy, argmax_with_tie, confusion_matrix, mcc, per_class_prf, weighted_average, ClassMetrics, ConfusionMatrix, MetricsError};
use crate::dataset::{DatasetManifest, Split};
use crate::model::ClassifierModel;
use crate::train::{SplitCache, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted: WeightedMetrics,
    pub mcc: f64,
    pub mcc_degenerate: bool,
    pub samples: u64,
    /// Predictions whose top probability was shared by several classes.
    pub argmax_ties: usize,
}

impl EvaluationReport {
    pub fn from_confusion(confusion: ConfusionMatrix, argmax_ties: usize) -> Result<Self, MetricsError> {
        let per_class = per_class_prf(&confusion)?;
        let supports: Vec<u64> = per_class.iter().map(|c| c.support).collect();
        let w = |f: fn(&ClassMetrics) -> f64| {
            let v: Vec<f64> = per_class.iter().map(f).collect();
            weighted_average(&v, &supports)
        };
        let weighted = WeightedMetrics {
            precision: w(|c| c.precision)?,
            recall: w(|c| c.recall)?,
            f1: w(|c| c.f1)?,
        };
        let m = mcc(&confusion)?;
        Ok(Self {
            accuracy: accuracy(&confusion)?,
            samples: confusion.total(),
            confusion,
            per_class,
            weighted,
            mcc: m.value,
            mcc_degenerate: m.degenerate,
            argmax_ties,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.confusion.classes
    }

    pub fn degenerate_classes(&self) -> Vec<&str> {
        self.per_class
            .iter()
            .zip(&self.confusion.classes)
            .filter(|(c, _)| c.degenerate)
            .map(|(_, n)| n.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Headline row in Table-6 column order followed by per-class rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>9} {:>8} {:>8}", "Accuracy", "Recall", "Precision", "F1 Score", "MCC");
        let _ = writeln!(
            out,
            "{:<10.4} {:>8.4} {:>9.4} {:>8.4} {:>8.4}",
            self.accuracy, self.weighted.recall, self.weighted.precision, self.weighted.f1, self.mcc
        );
        let _ = writeln!(out);
        let width = self.classes().iter().map(|c| c.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<width$} {:>9} {:>8} {:>8} {:>8}", "Class", "Precision", "Recall", "F1", "Support");
        for (name, c) in self.classes().iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{:<width$} {:>9.4} {:>8.4} {:>8.4} {:>8}{}",
                name,
                c.precision,
                c.recall,
                c.f1,
                c.support,
                if c.degenerate { "  (degenerate)" } else { "" }
            );
        }
        let _ = writeln!(out, "\nsamples: {}  argmax ties: {}", self.samples, self.argmax_ties);
        if self.mcc_degenerate {
            let _ = writeln!(out, "MCC denominator was zero; reported as 0");
        }
        out
    }

    /// Comma-separated confusion counts with class names as header and first
    /// column.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in self.classes() {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (name, row) in self.classes().iter().zip(&self.confusion.counts) {
            out.push_str(&csv_field(name));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Builds a report from probability rows, predicting the argmax with ties
/// going to the lowest class index.
pub fn evaluate_probabilities(probs: &[Vec<f64>], truths: &[usize], classes: &[String]) -> Result<EvaluationReport, MetricsError> {
    if probs.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let mut ties = 0;
    let preds: Vec<usize> = probs
        .iter()
        .map(|row| {
            let (i, tie) = argmax_with_tie(row);
            ties += usize::from(tie);
            i
        })
        .collect();
    let cm = confusion_matrix(truths, &preds, classes.len())?.with_classes(classes.to_vec());
    EvaluationReport::from_confusion(cm, ties)
}

/// Evaluates `model` on the manifest's test split.
pub fn evaluate(model: &ClassifierModel, manifest: &DatasetManifest) -> Result<EvaluationReport, TrainError> {
    let cache = SplitCache::load(model, manifest, Split::Test, false)?;
    let probs = cache.predict(model);
    Ok(evaluate_probabilities(&probs, cache.labels(), model.taxonomy.classes())?)
}

/// Table-6-style comparison across several evaluated models.
pub fn comparison_table(rows: &[(String, EvaluationReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} {:>9} {:>7} {:>10} {:>9} {:>6}",
        "Model", "Accuracy", "Recall", "Precision", "F1 Score", "MCC"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$} {:>9.2} {:>7.2} {:>10.2} {:>9.2} {:>6.2}",
            name, r.accuracy, r.weighted.recall, r.weighted.precision, r.weighted.f1, r.mcc
        );
    }
    out
}

/// Consistency checks for a published metrics row (values rounded to
/// `decimals`). Weighted recall must equal accuracy, every value must lie in
/// its range, and weighted F1 cannot exceed the mean of weighted precision
/// and recall (each class's F1 is at most the mean of its P and R).
pub fn audit_reported_row(accuracy: f64, recall: f64, precision: f64, f1: f64, mcc: f64, decimals: u32) -> Vec<String> {
    let tol = 0.5 * 10f64.powi(-(decimals as i32)) * 2.0 + 1e-12;
    let mut issues = Vec::new();
    if (recall - accuracy).abs() > tol {
        issues.push(format!(
            "weighted recall {recall} differs from accuracy {accuracy}; they are the same quantity"
        ));
    }
    for (name, v) in [("accuracy", accuracy), ("recall", recall), ("precision", precision), ("f1", f1)] {
        if !(0.0..=1.0).contains(&v) {
            issues.push(format!("{name} {v} outside [0, 1]"));
        }
    }
    if !(-1.0..=1.0).contains(&mcc) {
        issues.push(format!("mcc {mcc} outside [-1, 1]"));
    }
    if f1 > (precision + recall) / 2.0 + tol {
        issues.push(format!("weighted f1 {f1} exceeds the mean of precision and recall"));
    }
    issues
}
