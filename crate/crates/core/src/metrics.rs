//! One-vs-rest evaluation: confusion counts, accuracy/sensitivity/
//! specificity, ROC curves with trapezoidal AUC, F1/MCC/Dice, per-class and
//! mean ("Media") reporting, and the predictions-CSV interchange format.
//!
//! Zero denominators never panic or throw: the affected metric is 0 and the
//! row is flagged degenerate.

use crate::data::{ClassLabel, ImageSample};
use crate::models::{Model, ModelError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predicted and actual label sequences differ in length: {predicted} vs {actual}")]
    LengthMismatch { predicted: usize, actual: usize },
    #[error("ROC needs both classes; no {missing} labels present")]
    SingleClass { missing: &'static str },
    #[error("cannot evaluate an empty sample set")]
    EmptyInput,
    #[error("evaluation set must contain at least 2 classes, found {found}")]
    TooFewClasses { found: usize },
    #[error("{path}: {source}")]
    PredictionsCsv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("predictions line {line}: {reason}")]
    BadPredictionRow { line: usize, reason: String },
    #[error("predictions line {line}: scores sum to {sum}, expected 1 within 1e-6")]
    BadScoreSum { line: usize, sum: f64 },
    #[error("{path}: bad header {found:?} (expected {expected:?})")]
    BadPredictionsHeader {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One-vs-rest counts for a single positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Count one-vs-rest outcomes with `positive` as "disease present".
pub fn confusion_counts(
    predicted: &[ClassLabel],
    actual: &[ClassLabel],
    positive: ClassLabel,
) -> Result<ConfusionCounts, MetricsError> {
    if predicted.len() != actual.len() {
        return Err(MetricsError::LengthMismatch { predicted: predicted.len(), actual: actual.len() });
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&pred, &truth) in predicted.iter().zip(actual) {
        match (truth == positive, pred == positive) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

// Ratio with the zero-denominator-is-zero convention.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// Dice coincides with F1 on classification counts.
pub fn dice(c: &ConfusionCounts) -> f64 {
    f1(c)
}

/// Matthews correlation; 0 when any denominator factor vanishes.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.iter().any(|&f| f == 0.0) {
        return 0.0;
    }
    (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
}

fn has_zero_denominator(c: &ConfusionCounts) -> bool {
    c.total() == 0
        || c.tp + c.fn_ == 0
        || c.tn + c.fp == 0
        || 2 * c.tp + c.fp + c.fn_ == 0
        || c.tp + c.fp == 0
        || c.tn + c.fn_ == 0
}

/// ROC polyline as (false-positive rate, true-positive rate) pairs, one per
/// distinct score threshold plus the (0,0) start. Tied scores collapse into
/// a single threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predicted: scores.len(), actual: labels.len() });
    }
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let negatives = labels.len() as f64 - positives;
    if positives == 0.0 {
        return Err(MetricsError::SingleClass { missing: "positive" });
    }
    if negatives == 0.0 {
        return Err(MetricsError::SingleClass { missing: "negative" });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives, tp as f64 / positives));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the (FPR, TPR) polyline; equal to the
/// Mann-Whitney statistic with half credit for ties.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// C x C counts indexed [true class][predicted class] over
/// [`ClassLabel::ALL`].
pub fn confusion_matrix(
    predicted: &[ClassLabel],
    actual: &[ClassLabel],
) -> Result<Vec<Vec<u64>>, MetricsError> {
    if predicted.len() != actual.len() {
        return Err(MetricsError::LengthMismatch { predicted: predicted.len(), actual: actual.len() });
    }
    let n = ClassLabel::ALL.len();
    let mut matrix = vec![vec![0u64; n]; n];
    for (&pred, &truth) in predicted.iter().zip(actual) {
        matrix[truth.index()][pred.index()] += 1;
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub f1: f64,
    pub mcc: f64,
    pub dice: f64,
    /// True when some denominator vanished and the affected metrics were
    /// pinned to 0 by convention.
    pub degenerate: bool,
}

impl ClassMetrics {
    fn from_counts(c: &ConfusionCounts, auc_value: Option<f64>) -> ClassMetrics {
        ClassMetrics {
            accuracy: accuracy(c),
            sensitivity: sensitivity(c),
            specificity: specificity(c),
            auc: auc_value.unwrap_or(0.0),
            f1: f1(c),
            mcc: mcc(c),
            dice: dice(c),
            degenerate: has_zero_denominator(c) || auc_value.is_none(),
        }
    }
}

/// Per-class rows, the unweighted mean row ("Media"), and the full
/// multiclass confusion matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub media: ClassMetrics,
    /// [true class][predicted class].
    pub confusion_matrix: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn class_row(&self, label: ClassLabel) -> &ClassMetrics {
        &self.per_class[label.index()]
    }

    /// Fixed-width text rendering of the per-class table plus the
    /// confusion matrix.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:>10}{:>13}{:>13}{:>8}{:>8}{:>8}{:>8}",
            "Class", "Accuracy", "Sensitivity", "Specificity", "AUC", "F1", "MCC", "Dice"
        );
        let mut row = |name: &str, m: &ClassMetrics| {
            let _ = writeln!(
                out,
                "{:<14}{:>10.4}{:>13.4}{:>13.4}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{}",
                name,
                m.accuracy,
                m.sensitivity,
                m.specificity,
                m.auc,
                m.f1,
                m.mcc,
                m.dice,
                if m.degenerate { "  (degenerate)" } else { "" }
            );
        };
        for (name, m) in self.classes.iter().zip(&self.per_class) {
            row(name, m);
        }
        row("Media", &self.media);
        let _ = writeln!(out);
        let _ = writeln!(out, "Confusion matrix (rows = true, columns = predicted):");
        let _ = write!(out, "{:<14}", "");
        for name in &self.classes {
            let _ = write!(out, "{:>13}", name);
        }
        let _ = writeln!(out);
        for (name, counts) in self.classes.iter().zip(&self.confusion_matrix) {
            let _ = write!(out, "{:<14}", name);
            for &c in counts {
                let _ = write!(out, "{:>13}", c);
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// One evaluated sample: its true label and the softmax score row in
/// [`ClassLabel::ALL`] order.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub id: String,
    pub true_label: ClassLabel,
    pub scores: Vec<f64>,
}

/// Assemble the full report from prediction rows: argmax labels feed the
/// threshold-free metrics, per-class score columns feed AUC.
pub fn metrics_from_predictions(rows: &[PredictionRow]) -> Result<MetricsReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let actual: Vec<ClassLabel> = rows.iter().map(|r| r.true_label).collect();
    let predicted: Vec<ClassLabel> = rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (i, &s) in r.scores.iter().enumerate() {
                if s > r.scores[best] {
                    best = i;
                }
            }
            ClassLabel::ALL[best]
        })
        .collect();

    let mut per_class = Vec::with_capacity(ClassLabel::ALL.len());
    for class in ClassLabel::ALL {
        let counts = confusion_counts(&predicted, &actual, class)?;
        let labels: Vec<bool> = actual.iter().map(|&l| l == class).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.scores[class.index()]).collect();
        let auc_value = roc_curve(&scores, &labels).ok().map(|c| auc(&c));
        per_class.push(ClassMetrics::from_counts(&counts, auc_value));
    }

    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let media = ClassMetrics {
        accuracy: mean(|m| m.accuracy),
        sensitivity: mean(|m| m.sensitivity),
        specificity: mean(|m| m.specificity),
        auc: mean(|m| m.auc),
        f1: mean(|m| m.f1),
        mcc: mean(|m| m.mcc),
        dice: mean(|m| m.dice),
        degenerate: per_class.iter().any(|m| m.degenerate),
    };

    Ok(MetricsReport {
        classes: ClassLabel::ALL.iter().map(|l| l.to_string()).collect(),
        per_class,
        media,
        confusion_matrix: confusion_matrix(&predicted, &actual)?,
    })
}

/// Run the model over the samples and report per-class and mean metrics.
pub fn evaluate_model(model: &Model, samples: &[ImageSample]) -> Result<MetricsReport, MetricsError> {
    let rows = predict_rows(model, samples)?;
    metrics_from_predictions(&rows)
}

/// Forward passes only: one prediction row per sample, in input order.
pub fn predict_rows(model: &Model, samples: &[ImageSample]) -> Result<Vec<PredictionRow>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut distinct: Vec<ClassLabel> = samples.iter().map(|s| s.label).collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(MetricsError::TooFewClasses { found: distinct.len() });
    }
    let mut rows = Vec::with_capacity(samples.len());
    for batch in samples.chunks(32) {
        let images: Vec<&crate::tensor::Tensor> = batch.iter().map(|s| &s.pixels).collect();
        let probs = model.predict(&images)?;
        for (sample, scores) in batch.iter().zip(probs) {
            rows.push(PredictionRow { id: sample.id.clone(), true_label: sample.label, scores });
        }
    }
    Ok(rows)
}

pub const PREDICTIONS_HEADER: &str =
    "id,true_label,score_Cancer,score_Pneumonia,score_Tuberculosis,score_Fibrosis,score_Normal";

/// Write prediction rows as CSV. Scores print in shortest round-trip form,
/// so re-reading them reproduces the exact f64 bits.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), MetricsError> {
    let mut out = String::new();
    let _ = writeln!(out, "{PREDICTIONS_HEADER}");
    for r in rows {
        let _ = write!(out, "{},{}", r.id, r.true_label);
        for s in &r.scores {
            let _ = write!(out, ",{s}");
        }
        let _ = writeln!(out);
    }
    std::fs::write(path, out).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

/// Read prediction rows, validating labels and that each score row sums to
/// 1 within 1e-6.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, MetricsError> {
    let csv_err = |source| MetricsError::PredictionsCsv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let found = reader.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if found != PREDICTIONS_HEADER {
        return Err(MetricsError::BadPredictionsHeader {
            path: path.to_path_buf(),
            found,
            expected: PREDICTIONS_HEADER.to_string(),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let bad = |reason: String| MetricsError::BadPredictionRow { line, reason };
        if record.len() != 2 + ClassLabel::ALL.len() {
            return Err(bad(format!("expected {} fields, got {}", 2 + ClassLabel::ALL.len(), record.len())));
        }
        let id = record.get(0).unwrap().to_string();
        let label_s = record.get(1).unwrap();
        let true_label: ClassLabel = label_s
            .parse()
            .map_err(|_| bad(format!("unknown label {label_s:?}")))?;
        let mut scores = Vec::with_capacity(ClassLabel::ALL.len());
        for j in 0..ClassLabel::ALL.len() {
            let field = record.get(2 + j).unwrap();
            let v: f64 = field.parse().map_err(|_| bad(format!("bad score {field:?}")))?;
            scores.push(v);
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::BadScoreSum { line, sum });
        }
        rows.push(PredictionRow { id, true_label, scores });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::{Cancer, Fibrosis, Normal, Pneumonia, Tuberculosis};

    #[test]
    fn perfect_predictions_count_cleanly() {
        let truth = [vec![Cancer; 10], vec![Normal; 10]].concat();
        let c = confusion_counts(&truth, &truth, Cancer).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 10, fp: 0, tn: 10, fn_: 0 });
    }

    #[test]
    fn constant_positive_classifier_counts() {
        let actual = [vec![Cancer; 3], vec![Normal; 7]].concat();
        let predicted = vec![Cancer; 10];
        let c = confusion_counts(&predicted, &actual, Cancer).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 7, tn: 0, fn_: 0 });
    }

    #[test]
    fn mixed_case_matches_per_sample_counting_oracle() {
        let actual = [
            Cancer, Pneumonia, Cancer, Normal, Fibrosis, Cancer, Tuberculosis, Normal, Cancer, Pneumonia,
            Fibrosis, Cancer,
        ];
        let predicted = [
            Cancer, Cancer, Pneumonia, Normal, Fibrosis, Cancer, Tuberculosis, Cancer, Cancer, Pneumonia,
            Normal, Fibrosis,
        ];
        let c = confusion_counts(&predicted, &actual, Cancer).unwrap();
        // Brute-force oracle.
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for i in 0..actual.len() {
            match (actual[i] == Cancer, predicted[i] == Cancer) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
                (true, false) => fn_ += 1,
            }
        }
        assert_eq!(c, ConfusionCounts { tp, fp, tn, fn_ });
        assert_eq!(c.total(), 12);
    }

    #[test]
    fn formula_examples() {
        let c = ConfusionCounts { tp: 50, fp: 5, tn: 40, fn_: 5 };
        assert!((accuracy(&c) - 0.9).abs() < 1e-12);
        let c = ConfusionCounts { tp: 8, fp: 0, tn: 0, fn_: 2 };
        assert!((sensitivity(&c) - 0.8).abs() < 1e-12);
        let c = ConfusionCounts { tp: 6, fp: 2, tn: 10, fn_: 2 };
        assert!((f1(&c) - 0.75).abs() < 1e-12);
        assert_eq!(f1(&c), dice(&c));
    }

    #[test]
    fn empty_counts_are_degenerate_zeros() {
        let c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
        assert_eq!(accuracy(&c), 0.0);
        assert_eq!(sensitivity(&c), 0.0);
        assert_eq!(specificity(&c), 0.0);
        assert_eq!(f1(&c), 0.0);
        assert_eq!(mcc(&c), 0.0);
        assert!(has_zero_denominator(&c));
    }

    #[test]
    fn mcc_perfect_and_symmetric_cases() {
        let c = ConfusionCounts { tp: 5, fp: 0, tn: 5, fn_: 0 };
        assert!((mcc(&c) - 1.0).abs() < 1e-12);
        assert!((f1(&c) - 1.0).abs() < 1e-12);
        let c = ConfusionCounts { tp: 5, fp: 5, tn: 5, fn_: 5 };
        assert_eq!(mcc(&c), 0.0);
    }

    #[test]
    fn roc_hand_swept_example() {
        let curve = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        let expected = [(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)];
        assert_eq!(curve.points.len(), expected.len());
        for (got, want) in curve.points.iter().zip(&expected) {
            assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_perfect_separation_passes_through_0_1() {
        let curve = roc_curve(&[0.9, 0.7, 0.4, 0.2], &[true, true, false, false]).unwrap();
        assert!(curve.points.iter().any(|&(x, y)| x == 0.0 && y == 1.0));
        assert!((auc(&curve) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_full_tie_is_the_diagonal() {
        let curve = roc_curve(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(curve.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((auc(&curve) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roc_rejects_single_class_inputs() {
        assert!(matches!(
            roc_curve(&[0.5, 0.6], &[true, true]),
            Err(MetricsError::SingleClass { missing: "negative" })
        ));
        assert!(matches!(
            roc_curve(&[0.5, 0.6], &[false, false]),
            Err(MetricsError::SingleClass { missing: "positive" })
        ));
    }

    #[test]
    fn auc_pairwise_example() {
        // 3 of 4 positive/negative pairs correctly ordered.
        let curve = roc_curve(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert!((auc(&curve) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_coordinates_are_monotone() {
        let scores = [0.3, 0.8, 0.8, 0.1, 0.5, 0.5, 0.9, 0.2];
        let labels = [false, true, false, false, true, false, true, true];
        let curve = roc_curve(&scores, &labels).unwrap();
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
    }

    fn rows_for(pairs: &[(ClassLabel, [f64; 5])]) -> Vec<PredictionRow> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (label, scores))| PredictionRow {
                id: format!("r{i}"),
                true_label: *label,
                scores: scores.to_vec(),
            })
            .collect()
    }

    #[test]
    fn perfect_model_scores_ones_across_the_board() {
        let mut pairs = Vec::new();
        for (i, label) in ClassLabel::ALL.iter().enumerate() {
            for _ in 0..3 {
                let mut scores = [0.05; 5];
                scores[i] = 0.8;
                pairs.push((*label, scores));
            }
        }
        let report = metrics_from_predictions(&rows_for(&pairs)).unwrap();
        for m in &report.per_class {
            for v in [m.accuracy, m.sensitivity, m.specificity, m.auc, m.f1, m.mcc, m.dice] {
                assert!((v - 1.0).abs() < 1e-12);
            }
            assert!(!m.degenerate);
        }
        assert!((report.media.accuracy - 1.0).abs() < 1e-12);
        // Confusion matrix is diagonal.
        for (i, row) in report.confusion_matrix.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c, if i == j { 3 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_model_on_balanced_set_matches_counting_oracle() {
        // Always predicts Cancer on a balanced 5-class set of 4 per class.
        let mut pairs = Vec::new();
        for label in ClassLabel::ALL {
            for _ in 0..4 {
                pairs.push((label, [0.6, 0.1, 0.1, 0.1, 0.1]));
            }
        }
        let report = metrics_from_predictions(&rows_for(&pairs)).unwrap();
        // Cancer row: tp=4, fp=16 -> accuracy 0.2; other rows: tn=16 -> 0.8.
        assert!((report.class_row(Cancer).accuracy - 0.2).abs() < 1e-12);
        for label in [Pneumonia, Tuberculosis, Fibrosis, Normal] {
            assert!((report.class_row(label).accuracy - 0.8).abs() < 1e-12);
        }
        let expected_mean = (0.2 + 4.0 * 0.8) / 5.0;
        assert!((report.media.accuracy - expected_mean).abs() < 1e-12);
        // Constant scores mean every class AUC degenerates to ties = 0.5
        // except where it is well-defined; Cancer column is all 0.6 -> 0.5.
        assert!((report.class_row(Cancer).auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn media_row_is_the_arithmetic_mean() {
        let pairs = [
            (Cancer, [0.5, 0.2, 0.1, 0.1, 0.1]),
            (Pneumonia, [0.3, 0.4, 0.1, 0.1, 0.1]),
            (Tuberculosis, [0.1, 0.1, 0.6, 0.1, 0.1]),
            (Fibrosis, [0.2, 0.2, 0.2, 0.2, 0.2]),
            (Normal, [0.1, 0.1, 0.1, 0.2, 0.5]),
            (Cancer, [0.1, 0.5, 0.2, 0.1, 0.1]),
        ];
        let report = metrics_from_predictions(&rows_for(&pairs)).unwrap();
        let mean: f64 = report.per_class.iter().map(|m| m.accuracy).sum::<f64>() / 5.0;
        assert!((report.media.accuracy - mean).abs() < 1e-9);
        let mean_auc: f64 = report.per_class.iter().map(|m| m.auc).sum::<f64>() / 5.0;
        assert!((report.media.auc - mean_auc).abs() < 1e-9);
    }

    #[test]
    fn accuracy_equals_trace_over_n_micro_consistency() {
        let pairs = [
            (Cancer, [0.5, 0.2, 0.1, 0.1, 0.1]),
            (Pneumonia, [0.3, 0.4, 0.1, 0.1, 0.1]),
            (Normal, [0.5, 0.1, 0.1, 0.2, 0.1]),
            (Fibrosis, [0.1, 0.1, 0.1, 0.6, 0.1]),
        ];
        let report = metrics_from_predictions(&rows_for(&pairs)).unwrap();
        let trace: u64 = (0..5).map(|i| report.confusion_matrix[i][i]).sum();
        let total: u64 = report.confusion_matrix.iter().flatten().sum();
        assert_eq!(total, 4);
        assert_eq!(trace, 3); // Cancer, Pneumonia, Fibrosis hit; Normal missed
    }

    #[test]
    fn predictions_csv_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let pairs = [
            (Cancer, [0.5, 0.2, 0.1, 0.1, 0.1]),
            (Normal, [0.12345678901234567, 0.2, 0.1, 0.17654321098765433, 0.4]),
        ];
        let rows = rows_for(&pairs);
        write_predictions(&path, &rows).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.true_label, b.true_label);
            assert_eq!(a.scores, b.scores);
        }
    }

    #[test]
    fn predictions_csv_validates_sum_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            format!("{PREDICTIONS_HEADER}\nx,Cancer,0.5,0.2,0.1,0.1,0.2\n"),
        )
        .unwrap();
        assert!(matches!(read_predictions(&path), Err(MetricsError::BadScoreSum { line: 2, .. })));

        std::fs::write(
            &path,
            format!("{PREDICTIONS_HEADER}\nx,Asthma,0.5,0.2,0.1,0.1,0.1\n"),
        )
        .unwrap();
        assert!(matches!(read_predictions(&path), Err(MetricsError::BadPredictionRow { line: 2, .. })));

        std::fs::write(&path, "id,who,knows\n").unwrap();
        assert!(matches!(read_predictions(&path), Err(MetricsError::BadPredictionsHeader { .. })));
    }
}
