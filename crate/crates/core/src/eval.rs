//! Detection quality metrics.
//!
//! Everything derives from a 5x5 confusion matrix (rows truth, columns
//! prediction). Each attack is scored one-vs-rest on the frames whose true
//! label is either `Normal` or that attack, mirroring how captures holding
//! a single attack type are evaluated: predicting any wrong class counts
//! against recall, but only false alarms on genuinely normal frames count
//! against precision.
//!
//! Ratios with an empty denominator are reported as `None` and rendered as
//! `-`, never silently as zero; a dash in a report means "no frames to
//! measure", which is a different statement from "measured at zero".

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::ClassLabel;

const C: usize = ClassLabel::COUNT;

/// Counts of (true label, predicted label) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[truth][prediction]`, indexed by [`ClassLabel::index`].
    pub counts: [[u64; C]; C],
}

impl ConfusionMatrix {
    pub fn new() -> ConfusionMatrix {
        ConfusionMatrix::default()
    }

    pub fn record(&mut self, truth: ClassLabel, prediction: ClassLabel) {
        self.counts[truth.index()][prediction.index()] += 1;
    }

    pub fn from_pairs<I>(pairs: I) -> ConfusionMatrix
    where
        I: IntoIterator<Item = (ClassLabel, ClassLabel)>,
    {
        let mut cm = ConfusionMatrix::new();
        for (truth, prediction) in pairs {
            cm.record(truth, prediction);
        }
        cm
    }

    pub fn count(&self, truth: ClassLabel, prediction: ClassLabel) -> u64 {
        self.counts[truth.index()][prediction.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, truth: ClassLabel) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    /// Correctly classified frames across all classes.
    pub fn trace(&self) -> u64 {
        (0..C).map(|i| self.counts[i][i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..C {
            for j in 0..C {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

fn ratio(numerator: u64, denominator: u64) -> Option<f64> {
    if denominator == 0 {
        None
    } else {
        Some(numerator as f64 / denominator as f64)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("one-vs-rest metrics are defined for attacks, not {0:?}")]
    NotAnAttack(ClassLabel),
    #[error("no frames with true label normal or {attack:?} to score")]
    EmptyRestriction { attack: ClassLabel },
}

/// One-vs-rest scores for a single attack, over frames whose truth is
/// `Normal` or that attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub attack: ClassLabel,
    pub true_positives: u64,
    pub false_negatives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub false_negative_rate: Option<f64>,
}

impl AttackMetrics {
    fn from_confusion(cm: &ConfusionMatrix, attack: ClassLabel) -> AttackMetrics {
        let a = attack.index();
        let n = ClassLabel::Normal.index();
        let true_positives = cm.counts[a][a];
        let false_negatives = cm.row_total(attack) - true_positives;
        let false_positives = cm.counts[n][a];
        let true_negatives = cm.row_total(ClassLabel::Normal) - false_positives;

        let precision = ratio(true_positives, true_positives + false_positives);
        let recall = ratio(true_positives, true_positives + false_negatives);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        AttackMetrics {
            attack,
            true_positives,
            false_negatives,
            false_positives,
            true_negatives,
            accuracy: ratio(
                true_positives + true_negatives,
                true_positives + false_negatives + false_positives + true_negatives,
            ),
            precision,
            recall,
            f1,
            false_positive_rate: ratio(false_positives, false_positives + true_negatives),
            false_negative_rate: ratio(false_negatives, true_positives + false_negatives),
        }
    }
}

/// One-vs-rest scores for a single attack, rejecting queries the matrix has
/// no frames for. [`evaluate`] computes the same numbers for every attack at
/// once and reports an empty restriction as all-undefined instead.
pub fn per_attack_metrics(
    cm: &ConfusionMatrix,
    attack: ClassLabel,
) -> Result<AttackMetrics, EvalError> {
    if !attack.is_attack() {
        return Err(EvalError::NotAnAttack(attack));
    }
    let m = AttackMetrics::from_confusion(cm, attack);
    if m.true_positives + m.false_negatives + m.false_positives + m.true_negatives == 0 {
        return Err(EvalError::EmptyRestriction { attack });
    }
    Ok(m)
}

/// Whole-stream scores across all five classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub total: u64,
    /// Five-class accuracy: the confusion matrix trace over the total.
    pub accuracy: Option<f64>,
    /// Normal frames flagged as any attack, over all normal frames.
    pub binary_false_positive_rate: Option<f64>,
    /// Attack frames of any kind passed as normal, over all attack frames.
    pub binary_false_negative_rate: Option<f64>,
}

impl OverallMetrics {
    fn from_confusion(cm: &ConfusionMatrix) -> OverallMetrics {
        let n = ClassLabel::Normal.index();
        let normal_total = cm.row_total(ClassLabel::Normal);
        let flagged: u64 = (0..C).filter(|&j| j != n).map(|j| cm.counts[n][j]).sum();
        let attack_total: u64 = ClassLabel::attacks().map(|a| cm.row_total(a)).sum();
        let missed: u64 = ClassLabel::attacks().map(|a| cm.counts[a.index()][n]).sum();
        OverallMetrics {
            total: cm.total(),
            accuracy: ratio(cm.trace(), cm.total()),
            binary_false_positive_rate: ratio(flagged, normal_total),
            binary_false_negative_rate: ratio(missed, attack_total),
        }
    }
}

/// Everything a scoring run reports; serializes to JSON losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    /// One entry per attack, in [`ClassLabel::attacks`] order.
    pub per_attack: Vec<AttackMetrics>,
    pub overall: OverallMetrics,
}

/// Computes all metrics from a confusion matrix.
pub fn evaluate(confusion: &ConfusionMatrix) -> EvalReport {
    EvalReport {
        confusion: *confusion,
        per_attack: ClassLabel::attacks()
            .map(|a| AttackMetrics::from_confusion(confusion, a))
            .collect(),
        overall: OverallMetrics::from_confusion(confusion),
    }
}

/// Renders a rate for reports: `-` when undefined, four decimals normally,
/// and scientific notation with a two-digit exponent below 1e-4 so tiny
/// false-positive rates stay legible instead of rounding to zero.
pub fn format_rate(value: Option<f64>) -> String {
    match value {
        None => "-".to_string(),
        Some(v) if v == 0.0 => "0.0000".to_string(),
        Some(v) if v.abs() < 1e-4 => {
            let s = format!("{v:.4e}");
            let (mantissa, exponent) = s.split_once('e').unwrap();
            let exp: i32 = exponent.parse().unwrap();
            let sign = if exp < 0 { '-' } else { '+' };
            format!("{mantissa}e{sign}{:02}", exp.abs())
        }
        Some(v) => format!("{v:.4}"),
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "confusion matrix (rows truth, columns prediction)")?;
        write!(f, "{:>12}", "")?;
        for label in ClassLabel::ALL {
            write!(f, "{:>12}", label.name())?;
        }
        writeln!(f)?;
        for truth in ClassLabel::ALL {
            write!(f, "{:>12}", truth.name())?;
            for prediction in ClassLabel::ALL {
                write!(f, "{:>12}", self.count_for(truth, prediction))?;
            }
            writeln!(f)?;
        }
        writeln!(f)?;
        for m in &self.per_attack {
            writeln!(
                f,
                "{:<12} accuracy {}  precision {}  recall {}  fpr {}  f1 {}  fnr {}",
                m.attack.name(),
                format_rate(m.accuracy),
                format_rate(m.precision),
                format_rate(m.recall),
                format_rate(m.false_positive_rate),
                format_rate(m.f1),
                format_rate(m.false_negative_rate),
            )?;
        }
        writeln!(
            f,
            "{:<12} accuracy {}  binary fpr {}  binary fnr {}  ({} frames)",
            "overall",
            format_rate(self.overall.accuracy),
            format_rate(self.overall.binary_false_positive_rate),
            format_rate(self.overall.binary_false_negative_rate),
            self.overall.total,
        )
    }
}

impl EvalReport {
    fn count_for(&self, truth: ClassLabel, prediction: ClassLabel) -> u64 {
        self.confusion.count(truth, prediction)
    }
}
