//! Change-class confusion counts and the derived report.

use alloc::format;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts with "change" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds one binary prediction/label pair.
    pub fn accumulate(&mut self, predicted: &[u8], label: &[u8]) -> Result<()> {
        if predicted.len() != label.len() {
            return Err(Error::invalid("accumulate", format!("prediction has {} pixels, label has {}", predicted.len(), label.len())));
        }
        let mut local = ConfusionMatrix::default();
        for (i, (&p, &l)) in predicted.iter().zip(label).enumerate() {
            match (p, l) {
                (1, 1) => local.tp += 1,
                (1, 0) => local.fp += 1,
                (0, 1) => local.fn_ += 1,
                (0, 0) => local.tn += 1,
                _ => return Err(Error::invalid("accumulate", format!("non-binary value at pixel {i}: pred {p}, label {l}"))),
            }
        }
        self.merge(&local);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn report(&self) -> Result<MetricReport> {
        report(self)
    }
}

/// Flags set when a ratio had a zero denominator and was reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    /// No predicted positives.
    pub precision: bool,
    /// No actual positives.
    pub recall: bool,
    pub f1: bool,
    pub iou: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.iou
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    if cm.total() == 0 {
        return Err(Error::invalid("report", "confusion matrix is empty"));
    }
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let mut d = Degenerate::default();
    let precision = ratio(tp, tp + fp, &mut d.precision);
    let recall = ratio(tp, tp + fn_, &mut d.recall);
    // Written in counts so that iou == f1 / (2 - f1) holds to rounding.
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_, &mut d.f1);
    let iou = ratio(tp, tp + fp + fn_, &mut d.iou);
    Ok(MetricReport { precision, recall, f1, iou, oa: (tp + tn) / cm.total() as f64, degenerate: d })
}

/// Harmonic mean of two rates, 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) }
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        format!("{self}")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, v) in [("precision", self.precision), ("recall", self.recall), ("f1", self.f1), ("iou", self.iou), ("oa", self.oa)] {
            writeln!(f, "{key}: {:.2}", 100.0 * v)?;
        }
        let d = &self.degenerate;
        let mut flags = [("precision", d.precision), ("recall", d.recall), ("f1", d.f1), ("iou", d.iou)]
            .into_iter()
            .filter(|(_, on)| *on)
            .map(|(k, _)| k)
            .peekable();
        if flags.peek().is_some() {
            write!(f, "degenerate:")?;
            for k in flags {
                write!(f, " {k}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_positive() {
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&[1; 16], &[1; 16]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 16, ..Default::default() });
        let r = cm.report().unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou, r.oa), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn total_false_alarm() {
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&[1; 4], &[0; 4]).unwrap();
        assert_eq!(cm.fp, 4);
        let r = cm.report().unwrap();
        assert!(r.degenerate.recall && !r.degenerate.precision);
    }

    #[test]
    fn hand_computed_report() {
        let cm = ConfusionMatrix { tp: 3, fp: 1, fn_: 1, tn: 5 };
        let r = report(&cm).unwrap();
        for (got, want) in [(r.precision, 0.75), (r.recall, 0.75), (r.f1, 0.75), (r.iou, 0.6), (r.oa, 0.8)] {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn published_row_is_self_consistent() {
        let f1 = 100.0 * f1_from(0.9205, 0.8880);
        assert!((f1 - 90.40).abs() <= 0.01, "{f1}");
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(report(&ConfusionMatrix::default()).is_err());
        assert!(ConfusionMatrix::default().accumulate(&[0, 1], &[0]).is_err());
        assert!(ConfusionMatrix::default().accumulate(&[2], &[0]).is_err());
    }

    #[test]
    fn all_zero_prediction_flags_precision() {
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&[0, 0, 0, 0], &[1, 0, 1, 0]).unwrap();
        let r = cm.report().unwrap();
        assert_eq!(r.recall, 0.0);
        assert!(r.degenerate.precision);
        assert!(r.to_text().contains("degenerate: precision\n"));
    }

    #[test]
    fn text_format() {
        let r = report(&ConfusionMatrix { tp: 3, fp: 1, fn_: 1, tn: 5 }).unwrap();
        assert_eq!(r.to_text(), "precision: 75.00\nrecall: 75.00\nf1: 75.00\niou: 60.00\noa: 80.00\n");
    }

    #[test]
    fn matches_brute_force_over_random_masks() {
        use crate::rng::rng_for;
        use alloc::vec::Vec;
        use rand::Rng;

        let mut rng = rng_for(17, &[]);
        let mut pooled = ConfusionMatrix::default();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for _ in 0..100 {
            let density: f64 = rng.random();
            let pred: Vec<u8> = (0..256).map(|_| rng.random_bool(density) as u8).collect();
            let label: Vec<u8> = (0..256).map(|_| rng.random_bool(0.3) as u8).collect();
            let mut one = ConfusionMatrix::default();
            one.accumulate(&pred, &label).unwrap();
            let mut counts = [0u64; 4];
            for i in 0..256 {
                counts[(pred[i] * 2 + label[i]) as usize] += 1;
            }
            assert_eq!(one, ConfusionMatrix { tp: counts[3], fp: counts[2], fn_: counts[1], tn: counts[0] });
            tn += counts[0];
            fn_ += counts[1];
            fp += counts[2];
            tp += counts[3];
            pooled.merge(&one);
        }
        let r = pooled.report().unwrap();
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let p = tp / (tp + fp);
        let rc = tp / (tp + fn_);
        assert!((r.precision - p).abs() < 1e-12);
        assert!((r.recall - rc).abs() < 1e-12);
        assert!((r.f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
        assert!((r.iou - tp / (tp + fp + fn_)).abs() < 1e-12);
        assert!((r.oa - (tp + tn) / 25_600.0).abs() < 1e-12);
    }
}
