//! Alarm accounting against true misclassifications, advice accuracy and the
//! rank correlation between prediction correctness and layer consistency.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checker::Verdict;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn rates(&self) -> RateReport {
        rates(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch { what, expected, found });
    }
    Ok(())
}

/// Tallies alarms against misclassifications (`label != prediction`).
pub fn confusion(alarms: &[bool], labels: &[u32], predictions: &[u32]) -> Result<ConfusionCounts> {
    check_len("labels", alarms.len(), labels.len())?;
    check_len("predictions", alarms.len(), predictions.len())?;
    let mut c = ConfusionCounts::default();
    for ((&alarm, &y), &p) in alarms.iter().zip(labels).zip(predictions) {
        match (alarm, y != p) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion_from_verdicts(verdicts: &[Verdict], labels: &[u32], predictions: &[u32]) -> Result<ConfusionCounts> {
    let alarms: Vec<bool> = verdicts.iter().map(|v| v.alarm).collect();
    confusion(&alarms, labels, predictions)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// TPR, FPR and F1, each `0` when its denominator is zero.
pub fn rates(c: &ConfusionCounts) -> RateReport {
    RateReport {
        tpr: ratio(c.tp, c.tp + c.fn_),
        fpr: ratio(c.fp, c.fp + c.tn),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp),
    }
}

/// A rate as hundredths of a percent, rounded half to even (e.g. `0.50724`
/// becomes `5072`, printed as `50.72`).
pub fn percent_hundredths(rate: f64) -> i64 {
    (rate * 10_000.0).round_ties_even() as i64
}

pub fn format_percent(rate: f64) -> String {
    let h = percent_hundredths(rate);
    format!("{}.{:02}", h / 100, h % 100)
}

/// Accuracy of the model's raw predictions.
pub fn model_accuracy(labels: &[u32], predictions: &[u32]) -> Result<f64> {
    check_len("predictions", labels.len(), predictions.len())?;
    let hits = labels.iter().zip(predictions).filter(|(y, p)| y == p).count();
    Ok(ratio(hits as u64, labels.len() as u64))
}

/// Accuracy of the composite predictor: advice on alarmed instances, the
/// model's prediction elsewhere.
pub fn advice_accuracy(verdicts: &[Verdict], labels: &[u32], predictions: &[u32]) -> Result<f64> {
    check_len("labels", verdicts.len(), labels.len())?;
    check_len("predictions", verdicts.len(), predictions.len())?;
    let hits = verdicts
        .iter()
        .zip(labels)
        .zip(predictions)
        .filter(|((v, &y), &p)| {
            let z = match (v.alarm, v.advice) {
                (true, Some(a)) => a,
                _ => p,
            };
            z == y
        })
        .count();
    Ok(ratio(hits as u64, verdicts.len() as u64))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p: f64,
}

/// Spearman's rho (Pearson correlation of average ranks) with a two-sided
/// p-value from the t approximation on `n - 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    check_len("paired values", x.len(), y.len())?;
    let n = x.len();
    if n < 3 {
        return Err(Error::Invalid(format!("spearman needs at least 3 pairs, got {n}")));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if rho.abs() == 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.cdf(-t.abs())).min(1.0)
    };
    Ok(Spearman { rho, p })
}

/// Correlation between prediction correctness and layer-consistency `δ`.
pub fn spearman_consistency(correct: &[bool], delta: &[f64]) -> Result<Spearman> {
    let c: Vec<f64> = correct.iter().map(|&b| f64::from(u8::from(b))).collect();
    spearman(&c, delta)
}
