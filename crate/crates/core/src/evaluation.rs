//! Alarm quality on a labelled split, alongside the layer-selection and
//! boosting ablations: raw votes over the selected layers, over all layers,
//! and over random layer sets of the selected sizes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alarm::{raw_alarms, AlarmConfig};
use crate::checker::Verdict;
use crate::error::{Error, Result};
use crate::kde::InferenceTable;
use crate::metrics::{
    advice_accuracy, confusion, confusion_from_verdicts, model_accuracy, rates, spearman_consistency, ConfusionCounts,
    RateReport, Spearman,
};

pub const DEFAULT_RANDOM_DRAWS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub counts: ConfusionCounts,
    pub rates: RateReport,
}

impl Scored {
    fn from_counts(counts: ConfusionCounts) -> Self {
        Self {
            counts,
            rates: rates(&counts),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub draws: usize,
    pub tpr_mean: f64,
    pub fpr_mean: f64,
    pub f1_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub counts: ConfusionCounts,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
    pub model_accuracy: f64,
    pub advice_accuracy: f64,
    /// Correctness vs. fraction of all layers agreeing with the prediction;
    /// `None` when either side is constant.
    pub spearman: Option<Spearman>,
    pub no_boost: Scored,
    pub full_layers: Scored,
    pub random_layers: RandomBaseline,
}

/// Fraction of all layers whose inferred class equals the prediction.
pub fn all_layer_consistency(table: &InferenceTable, predictions: &[u32]) -> Vec<f64> {
    predictions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let row = table.row(i);
            row.iter().filter(|&&c| c == p).count() as f64 / row.len() as f64
        })
        .collect()
}

/// Raw alarms with full-layer votes for every class.
pub fn full_layer_alarms(table: &InferenceTable, predictions: &[u32], n_classes: usize) -> Result<Vec<bool>> {
    let all: Vec<usize> = (0..table.n_layers()).collect();
    raw_alarms(table, predictions, &vec![all; n_classes])
}

/// Random layer sets with the same per-class sizes as `alarm`.
pub fn random_layer_sets(alarm: &AlarmConfig, n_layers: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    alarm
        .classes
        .iter()
        .map(|c| {
            let mut s = sample(rng, n_layers, c.selected_layers.len().min(n_layers)).into_vec();
            s.sort_unstable();
            s
        })
        .collect()
}

pub fn random_baseline(
    table: &InferenceTable,
    labels: &[u32],
    predictions: &[u32],
    alarm: &AlarmConfig,
    seed: u64,
    draws: usize,
) -> Result<RandomBaseline> {
    if draws == 0 {
        return Err(Error::Invalid("random baseline needs at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tpr, mut fpr, mut f1) = (0.0, 0.0, 0.0);
    for _ in 0..draws {
        let sets = random_layer_sets(alarm, table.n_layers(), &mut rng);
        let r = rates(&confusion(
            &raw_alarms(table, predictions, &sets)?,
            labels,
            predictions,
        )?);
        tpr += r.tpr;
        fpr += r.fpr;
        f1 += r.f1;
    }
    let d = draws as f64;
    Ok(RandomBaseline {
        draws,
        tpr_mean: tpr / d,
        fpr_mean: fpr / d,
        f1_mean: f1 / d,
    })
}

pub fn evaluate(
    table: &InferenceTable,
    verdicts: &[Verdict],
    labels: &[u32],
    predictions: &[u32],
    alarm: &AlarmConfig,
    seed: u64,
    random_draws: usize,
) -> Result<EvaluationReport> {
    let n = predictions.len();
    if table.n_instances() != n || verdicts.len() != n {
        return Err(Error::LengthMismatch {
            what: "verdicts",
            expected: n,
            found: verdicts.len().min(table.n_instances()),
        });
    }
    let counts = confusion_from_verdicts(verdicts, labels, predictions)?;
    let r = rates(&counts);
    let raw: Vec<bool> = verdicts.iter().map(|v| v.raw_alarm).collect();
    let correct: Vec<bool> = labels.iter().zip(predictions).map(|(y, p)| y == p).collect();
    let spearman = match spearman_consistency(&correct, &all_layer_consistency(table, predictions)) {
        Ok(s) => Some(s),
        Err(Error::ConstantInput) | Err(Error::Invalid(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvaluationReport {
        n,
        counts,
        tpr: r.tpr,
        fpr: r.fpr,
        f1: r.f1,
        model_accuracy: model_accuracy(labels, predictions)?,
        advice_accuracy: advice_accuracy(verdicts, labels, predictions)?,
        spearman,
        no_boost: Scored::from_counts(confusion(&raw, labels, predictions)?),
        full_layers: Scored::from_counts(confusion(
            &full_layer_alarms(table, predictions, alarm.n_classes())?,
            labels,
            predictions,
        )?),
        random_layers: random_baseline(table, labels, predictions, alarm, seed, random_draws)?,
    })
}
