//! Majority voting over selected layers and per-class layer selection for
//! alarms.
//!
//! A vote alarms when disagreements with the prediction are at least as
//! many as agreements, i.e. when the confidence `δ = agree / selected` is
//! at most one half.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::InferenceTable;
use crate::search::{mask_to_layers, search_subsets, Ratio, SearchOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub alarm_raw: bool,
    pub delta: f64,
    pub n_agree: usize,
    pub n_selected: usize,
}

/// Votes with the inferred classes of the selected layers against `y_hat`.
pub fn majority_vote(inferred: &[u32], y_hat: u32) -> Result<VoteResult> {
    if inferred.is_empty() {
        return Err(Error::EmptyLayerSet);
    }
    let n_selected = inferred.len();
    let n_agree = inferred.iter().filter(|&&c| c == y_hat).count();
    Ok(VoteResult {
        alarm_raw: n_selected - n_agree >= n_agree,
        delta: n_agree as f64 / n_selected as f64,
        n_agree,
        n_selected,
    })
}

/// Vote of one instance row (all layers) restricted to `layers`.
pub fn vote_on_layers(row: &[u32], layers: &[usize], y_hat: u32) -> Result<VoteResult> {
    let picked: Vec<u32> = layers.iter().map(|&l| row[l]).collect();
    majority_vote(&picked, y_hat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAlarm {
    pub selected_layers: Vec<usize>,
    pub achieved_f1: f64,
    pub n_candidates_evaluated: u64,
    /// No validation instance was predicted as this class; all layers are used.
    pub fallback: bool,
}

/// Layers selected for the alarm vote, one entry per predicted class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmConfig {
    pub classes: Vec<ClassAlarm>,
}

impl AlarmConfig {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn layers_for(&self, class: u32) -> &[usize] {
        &self.classes[class as usize].selected_layers
    }

    /// Alarm vote of an instance with all-layer inferred classes `row`.
    pub fn vote(&self, row: &[u32], y_hat: u32) -> Result<VoteResult> {
        vote_on_layers(row, self.layers_for(y_hat), y_hat)
    }

    pub fn to_json(&self) -> String {
        sorted_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

pub(crate) fn sorted_json<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps object keys in a BTreeMap, so this sorts them.
    let v = serde_json::to_value(value).expect("config types serialize");
    let mut text = serde_json::to_string_pretty(&v).expect("value serializes");
    text.push('\n');
    text
}

pub(crate) fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn check_inputs(
    table: &InferenceTable,
    labels: &[u32],
    predictions: &[u32],
    n_classes: usize,
) -> Result<()> {
    let n = table.n_instances();
    for (what, v) in [("labels", labels), ("predictions", predictions)] {
        if v.len() != n {
            return Err(Error::LengthMismatch {
                what,
                expected: n,
                found: v.len(),
            });
        }
        if let Some(&id) = v.iter().find(|&&c| c as usize >= n_classes) {
            return Err(Error::ClassOutOfRange { what, id, n_classes });
        }
    }
    if table.n_classes() != n_classes {
        return Err(Error::Invalid(format!(
            "inference table has {} classes, expected {n_classes}",
            table.n_classes()
        )));
    }
    Ok(())
}

/// Alarm F1 of the vote over `mask` on instances grouped by agreement pattern.
fn alarm_f1(patterns: &[(u64, u64, u64)], mask: u64) -> Ratio {
    let k = mask.count_ones();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for &(agree, mis, ok) in patterns {
        let a = (agree & mask).count_ones();
        if k - a >= a {
            tp += mis;
            fp += ok;
        } else {
            fn_ += mis;
        }
    }
    Ratio {
        num: 2 * tp,
        den: 2 * tp + fn_ + fp,
    }
}

/// Searches, for each predicted class, the layer subset whose vote best
/// flags the misclassified validation instances (maximum F1).
pub fn select_alarm_layers(
    table: &InferenceTable,
    labels: &[u32],
    predictions: &[u32],
    n_classes: usize,
    opts: &SearchOptions,
) -> Result<AlarmConfig> {
    check_inputs(table, labels, predictions, n_classes)?;
    let n_layers = table.n_layers();
    let classes = (0..n_classes as u32)
        .into_par_iter()
        .map(|c| {
            // Instances sharing an agreement bitmap vote identically under
            // every subset, so they are counted once per pattern.
            let mut hist: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
            for (i, _) in predictions.iter().enumerate().filter(|(_, &p)| p == c) {
                let agree = table
                    .row(i)
                    .iter()
                    .enumerate()
                    .fold(0u64, |m, (l, &inf)| if inf == c { m | 1 << l } else { m });
                let e = hist.entry(agree).or_default();
                if labels[i] != c {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
            if hist.is_empty() {
                warn!("no validation instance predicted as class {c}; alarm uses all layers");
                return Ok(ClassAlarm {
                    selected_layers: (0..n_layers).collect(),
                    achieved_f1: 0.0,
                    n_candidates_evaluated: 0,
                    fallback: true,
                });
            }
            let patterns: Vec<(u64, u64, u64)> = hist.into_iter().map(|(m, (mis, ok))| (m, mis, ok)).collect();
            let out = search_subsets(n_layers, opts, |mask| alarm_f1(&patterns, mask))?;
            Ok(ClassAlarm {
                selected_layers: mask_to_layers(out.mask),
                achieved_f1: out.score.value(),
                n_candidates_evaluated: out.evaluated,
                fallback: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlarmConfig { classes })
}

/// Raw (unboosted) alarms using `layer_sets[y_hat]` for every instance.
pub fn raw_alarms(table: &InferenceTable, predictions: &[u32], layer_sets: &[Vec<usize>]) -> Result<Vec<bool>> {
    predictions
        .iter()
        .enumerate()
        .map(|(i, &p)| Ok(vote_on_layers(table.row(i), &layer_sets[p as usize], p)?.alarm_raw))
        .collect()
}
