//! Layer selection and weights for advice.
//!
//! Validation instances predicted as `c_p` are split by the alarm vote into
//! a positive (alarmed) and a negative branch. Inside each branch, for every
//! true class `c_t`, the layer subset whose majority vote recovers `c_t` most
//! often is kept, together with a weight describing how much of the branch
//! that class accounts for.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alarm::{check_inputs, load_json, sorted_json, AlarmConfig};
use crate::error::{Error, Result};
use crate::kde::InferenceTable;
use crate::search::{mask_to_layers, search_subsets, SearchOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdviceConfig {
    /// `[c_p][c_t]` layer sets used when the alarm vote is positive.
    pub pos_layers: Vec<Vec<Vec<usize>>>,
    /// `[c_p][c_t]` layer sets used when the alarm vote is negative.
    pub neg_layers: Vec<Vec<Vec<usize>>>,
    pub w_pos: Vec<Vec<f64>>,
    pub w_neg: Vec<Vec<f64>>,
}

impl AdviceConfig {
    pub fn n_classes(&self) -> usize {
        self.w_pos.len()
    }

    pub fn to_json(&self) -> String {
        sorted_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = load_json(path)?;
        let c = cfg.w_pos.len();
        let square = |t: &Vec<Vec<f64>>| t.len() == c && t.iter().all(|r| r.len() == c);
        let square_sets = |t: &Vec<Vec<Vec<usize>>>| {
            t.len() == c && t.iter().all(|r| r.len() == c && r.iter().all(|s| !s.is_empty()))
        };
        if !(square(&cfg.w_pos) && square(&cfg.w_neg) && square_sets(&cfg.pos_layers) && square_sets(&cfg.neg_layers)) {
            return Err(Error::Invalid(format!(
                "{} is not a consistent advice config",
                path.display()
            )));
        }
        Ok(cfg)
    }
}

/// Majority class among `layers` of instance `i`; ties go to the highest
/// summed log density over those layers, then to the lowest class id.
pub fn majority_class(table: &InferenceTable, i: usize, layers: &[usize]) -> u32 {
    let n_classes = table.n_classes();
    let row = table.row(i);
    let mut counts = vec![0u32; n_classes];
    for &l in layers {
        counts[row[l] as usize] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..n_classes).filter(|&c| counts[c] == top).collect();
    if tied.len() == 1 || !table.has_log_densities() {
        return tied[0] as u32;
    }
    let summed = |c: usize| -> f64 {
        layers
            .iter()
            .map(|&l| table.log_density(i, l, c).unwrap_or(f64::NEG_INFINITY))
            .sum()
    };
    let mut best = tied[0];
    let mut best_sum = summed(best);
    for &c in &tied[1..] {
        let s = summed(c);
        if s > best_sum {
            best = c;
            best_sum = s;
        }
    }
    best as u32
}

/// `|idx_ct| · acc_max` over the branch size, or over the branch size minus
/// `excluded` (correct predictions in the branch) when `c_t != c_p`.
/// Non-positive denominators give zero.
pub fn advice_weight(n_target: usize, acc_max: f64, branch_len: usize, excluded: usize, same_class: bool) -> f64 {
    let denom = if same_class {
        branch_len as f64
    } else {
        branch_len as f64 - excluded as f64
    };
    if denom <= 0.0 {
        0.0
    } else {
        n_target as f64 * acc_max / denom
    }
}

struct BranchResult {
    layers: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

fn select_branch(
    table: &InferenceTable,
    labels: &[u32],
    c_p: u32,
    branch: &[usize],
    excluded: usize,
    fallback: &[usize],
    opts: &SearchOptions,
) -> Result<BranchResult> {
    let n_classes = table.n_classes();
    let per_target = (0..n_classes as u32)
        .into_par_iter()
        .map(|c_t| {
            let idx: Vec<usize> = branch.iter().copied().filter(|&i| labels[i] == c_t).collect();
            if idx.is_empty() {
                return Ok((fallback.to_vec(), 0.0));
            }
            let out = search_subsets(table.n_layers(), opts, |mask| {
                let layers = mask_to_layers(mask);
                idx.iter()
                    .filter(|&&i| majority_class(table, i, &layers) == c_t)
                    .count()
            })?;
            let acc_max = out.score as f64 / idx.len() as f64;
            let weight = advice_weight(idx.len(), acc_max, branch.len(), excluded, c_t == c_p);
            Ok((mask_to_layers(out.mask), weight))
        })
        .collect::<Result<Vec<_>>>()?;
    let (layers, weights) = per_target.into_iter().unzip();
    Ok(BranchResult { layers, weights })
}

/// Selects advice layer sets and weights for every (predicted, true) class
/// pair, on both branches of the alarm vote.
pub fn select_advice_layers(
    table: &InferenceTable,
    labels: &[u32],
    predictions: &[u32],
    alarm: &AlarmConfig,
    n_classes: usize,
    opts: &SearchOptions,
) -> Result<AdviceConfig> {
    check_inputs(table, labels, predictions, n_classes)?;
    if alarm.n_classes() != n_classes {
        return Err(Error::Invalid(format!(
            "alarm config covers {} classes, expected {n_classes}",
            alarm.n_classes()
        )));
    }
    let rows = (0..n_classes as u32)
        .into_par_iter()
        .map(|c_p| {
            let alarm_layers = alarm.layers_for(c_p);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (i, _) in predictions.iter().enumerate().filter(|(_, &p)| p == c_p) {
                if alarm.vote(table.row(i), c_p)?.alarm_raw {
                    pos.push(i);
                } else {
                    neg.push(i);
                }
            }
            // False alarms on the positive branch, true negatives on the
            // negative one: correctly predicted instances in each branch.
            let fp = pos.iter().filter(|&&i| labels[i] == c_p).count();
            let tn = neg.iter().filter(|&&i| labels[i] == c_p).count();
            let p = select_branch(table, labels, c_p, &pos, fp, alarm_layers, opts)?;
            let n = select_branch(table, labels, c_p, &neg, tn, alarm_layers, opts)?;
            Ok((p, n))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cfg = AdviceConfig {
        pos_layers: Vec::with_capacity(n_classes),
        neg_layers: Vec::with_capacity(n_classes),
        w_pos: Vec::with_capacity(n_classes),
        w_neg: Vec::with_capacity(n_classes),
    };
    for (p, n) in rows {
        cfg.pos_layers.push(p.layers);
        cfg.w_pos.push(p.weights);
        cfg.neg_layers.push(n.layers);
        cfg.w_neg.push(n.weights);
    }
    Ok(cfg)
}
