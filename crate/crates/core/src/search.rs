//! Layer-subset search shared by alarm and advice selection.
//!
//! Subsets are `u64` bitmasks over layer indices. Candidates are ranked by
//! score (higher first), then cardinality (smaller first), then by their
//! sorted index lists (lexicographically smaller first). That ranking is a
//! total order, so parallel max-reductions are deterministic.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_EXHAUSTIVE_LAYERS: usize = 20;
pub const MAX_LAYERS: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    #[default]
    Exhaustive,
    Greedy,
}

impl std::str::FromStr for SearchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(SearchStrategy::Exhaustive),
            "greedy" => Ok(SearchStrategy::Greedy),
            other => Err(Error::Invalid(format!("unknown search strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchOptions {
    pub strategy: SearchStrategy,
    /// Largest subset considered; `None` means all layers.
    pub max_subset_size: Option<usize>,
    /// Exhaustive search stops after the cardinality level during which the
    /// budget runs out and keeps the best subset found so far.
    pub time_budget: Option<Duration>,
}

/// Exact `num / den` with `0 / 0` treated as zero.
#[derive(Clone, Copy, Debug)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }

    fn normalized(self) -> (u128, u128) {
        if self.den == 0 {
            (0, 1)
        } else {
            (self.num as u128, self.den as u128)
        }
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ratio {}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = self.normalized();
        let (c, d) = other.normalized();
        (a * d).cmp(&(c * b))
    }
}

pub fn mask_to_layers(mask: u64) -> Vec<usize> {
    (0..64).filter(|&l| mask >> l & 1 == 1).collect()
}

pub fn layers_to_mask(layers: &[usize]) -> u64 {
    layers.iter().fold(0, |m, &l| m | 1 << l)
}

/// `Greater` when `a` ranks above `b` under the subset tie-break rules
/// (score alone is not considered).
fn cmp_masks(a: u64, b: u64) -> Ordering {
    if a == b {
        return Ordering::Equal;
    }
    match b.count_ones().cmp(&a.count_ones()) {
        Ordering::Equal => {
            let lowest = (a ^ b) & (a ^ b).wrapping_neg();
            if a & lowest != 0 {
                Ordering::Greater
            } else {
                Ordering::Less
            }
        }
        other => other,
    }
}

/// Ranking of `(score, mask)` candidates; `Greater` is better.
pub fn cmp_candidates<S: Ord>(a: &(S, u64), b: &(S, u64)) -> Ordering {
    a.0.cmp(&b.0).then_with(|| cmp_masks(a.1, b.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome<S> {
    pub mask: u64,
    pub score: S,
    pub evaluated: u64,
    pub truncated: bool,
}

/// Every mask over `n` bits with exactly `k` bits set, ascending.
fn masks_of_size(n: usize, k: usize) -> Vec<u64> {
    if k == 0 || k > n {
        return Vec::new();
    }
    let limit = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut out = Vec::new();
    let mut m: u64 = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
    loop {
        out.push(m);
        // Gosper's hack.
        let c = m & m.wrapping_neg();
        let r = m.wrapping_add(c);
        if r == 0 || r > limit {
            break;
        }
        let next = (((r ^ m) >> 2) / c) | r;
        if next > limit {
            break;
        }
        m = next;
    }
    out
}

/// Finds the best subset of `n_layers` layers under `score`.
pub fn search_subsets<S, F>(n_layers: usize, opts: &SearchOptions, score: F) -> Result<SearchOutcome<S>>
where
    S: Ord + Copy + Send + Sync,
    F: Fn(u64) -> S + Sync,
{
    if n_layers == 0 {
        return Err(Error::EmptyLayerSet);
    }
    if n_layers > MAX_LAYERS {
        return Err(Error::Invalid(format!(
            "{n_layers} layers exceed the supported {MAX_LAYERS}"
        )));
    }
    let max_k = opts.max_subset_size.unwrap_or(n_layers).clamp(1, n_layers);
    let strategy = match opts.strategy {
        SearchStrategy::Exhaustive if n_layers > MAX_EXHAUSTIVE_LAYERS => {
            warn!("{n_layers} layers is beyond exhaustive range ({MAX_EXHAUSTIVE_LAYERS}); using greedy search");
            SearchStrategy::Greedy
        }
        s => s,
    };
    match strategy {
        SearchStrategy::Exhaustive => Ok(exhaustive(n_layers, max_k, opts.time_budget, &score)),
        SearchStrategy::Greedy => Ok(greedy(n_layers, max_k, &score)),
    }
}

fn exhaustive<S, F>(n: usize, max_k: usize, budget: Option<Duration>, score: &F) -> SearchOutcome<S>
where
    S: Ord + Copy + Send + Sync,
    F: Fn(u64) -> S + Sync,
{
    let start = Instant::now();
    let mut best: Option<(S, u64)> = None;
    let mut evaluated = 0u64;
    let mut truncated = false;
    for k in 1..=max_k {
        let masks = masks_of_size(n, k);
        evaluated += masks.len() as u64;
        let level_best = masks
            .into_par_iter()
            .map(|m| (score(m), m))
            .max_by(cmp_candidates)
            .expect("non-empty level");
        best = Some(match best {
            Some(b) if cmp_candidates(&b, &level_best) != Ordering::Less => b,
            _ => level_best,
        });
        if let Some(budget) = budget {
            if k < max_k && start.elapsed() > budget {
                warn!("subset search hit its time budget after cardinality {k}; keeping best so far");
                truncated = true;
                break;
            }
        }
    }
    let (score, mask) = best.expect("at least one level searched");
    SearchOutcome {
        mask,
        score,
        evaluated,
        truncated,
    }
}

fn greedy<S, F>(n: usize, max_k: usize, score: &F) -> SearchOutcome<S>
where
    S: Ord + Copy + Send + Sync,
    F: Fn(u64) -> S + Sync,
{
    let mut current: Option<(S, u64)> = None;
    let mut evaluated = 0u64;
    loop {
        let base = current.map_or(0, |c| c.1);
        if base.count_ones() as usize >= max_k {
            break;
        }
        let candidates: Vec<u64> = (0..n).filter(|&l| base >> l & 1 == 0).map(|l| base | 1 << l).collect();
        evaluated += candidates.len() as u64;
        let step = candidates
            .into_par_iter()
            .map(|m| (score(m), m))
            .max_by(cmp_candidates)
            .expect("a layer left to add");
        match current {
            Some(c) if step.0 <= c.0 => break,
            _ => current = Some(step),
        }
    }
    let (score, mask) = current.expect("first greedy step always taken");
    SearchOutcome {
        mask,
        score,
        evaluated,
        truncated: false,
    }
}
