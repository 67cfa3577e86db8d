//! Deployment-time checking: alarm vote, weighted advice and boosting.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advice::AdviceConfig;
use crate::alarm::AlarmConfig;
use crate::error::{Error, Result};
use crate::feature_store::FeatureTensorSet;
use crate::kde::KdeBundle;

/// Outcome of checking one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub y_hat: u32,
    pub alarm: bool,
    pub advice: Option<u32>,
    /// Fraction of alarm layers agreeing with `y_hat`.
    pub delta: f64,
    /// Alarm vote before boosting.
    pub raw_alarm: bool,
    pub per_layer_inferred: Vec<u32>,
    pub class_scores: Vec<f64>,
}

/// One line of `verdicts.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub idx: usize,
    pub y_hat: u32,
    pub alarm: bool,
    pub advice: Option<u32>,
    pub delta: f64,
}

impl Verdict {
    pub fn line(&self, idx: usize) -> VerdictLine {
        VerdictLine {
            idx,
            y_hat: self.y_hat,
            alarm: self.alarm,
            advice: self.advice,
            delta: self.delta,
        }
    }
}

/// Highest score, then highest raw vote count, then lowest class id.
fn pick_class(scores: &[f64], votes: &[usize]) -> usize {
    let mut best = 0;
    for c in 1..scores.len() {
        if scores[c] > scores[best] || (scores[c] == scores[best] && votes[c] > votes[best]) {
            best = c;
        }
    }
    best
}

/// Alarm and advice selection bound to a fitted density bundle.
#[derive(Clone, Debug)]
pub struct Checker {
    bundle: KdeBundle,
    alarm: AlarmConfig,
    advice: AdviceConfig,
}

impl Checker {
    pub fn new(bundle: KdeBundle, alarm: AlarmConfig, advice: AdviceConfig) -> Result<Self> {
        let c = bundle.n_classes();
        if alarm.n_classes() != c || advice.n_classes() != c {
            return Err(Error::Invalid(format!(
                "class counts disagree: bundle {c}, alarm {}, advice {}",
                alarm.n_classes(),
                advice.n_classes()
            )));
        }
        let n_layers = bundle.n_layers();
        let in_range = |s: &[usize]| !s.is_empty() && s.iter().all(|&l| l < n_layers);
        let ok = alarm.classes.iter().all(|a| in_range(&a.selected_layers))
            && advice
                .pos_layers
                .iter()
                .chain(&advice.neg_layers)
                .all(|row| row.len() == c && row.iter().all(|s| in_range(s)));
        if !ok {
            return Err(Error::Invalid("layer set out of range for the bundle".into()));
        }
        Ok(Self { bundle, alarm, advice })
    }

    pub fn bundle(&self) -> &KdeBundle {
        &self.bundle
    }

    pub fn alarm_config(&self) -> &AlarmConfig {
        &self.alarm
    }

    pub fn advice_config(&self) -> &AdviceConfig {
        &self.advice
    }

    /// Checks one instance from its per-layer feature vectors.
    pub fn check<T: Copy + Into<f64>>(&self, features: &[&[T]], y_hat: u32) -> Result<Verdict> {
        self.check_class_id(y_hat)?;
        let inferred: Vec<u32> = self
            .bundle
            .infer_instance(features)?
            .into_iter()
            .map(|li| li.inferred_class)
            .collect();
        self.check_inferred(&inferred, y_hat)
    }

    fn check_class_id(&self, y_hat: u32) -> Result<()> {
        let n_classes = self.bundle.n_classes();
        if y_hat as usize >= n_classes {
            return Err(Error::ClassOutOfRange {
                what: "prediction",
                id: y_hat,
                n_classes,
            });
        }
        Ok(())
    }

    /// Checks one instance whose per-layer inferred classes are known.
    pub fn check_inferred(&self, inferred: &[u32], y_hat: u32) -> Result<Verdict> {
        self.check_class_id(y_hat)?;
        if inferred.len() != self.bundle.n_layers() {
            return Err(Error::LengthMismatch {
                what: "inferred classes",
                expected: self.bundle.n_layers(),
                found: inferred.len(),
            });
        }
        let n_classes = self.bundle.n_classes();
        let vote = self.alarm.vote(inferred, y_hat)?;
        let (layer_sets, weights) = if vote.alarm_raw {
            (
                &self.advice.pos_layers[y_hat as usize],
                &self.advice.w_pos[y_hat as usize],
            )
        } else {
            (
                &self.advice.neg_layers[y_hat as usize],
                &self.advice.w_neg[y_hat as usize],
            )
        };

        let mut votes = vec![0usize; n_classes];
        let mut scores = vec![0.0; n_classes];
        for c in 0..n_classes {
            let layers = &layer_sets[c];
            votes[c] = layers.iter().filter(|&&l| inferred[l] == c as u32).count();
            scores[c] = votes[c] as f64 * weights[c] / layers.len() as f64;
        }

        let all_zero = scores.iter().all(|&s| s == 0.0);
        let advice = match (vote.alarm_raw, all_zero) {
            (true, true) => Some(self.fallback_advice(inferred, y_hat)),
            // Nothing to contradict the agreeing vote with.
            (false, true) => None,
            (_, false) => Some(pick_class(&scores, &votes) as u32).filter(|&a| a != y_hat),
        };
        Ok(Verdict {
            y_hat,
            alarm: advice.is_some(),
            advice,
            delta: vote.delta,
            raw_alarm: vote.alarm_raw,
            per_layer_inferred: inferred.to_vec(),
            class_scores: scores,
        })
    }

    /// Most frequent inferred class other than `y_hat` among the alarm layers.
    fn fallback_advice(&self, inferred: &[u32], y_hat: u32) -> u32 {
        let mut counts = vec![0usize; self.bundle.n_classes()];
        for &l in self.alarm.layers_for(y_hat) {
            counts[inferred[l] as usize] += 1;
        }
        counts[y_hat as usize] = 0;
        let mut best = if y_hat == 0 { 1 } else { 0 };
        for c in 0..counts.len() {
            if c != y_hat as usize && counts[c] > counts[best] {
                best = c;
            }
        }
        best as u32
    }

    /// Checks every instance of `set`, timing each one.
    pub fn check_batch(&self, set: &FeatureTensorSet) -> Result<BatchReport> {
        let names: Vec<&str> = self.bundle.layer_names().iter().map(String::as_str).collect();
        if set.layer_names() != names {
            return Err(Error::LayerMismatch(format!("{:?} vs {:?}", set.layer_names(), names)));
        }
        let results = (0..set.n_instances())
            .into_par_iter()
            .map(|i| {
                let start = Instant::now();
                let v = self.check(&set.instance(i), set.predictions()[i])?;
                Ok((v, start.elapsed()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (verdicts, latencies) = results.into_iter().unzip();
        Ok(BatchReport { verdicts, latencies })
    }
}

#[derive(Clone, Debug)]
pub struct BatchReport {
    pub verdicts: Vec<Verdict>,
    pub latencies: Vec<Duration>,
}

impl BatchReport {
    /// Latency percentile `q` in `[0, 1]` (nearest rank); `None` when empty.
    pub fn latency_percentile(&self, q: f64) -> Option<Duration> {
        if self.latencies.is_empty() {
            return None;
        }
        let mut sorted = self.latencies.clone();
        sorted.sort();
        let rank = ((q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize).max(1);
        Some(sorted[rank - 1])
    }

    pub fn median_latency(&self) -> Option<Duration> {
        self.latency_percentile(0.5)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.verdicts.iter().enumerate() {
            out.push_str(&serde_json::to_string(&v.line(i)).expect("verdict serializes"));
            out.push('\n');
        }
        out
    }
}
