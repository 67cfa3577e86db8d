//! Runtime self-checking for deployed neural classifiers.
//!
//! Per-layer, per-class kernel density estimates over hidden activations let
//! each layer "vote" for a class. A per-class subset of layers decides whether
//! the model's prediction looks wrong (the alarm), and two more subsets,
//! weighted by how reliable they were on validation data, suggest a
//! replacement class (the advice).
//!
//! The typical flow is [`fit_kde`] on a training dump,
//! [`KdeBundle::infer_layers`] on a validation dump, then
//! [`select_alarm_layers`] and [`select_advice_layers`], and finally a
//! [`Checker`] over deployment activations.

// Negated float comparisons are how NaN inputs get rejected alongside
// out-of-range ones.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advice;
pub mod alarm;
pub mod checker;
pub mod error;
pub mod evaluation;
pub mod feature_store;
pub mod kde;
pub mod metrics;
pub mod pipeline;
pub mod regression;
pub mod search;
pub mod synth;

pub use advice::{select_advice_layers, AdviceConfig};
pub use alarm::{majority_vote, select_alarm_layers, AlarmConfig, ClassAlarm, VoteResult};
pub use checker::{BatchReport, Checker, Verdict, VerdictLine};
pub use error::{Error, Result};
pub use evaluation::{evaluate, EvaluationReport};
pub use feature_store::{load_feature_dump, save_feature_dump, FeatureTensorSet, LayerKind, LayerMatrix, Split};
pub use kde::{fit_kde, InferenceTable, KdeBundle, KdeCell, LayerInference, DEFAULT_T_VAR};
pub use metrics::{confusion, rates, spearman, ConfusionCounts, RateReport, Spearman};
pub use regression::{fit_gamma, Direction, GammaParams, LayerGammas};
pub use search::{SearchOptions, SearchStrategy};
pub use synth::{synth_bench, SynthConfig, SynthDumps};
