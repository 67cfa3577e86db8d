//! Stage runners for the on-disk workflow.
//!
//! Training stages write into a run directory:
//!
//! ```text
//! run/
//!   bundle/            fit-kde
//!   infer_<split>.json infer-layers
//!   alarm.json         select-alarm
//!   advice.json        select-advice
//!   verdicts.jsonl     check
//!   report.json        evaluate
//!   provenance.json    input hashes of every stage run so far
//! ```
//!
//! Every stage is deterministic: rerunning it on unchanged inputs rewrites
//! byte-identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::advice::{select_advice_layers, AdviceConfig};
use crate::alarm::{select_alarm_layers, AlarmConfig};
use crate::checker::{Checker, VerdictLine};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvaluationReport, DEFAULT_RANDOM_DRAWS};
use crate::feature_store::{
    load_feature_dump, read_f32_file, sha256_file, write_u32_file, FeatureTensorSet, Split, MANIFEST_FILE,
};
use crate::kde::{fit_kde, InferenceTable, KdeBundle, DEFAULT_T_VAR};
use crate::metrics::format_percent;
use crate::regression::{
    binarize, fit_gamma, fit_gamma_shifted, Direction, GammaParams, ANOMALOUS, DEFAULT_EPSILON, NORMAL,
};
use crate::search::SearchOptions;
use crate::synth::{synth_bench, SynthConfig};

pub const BUNDLE_DIR: &str = "bundle";
pub const ALARM_FILE: &str = "alarm.json";
pub const ADVICE_FILE: &str = "advice.json";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub t_var: f64,
    pub search: SearchOptions,
    pub epsilon: f64,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            test: None,
            t_var: DEFAULT_T_VAR,
            search: SearchOptions::default(),
            epsilon: DEFAULT_EPSILON,
            out: PathBuf::from("run"),
            seed: 0,
        }
    }
}

pub fn infer_file(split: Split) -> String {
    format!("infer_{split}.json")
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StageRecord {
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn record_stage(run: &Path, stage: &str, inputs: &[(&str, PathBuf)], outputs: &[&str]) -> Result<()> {
    let path = run.join(PROVENANCE_FILE);
    let mut all: BTreeMap<String, StageRecord> = if path.is_file() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?
    } else {
        BTreeMap::new()
    };
    let mut record = StageRecord::default();
    for (name, file) in inputs {
        record.inputs.insert(name.to_string(), sha256_file(file)?);
    }
    record.outputs = outputs.iter().map(|s| s.to_string()).collect();
    all.insert(stage.to_string(), record);
    let mut text = serde_json::to_string_pretty(&all).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn load_split(dir: &Path, want: Option<Split>) -> Result<FeatureTensorSet> {
    let set = load_feature_dump(dir)?;
    if let Some(want) = want {
        if set.split() != want {
            return Err(Error::Invalid(format!(
                "{} holds the {} split, expected {want}",
                dir.display(),
                set.split()
            )));
        }
    }
    Ok(set)
}

pub fn load_bundle(run: &Path) -> Result<KdeBundle> {
    KdeBundle::load(&run.join(BUNDLE_DIR))
}

pub fn fit_kde_stage(train_dir: &Path, run: &Path, t_var: f64) -> Result<Value> {
    let train = load_split(train_dir, Some(Split::Train))?;
    let bundle = fit_kde(&train, t_var)?;
    ensure_dir(run)?;
    bundle.save(&run.join(BUNDLE_DIR))?;
    record_stage(
        run,
        "fit-kde",
        &[("train", train_dir.join(MANIFEST_FILE))],
        &[BUNDLE_DIR],
    )?;
    Ok(json!({
        "stage": "fit-kde",
        "layers": bundle.n_layers(),
        "classes": bundle.n_classes(),
        "t_var": t_var,
        "out": run.join(BUNDLE_DIR),
    }))
}

/// Infers per-layer classes for a dump and stores `infer_<split>.json`.
pub fn infer_layers_stage(run: &Path, data_dir: &Path) -> Result<Value> {
    let bundle = load_bundle(run)?;
    let set = load_split(data_dir, None)?;
    let table = bundle.infer_layers(&set)?;
    let file = infer_file(set.split());
    table.save_json(&run.join(&file))?;
    record_stage(
        run,
        &format!("infer-layers:{}", set.split()),
        &[
            ("bundle", run.join(BUNDLE_DIR).join("bundle.json")),
            ("data", data_dir.join(MANIFEST_FILE)),
        ],
        &[&file],
    )?;
    Ok(json!({"stage": "infer-layers", "split": set.split(), "n": set.n_instances(), "out": run.join(file)}))
}

fn load_valid_inference(run: &Path, valid: &FeatureTensorSet) -> Result<InferenceTable> {
    let table = InferenceTable::load_json(&run.join(infer_file(Split::Valid)))?;
    if table.n_instances() != valid.n_instances() {
        return Err(Error::Invalid(format!(
            "validation inference has {} rows but the dump has {}; rerun infer-layers",
            table.n_instances(),
            valid.n_instances()
        )));
    }
    Ok(table)
}

pub fn select_alarm_stage(run: &Path, valid_dir: &Path, opts: &SearchOptions) -> Result<Value> {
    let valid = load_split(valid_dir, Some(Split::Valid))?;
    let table = load_valid_inference(run, &valid)?;
    let cfg = select_alarm_layers(
        &table,
        valid.require_labels()?,
        valid.predictions(),
        valid.n_classes(),
        opts,
    )?;
    cfg.save(&run.join(ALARM_FILE))?;
    record_stage(
        run,
        "select-alarm",
        &[
            ("valid", valid_dir.join(MANIFEST_FILE)),
            ("inference", run.join(infer_file(Split::Valid))),
        ],
        &[ALARM_FILE],
    )?;
    Ok(json!({
        "stage": "select-alarm",
        "selected_layers": cfg.classes.iter().map(|c| c.selected_layers.clone()).collect::<Vec<_>>(),
        "f1": cfg.classes.iter().map(|c| c.achieved_f1).collect::<Vec<_>>(),
    }))
}

pub fn select_advice_stage(run: &Path, valid_dir: &Path, opts: &SearchOptions) -> Result<Value> {
    let valid = load_split(valid_dir, Some(Split::Valid))?;
    let table = load_valid_inference(run, &valid)?;
    let alarm = AlarmConfig::load(&run.join(ALARM_FILE))?;
    let cfg = select_advice_layers(
        &table,
        valid.require_labels()?,
        valid.predictions(),
        &alarm,
        valid.n_classes(),
        opts,
    )?;
    cfg.save(&run.join(ADVICE_FILE))?;
    record_stage(
        run,
        "select-advice",
        &[
            ("valid", valid_dir.join(MANIFEST_FILE)),
            ("inference", run.join(infer_file(Split::Valid))),
            ("alarm", run.join(ALARM_FILE)),
        ],
        &[ADVICE_FILE],
    )?;
    Ok(json!({"stage": "select-advice", "w_pos": cfg.w_pos, "w_neg": cfg.w_neg}))
}

/// Builds a checker from the run's artifacts; fails when any is missing.
pub fn load_checker(run: &Path) -> Result<Checker> {
    let alarm = AlarmConfig::load(&require(run.join(ALARM_FILE))?)?;
    let advice = AdviceConfig::load(&require(run.join(ADVICE_FILE))?)?;
    Checker::new(load_bundle(run)?, alarm, advice)
}

pub fn check_stage(run: &Path, test_dir: &Path) -> Result<Value> {
    let checker = load_checker(run)?;
    let test = load_split(test_dir, None)?;
    let report = checker.check_batch(&test)?;
    let path = run.join(VERDICTS_FILE);
    fs::write(&path, report.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    record_stage(
        run,
        "check",
        &[
            ("bundle", run.join(BUNDLE_DIR).join("bundle.json")),
            ("alarm", run.join(ALARM_FILE)),
            ("advice", run.join(ADVICE_FILE)),
            ("test", test_dir.join(MANIFEST_FILE)),
        ],
        &[VERDICTS_FILE],
    )?;
    let ms = |d: Option<std::time::Duration>| d.map(|d| d.as_secs_f64() * 1e3);
    Ok(json!({
        "stage": "check",
        "n": report.verdicts.len(),
        "alarms": report.verdicts.iter().filter(|v| v.alarm).count(),
        "latency_ms_p50": ms(report.median_latency()),
        "latency_ms_p95": ms(report.latency_percentile(0.95)),
        "out": path,
    }))
}

pub fn read_verdict_lines(path: &Path) -> Result<Vec<VerdictLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub fn evaluate_stage(run: &Path, test_dir: &Path, seed: u64, csv: Option<(&Path, &str)>) -> Result<Value> {
    let verdicts_path = require(run.join(VERDICTS_FILE))?;
    let checker = load_checker(run)?;
    let test = load_split(test_dir, None)?;
    let labels = test.require_labels()?;
    let cached = run.join(infer_file(test.split()));
    let table = match InferenceTable::load_json(&cached) {
        Ok(t) if t.n_instances() == test.n_instances() => t,
        _ => checker.bundle().infer_layers(&test)?,
    };
    let verdicts = (0..test.n_instances())
        .map(|i| checker.check_inferred(table.row(i), test.predictions()[i]))
        .collect::<Result<Vec<_>>>()?;
    let lines = read_verdict_lines(&verdicts_path)?;
    let stale = lines.len() != verdicts.len()
        || lines
            .iter()
            .zip(&verdicts)
            .enumerate()
            .any(|(i, (line, v))| line.idx != i || line.alarm != v.alarm || line.advice != v.advice);
    if stale {
        return Err(Error::Invalid(format!(
            "{} does not match the current artifacts; rerun check",
            verdicts_path.display()
        )));
    }
    let report = evaluate(
        &table,
        &verdicts,
        labels,
        test.predictions(),
        checker.alarm_config(),
        seed,
        DEFAULT_RANDOM_DRAWS,
    )?;
    write_report(&run.join(REPORT_FILE), &report)?;
    if let Some((csv_path, tag)) = csv {
        write_csv_row(csv_path, tag, &report)?;
    }
    record_stage(
        run,
        "evaluate",
        &[("verdicts", verdicts_path), ("test", test_dir.join(MANIFEST_FILE))],
        &[REPORT_FILE],
    )?;
    Ok(json!({
        "stage": "evaluate",
        "tpr": report.tpr,
        "fpr": report.fpr,
        "f1": report.f1,
        "f1_full_layers": report.full_layers.rates.f1,
        "f1_random_layers": report.random_layers.f1_mean,
        "advice_accuracy": report.advice_accuracy,
        "model_accuracy": report.model_accuracy,
    }))
}

fn write_report(path: &Path, report: &EvaluationReport) -> Result<()> {
    write_json(path, report)
}

fn write_csv_row(path: &Path, tag: &str, r: &EvaluationReport) -> Result<()> {
    let c = r.counts;
    let text = format!(
        "tag,tp,fp,tn,fn,tpr,fpr,f1,advice_accuracy\n{tag},{},{},{},{},{},{},{},{}\n",
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        format_percent(r.tpr),
        format_percent(r.fpr),
        format_percent(r.f1),
        format_percent(r.advice_accuracy)
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fits a Gamma to a raw little-endian `f32` vector and writes the
/// parameters as JSON. `shifted` allows non-positive samples.
pub fn gamma_fit_stage(input: &Path, out: &Path, epsilon: f64, shifted: bool) -> Result<Value> {
    let values: Vec<f64> = read_f32_file(input)?.into_iter().map(f64::from).collect();
    let params = if shifted {
        fit_gamma_shifted(&values)?
    } else {
        fit_gamma(&values)?
    }
    .with_epsilon(epsilon)?;
    write_json(out, &params)?;
    Ok(json!({
        "stage": "gamma-fit",
        "n": values.len(),
        "shape": params.shape,
        "scale": params.scale,
        "loc": params.loc,
        "upper_threshold": params.upper_threshold(),
        "lower_threshold": params.lower_threshold(),
        "out": out,
    }))
}

pub fn load_gamma_params(path: &Path) -> Result<GammaParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: GammaParams = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    GammaParams::new(p.shape, p.scale, p.loc, p.epsilon)
}

/// Binarizes a raw `f32` vector against stored Gamma parameters and writes
/// `u32` labels (`1` anomalous, `0` normal).
pub fn binarize_stage(input: &Path, params: &Path, direction: Direction, out: &Path) -> Result<Value> {
    let values: Vec<f64> = read_f32_file(input)?.into_iter().map(f64::from).collect();
    let params = load_gamma_params(params)?;
    let flags = binarize(&values, &params, direction);
    let labels: Vec<u32> = flags.iter().map(|&a| if a { ANOMALOUS } else { NORMAL }).collect();
    write_u32_file(out, &labels)?;
    Ok(json!({
        "stage": "binarize",
        "n": labels.len(),
        "anomalous": flags.iter().filter(|&&a| a).count(),
        "out": out,
    }))
}

pub fn synth_bench_stage(cfg: &SynthConfig, out: &Path) -> Result<Value> {
    let dumps = synth_bench(cfg)?;
    dumps.save(out)?;
    write_json(&out.join("synth_config.json"), cfg)?;
    Ok(json!({
        "stage": "synth-bench",
        "seed": cfg.seed,
        "n_per_split": dumps.test.n_instances(),
        "noise_layers": dumps.noise_layers,
        "out": out,
    }))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
