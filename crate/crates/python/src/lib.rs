//! Python bindings for `selfcheck-core`.
//!
//! Feature vectors cross the boundary as plain lists of floats; dumps on disk
//! are the fast path for large data.

use std::path::PathBuf;
use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use selfcheck_core as core;
use selfcheck_core::feature_store::mean_pool as core_mean_pool;
use selfcheck_core::regression::{self, Direction};
use selfcheck_core::{SearchOptions, SearchStrategy};

create_exception!(selfcheck, SelfCheckError, PyException);

fn to_py(e: core::Error) -> PyErr {
    SelfCheckError::new_err(e.to_string())
}

fn search_options(
    search: &str,
    max_subset_size: Option<usize>,
    time_budget_sec: Option<f64>,
) -> PyResult<SearchOptions> {
    let strategy: SearchStrategy = search.parse().map_err(to_py)?;
    let time_budget = match time_budget_sec {
        Some(s) if !(s > 0.0 && s.is_finite()) => {
            return Err(SelfCheckError::new_err("time_budget_sec must be positive"));
        }
        Some(s) => Some(Duration::from_secs_f64(s)),
        None => None,
    };
    Ok(SearchOptions {
        strategy,
        max_subset_size,
        time_budget,
    })
}

/// Per-layer activations, labels and predictions for one split.
#[pyclass(name = "FeatureSet", module = "selfcheck", frozen)]
struct PyFeatureSet {
    inner: core::FeatureTensorSet,
}

#[pymethods]
impl PyFeatureSet {
    /// `layers` is a list of `(name, rows)` pairs, each row one instance.
    #[new]
    #[pyo3(signature = (split, layers, predictions, n_classes, labels=None))]
    fn new(
        split: &str,
        layers: Vec<(String, Vec<Vec<f32>>)>,
        predictions: Vec<u32>,
        n_classes: usize,
        labels: Option<Vec<u32>>,
    ) -> PyResult<Self> {
        let split: core::Split = split.parse().map_err(to_py)?;
        let layers = layers
            .into_iter()
            .map(|(name, rows)| {
                let dim = rows.first().map_or(1, Vec::len);
                if rows.iter().any(|r| r.len() != dim) {
                    return Err(SelfCheckError::new_err(format!("layer {name} has ragged rows")));
                }
                let data = rows.into_iter().flatten().collect();
                core::LayerMatrix::new(name, core::LayerKind::Dense, dim, data).map_err(to_py)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let inner = core::FeatureTensorSet::new(split, layers, labels, predictions, n_classes).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::load_feature_dump(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::save_feature_dump(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split().to_string()
    }

    #[getter]
    fn n_instances(&self) -> usize {
        self.inner.n_instances()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.layer_names().into_iter().map(str::to_owned).collect()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(<[u32]>::to_vec)
    }

    #[getter]
    fn predictions(&self) -> Vec<u32> {
        self.inner.predictions().to_vec()
    }

    /// Feature vectors of instance `i`, one per layer.
    fn instance(&self, i: usize) -> PyResult<Vec<Vec<f32>>> {
        if i >= self.inner.n_instances() {
            return Err(SelfCheckError::new_err(format!("instance {i} out of range")));
        }
        Ok(self.inner.instance(i).into_iter().map(<[f32]>::to_vec).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.n_instances()
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureSet(split={}, n={}, layers={}, classes={})",
            self.inner.split(),
            self.inner.n_instances(),
            self.inner.n_layers(),
            self.inner.n_classes()
        )
    }
}

/// Inferred class (and optionally log densities) per instance and layer.
#[pyclass(name = "InferenceTable", module = "selfcheck", frozen)]
struct PyInferenceTable {
    inner: core::InferenceTable,
}

#[pymethods]
impl PyInferenceTable {
    /// Builds a table from inferred classes only, one row per instance.
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<u32>>, n_classes: usize) -> PyResult<Self> {
        let n_layers = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_layers) {
            return Err(SelfCheckError::new_err("rows must all have the same length"));
        }
        let classes = rows.into_iter().flatten().collect();
        Ok(Self {
            inner: core::InferenceTable::from_classes(n_layers, n_classes, classes).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::InferenceTable::load_json(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_json(&path).map_err(to_py)
    }

    #[getter]
    fn n_instances(&self) -> usize {
        self.inner.n_instances()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn row(&self, i: usize) -> PyResult<Vec<u32>> {
        if i >= self.inner.n_instances() {
            return Err(SelfCheckError::new_err(format!("instance {i} out of range")));
        }
        Ok(self.inner.row(i).to_vec())
    }

    fn log_density(&self, i: usize, layer: usize, class: usize) -> Option<f64> {
        if i >= self.inner.n_instances() || layer >= self.inner.n_layers() || class >= self.inner.n_classes() {
            return None;
        }
        self.inner.log_density(i, layer, class)
    }

    fn __len__(&self) -> usize {
        self.inner.n_instances()
    }
}

/// Per-layer, per-class kernel density estimates.
#[pyclass(name = "KdeBundle", module = "selfcheck", frozen)]
struct PyKdeBundle {
    inner: core::KdeBundle,
}

#[pymethods]
impl PyKdeBundle {
    #[staticmethod]
    #[pyo3(signature = (train, t_var=core::DEFAULT_T_VAR))]
    fn fit(py: Python<'_>, train: &PyFeatureSet, t_var: f64) -> PyResult<Self> {
        let inner = py.detach(|| core::fit_kde(&train.inner, t_var)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::KdeBundle::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.layer_names().to_vec()
    }

    fn log_density(&self, layer: usize, class: usize, features: Vec<f64>) -> PyResult<f64> {
        if layer >= self.inner.n_layers() || class >= self.inner.n_classes() {
            return Err(SelfCheckError::new_err("layer or class out of range"));
        }
        self.inner.log_density(layer, class, &features).map_err(to_py)
    }

    /// Inferred class per layer for one instance.
    fn infer(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<u32>> {
        let views: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
        let rows = self.inner.infer_instance(&views).map_err(to_py)?;
        Ok(rows.into_iter().map(|r| r.inferred_class).collect())
    }

    fn infer_layers(&self, py: Python<'_>, data: &PyFeatureSet) -> PyResult<PyInferenceTable> {
        let inner = py.detach(|| self.inner.infer_layers(&data.inner)).map_err(to_py)?;
        Ok(PyInferenceTable { inner })
    }
}

/// Selected alarm layers per predicted class.
#[pyclass(name = "AlarmConfig", module = "selfcheck", frozen)]
struct PyAlarmConfig {
    inner: core::AlarmConfig,
}

#[pymethods]
impl PyAlarmConfig {
    #[staticmethod]
    #[pyo3(signature = (table, labels, predictions, n_classes, search="exhaustive", max_subset_size=None, time_budget_sec=None))]
    #[allow(clippy::too_many_arguments)]
    fn select(
        py: Python<'_>,
        table: &PyInferenceTable,
        labels: Vec<u32>,
        predictions: Vec<u32>,
        n_classes: usize,
        search: &str,
        max_subset_size: Option<usize>,
        time_budget_sec: Option<f64>,
    ) -> PyResult<Self> {
        let opts = search_options(search, max_subset_size, time_budget_sec)?;
        let inner = py
            .detach(|| core::select_alarm_layers(&table.inner, &labels, &predictions, n_classes, &opts))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::AlarmConfig::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn selected_layers(&self) -> Vec<Vec<usize>> {
        self.inner.classes.iter().map(|c| c.selected_layers.clone()).collect()
    }

    #[getter]
    fn achieved_f1(&self) -> Vec<f64> {
        self.inner.classes.iter().map(|c| c.achieved_f1).collect()
    }
}

/// Advice layer sets and weights for both alarm-vote branches.
#[pyclass(name = "AdviceConfig", module = "selfcheck", frozen)]
struct PyAdviceConfig {
    inner: core::AdviceConfig,
}

#[pymethods]
impl PyAdviceConfig {
    #[staticmethod]
    #[pyo3(signature = (table, labels, predictions, alarm, n_classes, search="exhaustive", max_subset_size=None, time_budget_sec=None))]
    #[allow(clippy::too_many_arguments)]
    fn select(
        py: Python<'_>,
        table: &PyInferenceTable,
        labels: Vec<u32>,
        predictions: Vec<u32>,
        alarm: &PyAlarmConfig,
        n_classes: usize,
        search: &str,
        max_subset_size: Option<usize>,
        time_budget_sec: Option<f64>,
    ) -> PyResult<Self> {
        let opts = search_options(search, max_subset_size, time_budget_sec)?;
        let inner = py
            .detach(|| core::select_advice_layers(&table.inner, &labels, &predictions, &alarm.inner, n_classes, &opts))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::AdviceConfig::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn pos_layers(&self) -> Vec<Vec<Vec<usize>>> {
        self.inner.pos_layers.clone()
    }

    #[getter]
    fn neg_layers(&self) -> Vec<Vec<Vec<usize>>> {
        self.inner.neg_layers.clone()
    }

    #[getter]
    fn w_pos(&self) -> Vec<Vec<f64>> {
        self.inner.w_pos.clone()
    }

    #[getter]
    fn w_neg(&self) -> Vec<Vec<f64>> {
        self.inner.w_neg.clone()
    }
}

/// Outcome of checking one instance.
#[pyclass(name = "Verdict", module = "selfcheck", frozen, get_all)]
struct PyVerdict {
    y_hat: u32,
    alarm: bool,
    advice: Option<u32>,
    delta: f64,
    raw_alarm: bool,
    per_layer_inferred: Vec<u32>,
    class_scores: Vec<f64>,
}

impl From<core::Verdict> for PyVerdict {
    fn from(v: core::Verdict) -> Self {
        Self {
            y_hat: v.y_hat,
            alarm: v.alarm,
            advice: v.advice,
            delta: v.delta,
            raw_alarm: v.raw_alarm,
            per_layer_inferred: v.per_layer_inferred,
            class_scores: v.class_scores,
        }
    }
}

#[pymethods]
impl PyVerdict {
    fn __repr__(&self) -> String {
        let advice = self.advice.map_or("None".to_owned(), |a| a.to_string());
        format!(
            "Verdict(y_hat={}, alarm={}, advice={advice}, delta={})",
            self.y_hat,
            if self.alarm { "True" } else { "False" },
            self.delta
        )
    }
}

/// Deployment-time checker combining densities, alarm and advice configs.
#[pyclass(name = "Checker", module = "selfcheck", frozen)]
struct PyChecker {
    inner: core::Checker,
}

#[pymethods]
impl PyChecker {
    #[new]
    fn new(bundle: &PyKdeBundle, alarm: &PyAlarmConfig, advice: &PyAdviceConfig) -> PyResult<Self> {
        let inner =
            core::Checker::new(bundle.inner.clone(), alarm.inner.clone(), advice.inner.clone()).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Checks one instance given its feature vector per layer.
    fn check(&self, features: Vec<Vec<f64>>, y_hat: u32) -> PyResult<PyVerdict> {
        let views: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
        Ok(self.inner.check(&views, y_hat).map_err(to_py)?.into())
    }

    /// Checks one instance given its inferred class per layer.
    fn check_inferred(&self, inferred: Vec<u32>, y_hat: u32) -> PyResult<PyVerdict> {
        Ok(self.inner.check_inferred(&inferred, y_hat).map_err(to_py)?.into())
    }

    fn check_batch(&self, py: Python<'_>, data: &PyFeatureSet) -> PyResult<Vec<PyVerdict>> {
        let report = py.detach(|| self.inner.check_batch(&data.inner)).map_err(to_py)?;
        Ok(report.verdicts.into_iter().map(PyVerdict::from).collect())
    }
}

/// Fitted Gamma distribution with anomaly thresholds at tail mass `epsilon`.
#[pyclass(name = "GammaParams", module = "selfcheck", frozen)]
struct PyGammaParams {
    inner: regression::GammaParams,
}

#[pymethods]
impl PyGammaParams {
    #[new]
    #[pyo3(signature = (shape, scale, loc=0.0, epsilon=regression::DEFAULT_EPSILON))]
    fn new(shape: f64, scale: f64, loc: f64, epsilon: f64) -> PyResult<Self> {
        Ok(Self {
            inner: regression::GammaParams::new(shape, scale, loc, epsilon).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> f64 {
        self.inner.shape
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    #[getter]
    fn loc(&self) -> f64 {
        self.inner.loc
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    fn cdf(&self, x: f64) -> f64 {
        self.inner.cdf(x)
    }

    fn quantile(&self, p: f64) -> f64 {
        self.inner.quantile(p)
    }

    fn upper_threshold(&self) -> f64 {
        self.inner.upper_threshold()
    }

    fn lower_threshold(&self) -> f64 {
        self.inner.lower_threshold()
    }

    /// Flags values beyond the threshold in `direction` ("above" or "below").
    #[pyo3(signature = (values, direction="above"))]
    fn binarize(&self, values: Vec<f64>, direction: &str) -> PyResult<Vec<bool>> {
        let direction: Direction = direction.parse().map_err(to_py)?;
        Ok(regression::binarize(&values, &self.inner, direction))
    }

    fn __repr__(&self) -> String {
        format!(
            "GammaParams(shape={}, scale={}, loc={}, epsilon={})",
            self.inner.shape, self.inner.scale, self.inner.loc, self.inner.epsilon
        )
    }
}

/// Maximum-likelihood Gamma fit; `shifted` accepts non-positive samples.
#[pyfunction]
#[pyo3(signature = (values, epsilon=regression::DEFAULT_EPSILON, shifted=false))]
fn fit_gamma(values: Vec<f64>, epsilon: f64, shifted: bool) -> PyResult<PyGammaParams> {
    let fit = if shifted {
        regression::fit_gamma_shifted(&values)
    } else {
        regression::fit_gamma(&values)
    };
    let inner = fit.and_then(|p| p.with_epsilon(epsilon)).map_err(to_py)?;
    Ok(PyGammaParams { inner })
}

/// `(tp, fp, tn, fn)` of alarms against misclassifications.
#[pyfunction]
fn confusion(alarms: Vec<bool>, labels: Vec<u32>, predictions: Vec<u32>) -> PyResult<(u64, u64, u64, u64)> {
    let c = core::confusion(&alarms, &labels, &predictions).map_err(to_py)?;
    Ok((c.tp, c.fp, c.tn, c.fn_))
}

/// `(tpr, fpr, f1)` from confusion counts; zero denominators give 0.
#[pyfunction]
#[pyo3(name = "rates")]
fn rates_py(tp: u64, fp: u64, tn: u64, fn_: u64) -> (f64, f64, f64) {
    let r = core::rates(&core::ConfusionCounts { tp, fp, tn, fn_ });
    (r.tpr, r.fpr, r.f1)
}

/// `(rho, p)` with average ranks for ties.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = core::spearman(&x, &y).map_err(to_py)?;
    Ok((s.rho, s.p))
}

/// Per-channel means of a flattened `n × h × w × ch` block.
#[pyfunction]
fn mean_pool(block: Vec<f32>, shape: [usize; 4]) -> PyResult<Vec<f32>> {
    core_mean_pool(&block, shape).map_err(to_py)
}

/// Seeded synthetic `(train, valid, test)` feature sets.
#[pyfunction]
#[pyo3(signature = (seed=7, n_per_class=2000, n_classes=3, n_layers=6, noise_layers=1, error_rate=0.12))]
fn synth_bench(
    py: Python<'_>,
    seed: u64,
    n_per_class: usize,
    n_classes: usize,
    n_layers: usize,
    noise_layers: usize,
    error_rate: f64,
) -> PyResult<(PyFeatureSet, PyFeatureSet, PyFeatureSet)> {
    let cfg = core::SynthConfig {
        seed,
        n_per_class,
        n_classes,
        n_layers,
        noise_layer_count: noise_layers,
        error_rate,
        ..core::SynthConfig::default()
    };
    let d = py.detach(|| core::synth_bench(&cfg)).map_err(to_py)?;
    Ok((
        PyFeatureSet { inner: d.train },
        PyFeatureSet { inner: d.valid },
        PyFeatureSet { inner: d.test },
    ))
}

#[pymodule]
fn selfcheck(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SelfCheckError", m.py().get_type::<SelfCheckError>())?;
    m.add_class::<PyFeatureSet>()?;
    m.add_class::<PyInferenceTable>()?;
    m.add_class::<PyKdeBundle>()?;
    m.add_class::<PyAlarmConfig>()?;
    m.add_class::<PyAdviceConfig>()?;
    m.add_class::<PyVerdict>()?;
    m.add_class::<PyChecker>()?;
    m.add_class::<PyGammaParams>()?;
    m.add_function(wrap_pyfunction!(fit_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(rates_py, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(mean_pool, m)?)?;
    m.add_function(wrap_pyfunction!(synth_bench, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
