//! Per-(layer, class) Gaussian kernel density estimates and layer inference.
//!
//! Each cell keeps the training vectors of one class at one layer, restricted
//! to the neurons whose variance over that class reaches `t_var`. The kernel
//! is a multivariate normal with covariance `h² Σ`, where `Σ` is the cell's
//! regularized sample covariance and `h = m^(-1/(d+4))` is Scott's factor.
//! Densities are handled in log space throughout.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureTensorSet, Split};

pub const DEFAULT_T_VAR: f64 = 1e-5;
const RIDGE: f64 = 1e-6;
const BUNDLE_FILE: &str = "bundle.json";
const BUNDLE_VERSION: u32 = 1;

/// Scott's bandwidth factor for `m` points in `d` dimensions.
pub fn scott_factor(m: usize, d: usize) -> f64 {
    (m as f64).powf(-1.0 / (d as f64 + 4.0))
}

/// Population variance of every column of a row-major `m × d` matrix.
pub fn column_variances(rows: &[f64], d: usize) -> Vec<f64> {
    let m = rows.len() / d;
    let mut mean = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for (mu, v) in mean.iter_mut().zip(row) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= m as f64);
    let mut var = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for j in 0..d {
            let dv = row[j] - mean[j];
            var[j] += dv * dv;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    var
}

/// Indices of the columns with variance `>= t_var`. When none survive, the
/// single highest-variance column (lowest index on ties) is kept and the
/// second return value is `true`.
pub fn variance_filter(variances: &[f64], t_var: f64) -> (Vec<usize>, bool) {
    let kept: Vec<usize> = (0..variances.len()).filter(|&j| variances[j] >= t_var).collect();
    if !kept.is_empty() {
        return (kept, false);
    }
    let mut best = 0;
    for j in 1..variances.len() {
        if variances[j] > variances[best] {
            best = j;
        }
    }
    (vec![best], true)
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn forward_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// Sample covariance (ddof = 1) plus `RIDGE · mean(diag)` on the diagonal.
/// Falls back to the identity when there is no spread to estimate from.
fn regularized_covariance(rows: &[f64], d: usize) -> Vec<f64> {
    let m = rows.len() / d;
    let mut identity = vec![0.0; d * d];
    for j in 0..d {
        identity[j * d + j] = 1.0;
    }
    if m < 2 {
        return identity;
    }
    let mut mean = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for (mu, v) in mean.iter_mut().zip(row) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= m as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for j in 0..d {
            centered[j] = row[j] - mean[j];
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / (m - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let mean_diag = (0..d).map(|j| cov[j * d + j]).sum::<f64>() / d as f64;
    if !(mean_diag > 0.0) {
        return identity;
    }
    for j in 0..d {
        cov[j * d + j] += RIDGE * mean_diag;
    }
    cov
}

/// Density estimate for one (layer, class) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeCell {
    kept_indices: Vec<usize>,
    samples: Vec<f64>,
    dim: usize,
    bandwidth: f64,
    chol: Vec<f64>,
    log_norm_const: f64,
    whitened: Vec<f64>,
}

impl KdeCell {
    /// Fits a cell from the class's rows at one layer (row-major, full width).
    pub fn fit(rows: &[f64], full_dim: usize, t_var: f64) -> Result<(Self, bool)> {
        if rows.is_empty() || !rows.len().is_multiple_of(full_dim) {
            return Err(Error::Invalid("kde cell needs at least one full row".into()));
        }
        let (kept, rescued) = variance_filter(&column_variances(rows, full_dim), t_var);
        let samples: Vec<f64> = rows
            .chunks_exact(full_dim)
            .flat_map(|row| kept.iter().map(move |&j| row[j]))
            .collect();
        let d = kept.len();
        let mut cov = regularized_covariance(&samples, d);
        let chol = loop {
            if let Some(l) = cholesky(&cov, d) {
                break l;
            }
            // Only reachable through rounding on near-singular covariances.
            let bump = (0..d).map(|j| cov[j * d + j]).fold(0.0f64, f64::max).max(1.0) * RIDGE;
            for j in 0..d {
                cov[j * d + j] += bump;
            }
        };
        let m = samples.len() / d;
        let bandwidth = scott_factor(m, d);
        Ok((Self::from_parts(kept, samples, bandwidth, chol), rescued))
    }

    fn from_parts(kept_indices: Vec<usize>, samples: Vec<f64>, bandwidth: f64, chol: Vec<f64>) -> Self {
        let d = kept_indices.len();
        let m = samples.len() / d;
        let log_det_l: f64 = (0..d).map(|j| chol[j * d + j].ln()).sum();
        let log_norm_const =
            -(m as f64).ln() - 0.5 * d as f64 * (2.0 * PI).ln() - d as f64 * bandwidth.ln() - log_det_l;
        let mut whitened = samples.clone();
        for row in whitened.chunks_exact_mut(d) {
            forward_solve(&chol, d, row);
            row.iter_mut().for_each(|v| *v /= bandwidth);
        }
        Self {
            kept_indices,
            samples,
            dim: d,
            bandwidth,
            chol,
            log_norm_const,
            whitened,
        }
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept_indices
    }

    /// Number of stored training vectors.
    pub fn m(&self) -> usize {
        self.samples.len() / self.dim
    }

    /// Width after variance filtering.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Lower Cholesky factor of the regularized covariance, row-major `d × d`.
    pub fn whitening(&self) -> &[f64] {
        &self.chol
    }

    pub fn log_norm_const(&self) -> f64 {
        self.log_norm_const
    }

    /// Log density at a full-width layer vector.
    pub fn log_density<T: Copy + Into<f64>>(&self, v: &[T]) -> f64 {
        let d = self.dim;
        let mut y: Vec<f64> = self.kept_indices.iter().map(|&j| v[j].into()).collect();
        forward_solve(&self.chol, d, &mut y);
        y.iter_mut().for_each(|v| *v /= self.bandwidth);

        // Streaming log-sum-exp over -|y - w_i|² / 2.
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for w in self.whitened.chunks_exact(d) {
            let mut q = 0.0;
            for (a, b) in y.iter().zip(w) {
                let t = a - b;
                q += t * t;
            }
            let e = -0.5 * q;
            if e > max {
                sum = sum * (max - e).exp() + 1.0;
                max = e;
            } else {
                sum += (e - max).exp();
            }
        }
        self.log_norm_const + max + sum.ln()
    }
}

/// Inferred class and per-class log densities for one layer of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInference {
    pub inferred_class: u32,
    pub log_densities: Vec<f64>,
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fitted density estimates for every (layer, class) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeBundle {
    t_var: f64,
    n_classes: usize,
    layer_names: Vec<String>,
    layer_dims: Vec<usize>,
    cells: Vec<KdeCell>,
}

impl KdeBundle {
    pub fn t_var(&self) -> f64 {
        self.t_var
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_layers(&self) -> usize {
        self.layer_names.len()
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn cell(&self, layer: usize, class: usize) -> &KdeCell {
        &self.cells[layer * self.n_classes + class]
    }

    pub fn log_density<T: Copy + Into<f64>>(&self, layer: usize, class: usize, v: &[T]) -> Result<f64> {
        if layer >= self.n_layers() || class >= self.n_classes {
            return Err(Error::Invalid(format!("no kde cell for layer {layer}, class {class}")));
        }
        let expected = self.layer_dims[layer];
        if v.len() != expected {
            return Err(Error::DimensionMismatch {
                layer,
                expected,
                found: v.len(),
            });
        }
        Ok(self.cell(layer, class).log_density(v))
    }

    /// Layer inference for one instance given its per-layer feature vectors.
    pub fn infer_instance<T: Copy + Into<f64>>(&self, features: &[&[T]]) -> Result<Vec<LayerInference>> {
        if features.len() != self.n_layers() {
            return Err(Error::LengthMismatch {
                what: "layers",
                expected: self.n_layers(),
                found: features.len(),
            });
        }
        features
            .iter()
            .enumerate()
            .map(|(l, v)| {
                let log_densities = (0..self.n_classes)
                    .map(|c| self.log_density(l, c, v))
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerInference {
                    inferred_class: argmax(&log_densities) as u32,
                    log_densities,
                })
            })
            .collect()
    }

    /// Inference for every instance of `set`.
    pub fn infer_layers(&self, set: &FeatureTensorSet) -> Result<InferenceTable> {
        let names: Vec<&str> = self.layer_names.iter().map(String::as_str).collect();
        if set.layer_names() != names {
            return Err(Error::LayerMismatch(format!("{:?} vs {:?}", set.layer_names(), names)));
        }
        let rows = (0..set.n_instances())
            .into_par_iter()
            .map(|i| self.infer_instance(&set.instance(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(InferenceTable::from_rows(self.n_layers(), self.n_classes, &rows))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut cells = Vec::with_capacity(self.cells.len());
        for (idx, cell) in self.cells.iter().enumerate() {
            let (layer, class) = (idx / self.n_classes, idx % self.n_classes);
            let samples_file = format!("cell_l{layer}_c{class}.samples.f64");
            let whitening_file = format!("cell_l{layer}_c{class}.whitening.f64");
            write_f64_file(&dir.join(&samples_file), &cell.samples)?;
            write_f64_file(&dir.join(&whitening_file), &cell.chol)?;
            cells.push(CellMeta {
                layer,
                class,
                m: cell.m(),
                dim: cell.dim,
                bandwidth: cell.bandwidth,
                kept_indices: cell.kept_indices.clone(),
                samples_file,
                whitening_file,
            });
        }
        let meta = BundleMeta {
            format_version: BUNDLE_VERSION,
            t_var: self.t_var,
            n_classes: self.n_classes,
            layers: self
                .layer_names
                .iter()
                .zip(&self.layer_dims)
                .map(|(name, &dim)| LayerMeta {
                    name: name.clone(),
                    dim,
                })
                .collect(),
            cells,
        };
        let path = dir.join(BUNDLE_FILE);
        let mut text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_FILE);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if meta.format_version != BUNDLE_VERSION {
            return Err(Error::FormatVersion(meta.format_version));
        }
        let n_layers = meta.layers.len();
        if meta.cells.len() != n_layers * meta.n_classes {
            return Err(Error::Invalid(format!(
                "{} cells for {n_layers} layers",
                meta.cells.len()
            )));
        }
        let mut cells = Vec::with_capacity(meta.cells.len());
        for (idx, cm) in meta.cells.into_iter().enumerate() {
            if cm.layer * meta.n_classes + cm.class != idx || cm.kept_indices.len() != cm.dim || cm.dim == 0 {
                return Err(Error::Invalid(format!("inconsistent cell metadata at position {idx}")));
            }
            let samples = read_f64_file(&dir.join(&cm.samples_file))?;
            let chol = read_f64_file(&dir.join(&cm.whitening_file))?;
            if samples.len() != cm.m * cm.dim || chol.len() != cm.dim * cm.dim {
                return Err(Error::Invalid(format!(
                    "cell l{} c{} has wrong payload size",
                    cm.layer, cm.class
                )));
            }
            cells.push(KdeCell::from_parts(cm.kept_indices, samples, cm.bandwidth, chol));
        }
        Ok(Self {
            t_var: meta.t_var,
            n_classes: meta.n_classes,
            layer_names: meta.layers.iter().map(|l| l.name.clone()).collect(),
            layer_dims: meta.layers.iter().map(|l| l.dim).collect(),
            cells,
        })
    }
}

/// Fits one density per (layer, class) from a labelled training split.
pub fn fit_kde(train: &FeatureTensorSet, t_var: f64) -> Result<KdeBundle> {
    if train.split() != Split::Train {
        return Err(Error::Invalid(format!(
            "kde fitting needs the train split, got {}",
            train.split()
        )));
    }
    if !(t_var >= 0.0) {
        return Err(Error::Invalid(format!(
            "variance threshold must be non-negative, got {t_var}"
        )));
    }
    let labels = train.require_labels()?;
    let n_classes = train.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(c as u32));
    }

    let n_layers = train.n_layers();
    let cells = (0..n_layers * n_classes)
        .into_par_iter()
        .map(|idx| {
            let (l, c) = (idx / n_classes, idx % n_classes);
            let layer = &train.layers()[l];
            let rows: Vec<f64> = by_class[c]
                .iter()
                .flat_map(|&i| layer.row(i).iter().map(|&v| v as f64))
                .collect();
            let (cell, rescued) = KdeCell::fit(&rows, layer.dim(), t_var)?;
            if rescued {
                warn!(
                    "layer `{}` class {c}: every neuron below variance threshold {t_var}; keeping neuron {}",
                    layer.name(),
                    cell.kept_indices[0]
                );
            }
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(KdeBundle {
        t_var,
        n_classes,
        layer_names: train.layer_names().iter().map(|s| s.to_string()).collect(),
        layer_dims: train.layer_dims(),
        cells,
    })
}

/// Inferred classes (and optionally log densities) for `n` instances over
/// `L` layers, row-major by instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTable {
    n_layers: usize,
    n_classes: usize,
    classes: Vec<u32>,
    /// `n × L × C` when present; empty for tables built from classes alone.
    log_densities: Vec<f64>,
}

impl InferenceTable {
    pub fn from_rows(n_layers: usize, n_classes: usize, rows: &[Vec<LayerInference>]) -> Self {
        let mut classes = Vec::with_capacity(rows.len() * n_layers);
        let mut log_densities = Vec::with_capacity(rows.len() * n_layers * n_classes);
        for row in rows {
            for li in row {
                classes.push(li.inferred_class);
                log_densities.extend_from_slice(&li.log_densities);
            }
        }
        Self {
            n_layers,
            n_classes,
            classes,
            log_densities,
        }
    }

    /// Builds a table from inferred classes only (`n × L`, row-major).
    pub fn from_classes(n_layers: usize, n_classes: usize, classes: Vec<u32>) -> Result<Self> {
        if n_layers == 0 || !classes.len().is_multiple_of(n_layers) {
            return Err(Error::Invalid("inferred class matrix is ragged".into()));
        }
        if let Some(&id) = classes.iter().find(|&&c| c as usize >= n_classes) {
            return Err(Error::ClassOutOfRange {
                what: "inferred classes",
                id,
                n_classes,
            });
        }
        Ok(Self {
            n_layers,
            n_classes,
            classes,
            log_densities: Vec::new(),
        })
    }

    pub fn n_instances(&self) -> usize {
        self.classes.len() / self.n_layers
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn has_log_densities(&self) -> bool {
        !self.log_densities.is_empty()
    }

    /// Inferred classes of instance `i`, one per layer.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.classes[i * self.n_layers..(i + 1) * self.n_layers]
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn log_density(&self, i: usize, layer: usize, class: usize) -> Option<f64> {
        self.log_densities
            .get((i * self.n_layers + layer) * self.n_classes + class)
            .copied()
    }

    /// Per-layer inference of instance `i`.
    pub fn layer_inference(&self, i: usize) -> Vec<LayerInference> {
        (0..self.n_layers)
            .map(|l| LayerInference {
                inferred_class: self.row(i)[l],
                log_densities: (0..self.n_classes).filter_map(|c| self.log_density(i, l, c)).collect(),
            })
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if table.n_layers == 0
            || !table.classes.len().is_multiple_of(table.n_layers)
            || (table.has_log_densities() && table.log_densities.len() != table.classes.len() * table.n_classes)
        {
            return Err(Error::Invalid(format!(
                "{} is not a consistent inference table",
                path.display()
            )));
        }
        Ok(table)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    format_version: u32,
    t_var: f64,
    n_classes: usize,
    layers: Vec<LayerMeta>,
    cells: Vec<CellMeta>,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    name: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct CellMeta {
    layer: usize,
    class: usize,
    m: usize,
    dim: usize,
    bandwidth: f64,
    kept_indices: Vec<usize>,
    samples_file: String,
    whitening_file: String,
}

fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Invalid(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
