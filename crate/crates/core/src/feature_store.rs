//! On-disk activation dumps and the in-memory split types built from them.
//!
//! A dump is a directory holding `manifest.json`, one raw little-endian
//! `f32` file per layer (row-major, `n × dim`, no header) and raw
//! little-endian `u32` files for labels and predictions. Each layer file is
//! covered by a SHA-256 digest recorded in the manifest.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const LABELS_FILE: &str = "labels.u32";
const PREDICTIONS_FILE: &str = "predictions.u32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    ConvPooled,
}

/// Activations of one layer for every instance of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMatrix {
    name: String,
    kind: LayerKind,
    dim: usize,
    data: Vec<f32>,
}

impl LayerMatrix {
    /// Builds a layer from row-major data. Rejects `dim == 0`, ragged data
    /// and non-finite entries.
    pub fn new(name: impl Into<String>, kind: LayerKind, dim: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if dim == 0 {
            return Err(Error::Invalid(format!("layer `{name}` has zero width")));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::RowCountMismatch {
                layer: name,
                expected: data.len().div_ceil(dim),
                found: data.len() / dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: name,
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { name, kind, dim, data })
    }

    /// Pools a raw `n × H × W × Ch` block down to `n × Ch`.
    pub fn from_conv_block(name: impl Into<String>, block: &[f32], shape: [usize; 4]) -> Result<Self> {
        let pooled = mean_pool(block, shape)?;
        Self::new(name, LayerKind::ConvPooled, shape[3], pooled)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-layer activations, labels and model predictions for one dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensorSet {
    split: Split,
    layers: Vec<LayerMatrix>,
    labels: Option<Vec<u32>>,
    predictions: Vec<u32>,
    n_classes: usize,
}

impl FeatureTensorSet {
    pub fn new(
        split: Split,
        layers: Vec<LayerMatrix>,
        labels: Option<Vec<u32>>,
        predictions: Vec<u32>,
        n_classes: usize,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Invalid("n_classes must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::Invalid("a feature set needs at least one layer".into()));
        }
        let n = predictions.len();
        for layer in &layers {
            if layer.rows() != n {
                return Err(Error::RowCountMismatch {
                    layer: layer.name.clone(),
                    expected: n,
                    found: layer.rows(),
                });
            }
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate layer name `{}`", layer.name)));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::LengthMismatch {
                    what: "labels",
                    expected: n,
                    found: labels.len(),
                });
            }
            check_class_range("labels", labels, n_classes)?;
        }
        check_class_range("predictions", &predictions, n_classes)?;
        Ok(Self {
            split,
            layers,
            labels,
            predictions,
            n_classes,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn layers(&self) -> &[LayerMatrix] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn predictions(&self) -> &[u32] {
        &self.predictions
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_instances(&self) -> usize {
        self.predictions.len()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name()).collect()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dim()).collect()
    }

    /// Feature vectors of instance `i`, one slice per layer.
    pub fn instance(&self, i: usize) -> Vec<&[f32]> {
        self.layers.iter().map(|l| l.row(i)).collect()
    }

    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("{} split has no labels", self.split)))
    }

    /// Splits of one model must expose the same layers in the same order.
    pub fn ensure_same_layers(&self, other: &FeatureTensorSet) -> Result<()> {
        let ours = self.layer_names();
        let theirs = other.layer_names();
        if ours != theirs {
            return Err(Error::LayerMismatch(format!("{ours:?} vs {theirs:?}")));
        }
        Ok(())
    }
}

fn check_class_range(what: &'static str, ids: &[u32], n_classes: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= n_classes) {
        Some(&id) => Err(Error::ClassOutOfRange { what, id, n_classes }),
        None => Ok(()),
    }
}

/// Mean over the spatial grid of a channels-last `n × H × W × Ch` block.
pub fn mean_pool(block: &[f32], shape: [usize; 4]) -> Result<Vec<f32>> {
    let [n, h, w, ch] = shape;
    if h == 0 || w == 0 || ch == 0 {
        return Err(Error::Invalid(format!("zero-sized pooling shape {shape:?}")));
    }
    let expected = n * h * w * ch;
    if block.len() != expected {
        return Err(Error::LengthMismatch {
            what: "conv block",
            expected,
            found: block.len(),
        });
    }
    let cells = h * w;
    let mut out = vec![0f32; n * ch];
    let mut acc = vec![0f64; ch];
    for (i, inst) in block.chunks_exact(cells * ch).enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for pixel in inst.chunks_exact(ch) {
            for (a, &v) in acc.iter_mut().zip(pixel) {
                *a += v as f64;
            }
        }
        for (o, a) in out[i * ch..(i + 1) * ch].iter_mut().zip(&acc) {
            *o = (a / cells as f64) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    split: Split,
    n: usize,
    n_classes: usize,
    layers: Vec<LayerEntry>,
    labels_file: Option<String>,
    predictions_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    dim: usize,
    file: String,
    sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn u32_to_bytes(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_u32_file(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "{} is not a whole number of u32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    fs::write(path, f32_to_bytes(values)).map_err(|e| Error::io(path, e))
}

pub fn write_u32_file(path: &Path, values: &[u32]) -> Result<()> {
    fs::write(path, u32_to_bytes(values)).map_err(|e| Error::io(path, e))
}

fn layer_file_names(layers: &[LayerMatrix]) -> Vec<String> {
    let mut used = HashSet::new();
    layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let clean: String = layer
                .name
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            let mut file = format!("{clean}.f32");
            if clean.is_empty() || !used.insert(file.clone()) {
                file = format!("{i:03}_{clean}.f32");
                used.insert(file.clone());
            }
            file
        })
        .collect()
}

/// Writes `set` into `dir`, creating it if needed.
pub fn save_feature_dump(set: &FeatureTensorSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = layer_file_names(&set.layers);
    let mut entries = Vec::with_capacity(set.layers.len());
    for (layer, file) in set.layers.iter().zip(files) {
        let bytes = f32_to_bytes(&layer.data);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(LayerEntry {
            name: layer.name.clone(),
            kind: layer.kind,
            dim: layer.dim,
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let labels_file = match &set.labels {
        Some(labels) => {
            write_u32_file(&dir.join(LABELS_FILE), labels)?;
            Some(LABELS_FILE.to_string())
        }
        None => None,
    };
    write_u32_file(&dir.join(PREDICTIONS_FILE), &set.predictions)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        split: set.split,
        n: set.n_instances(),
        n_classes: set.n_classes,
        layers: entries,
        labels_file,
        predictions_file: PREDICTIONS_FILE.to_string(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads and validates a dump directory.
pub fn load_feature_dump(dir: &Path) -> Result<FeatureTensorSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion(manifest.format_version));
    }
    let n = manifest.n;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        if entry.dim == 0 {
            return Err(Error::Invalid(format!("layer `{}` has zero width", entry.name)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if !sha256_hex(&bytes).eq_ignore_ascii_case(&entry.sha256) {
            return Err(Error::Checksum { file: entry.file });
        }
        let row_bytes = entry.dim * 4;
        if bytes.len() != n * row_bytes {
            return Err(Error::RowCountMismatch {
                layer: entry.name,
                expected: n,
                found: bytes.len() / row_bytes,
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        layers.push(LayerMatrix::new(entry.name, entry.kind, entry.dim, data)?);
    }

    let labels = match &manifest.labels_file {
        Some(file) => Some(read_u32_file(&dir.join(file))?),
        None => None,
    };
    let predictions = read_u32_file(&dir.join(&manifest.predictions_file))?;
    if predictions.len() != n {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: n,
            found: predictions.len(),
        });
    }
    FeatureTensorSet::new(manifest.split, layers, labels, predictions, manifest.n_classes)
}
