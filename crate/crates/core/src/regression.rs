//! Turns a regression monitor into a two-class problem by thresholding
//! Gamma fits of validation errors and per-layer negative log densities.
//!
//! Class `0` is "normal", class `1` is "anomalous". A regression model always
//! claims its output is normal, so its predictions are all `0` and a
//! misbehaviour is an instance whose error lands beyond the Gamma threshold.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::kde::InferenceTable;

pub const DEFAULT_EPSILON: f64 = 0.05;
const MIN_SAMPLES: usize = 10;
const NEWTON_TOL: f64 = 1e-10;

pub const NORMAL: u32 = 0;
pub const ANOMALOUS: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Anomalous when above the upper `ε` quantile.
    Above,
    /// Anomalous when below the lower `ε` quantile.
    Below,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "above" => Ok(Direction::Above),
            "below" => Ok(Direction::Below),
            other => Err(Error::Invalid(format!("unknown direction `{other}`"))),
        }
    }
}

/// Trigamma via the recurrence up to `x >= 10`, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub scale: f64,
    pub loc: f64,
    pub epsilon: f64,
}

impl GammaParams {
    pub fn new(shape: f64, scale: f64, loc: f64, epsilon: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite() && loc.is_finite()) {
            return Err(Error::Invalid(format!(
                "bad gamma parameters k={shape}, θ={scale}, loc={loc}"
            )));
        }
        Self {
            shape,
            scale,
            loc,
            epsilon: DEFAULT_EPSILON,
        }
        .with_epsilon(epsilon)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.loc) / self.scale;
        if z <= 0.0 {
            0.0
        } else if z.is_infinite() {
            1.0
        } else {
            gamma_lr(self.shape, z)
        }
    }

    fn pdf_std(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        ((self.shape - 1.0) * z.ln() - z - ln_gamma(self.shape)).exp()
    }

    /// Inverse cdf: safeguarded Newton inside a bisection bracket.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return self.loc;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let k = self.shape;
        let mut lo = 0.0;
        let mut hi = k.max(1.0);
        while gamma_lr(k, hi) < p {
            lo = hi;
            hi *= 2.0;
        }
        let mut z = 0.5 * (lo + hi);
        for _ in 0..300 {
            let f = gamma_lr(k, z) - p;
            if f.abs() < 1e-15 {
                break;
            }
            if f < 0.0 {
                lo = z;
            } else {
                hi = z;
            }
            let d = self.pdf_std(z);
            let newton = if d > 0.0 { z - f / d } else { f64::NAN };
            z = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-15 * hi.max(1e-300) {
                break;
            }
        }
        self.loc + self.scale * z
    }

    /// Value above which an instance is anomalous.
    pub fn upper_threshold(&self) -> f64 {
        self.quantile(1.0 - self.epsilon)
    }

    /// Value below which an instance is anomalous.
    pub fn lower_threshold(&self) -> f64 {
        self.quantile(self.epsilon)
    }
}

/// Maximum-likelihood Gamma fit with `loc = 0`: Newton iteration on
/// `ln k - ψ(k) = ln(mean) - mean(ln x)`, then `θ = mean / k`.
pub fn fit_gamma(values: &[f64]) -> Result<GammaParams> {
    if values.len() < MIN_SAMPLES {
        return Err(Error::Invalid(format!(
            "gamma fit needs at least {MIN_SAMPLES} values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Invalid(format!(
            "gamma fit needs positive finite values, got {v}"
        )));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Err(Error::Invalid("gamma fit needs values that are not all equal".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    if !(s > 0.0) {
        return Err(Error::Invalid(
            "gamma fit: sample too concentrated to estimate a shape".into(),
        ));
    }
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..100 {
        let f = k.ln() - digamma(k) - s;
        let df = 1.0 / k - trigamma(k);
        let mut next = k - f / df;
        if next <= 0.0 {
            next = 0.5 * k;
        }
        let step = (next - k).abs();
        k = next;
        if step <= NEWTON_TOL * k {
            break;
        }
    }
    GammaParams::new(k, mean / k, 0.0, DEFAULT_EPSILON)
}

/// Like [`fit_gamma`], but shifts non-positive samples onto the positive axis
/// first and records the shift in `loc`.
pub fn fit_gamma_shifted(values: &[f64]) -> Result<GammaParams> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min > 0.0 || !min.is_finite() {
        return fit_gamma(values);
    }
    let loc = min - 1e-3 * (max - min).max(f64::MIN_POSITIVE);
    let shifted: Vec<f64> = values.iter().map(|v| v - loc).collect();
    let fit = fit_gamma(&shifted)?;
    GammaParams::new(fit.shape, fit.scale, loc, fit.epsilon)
}

/// Flags values beyond the `ε` threshold; values exactly at it are normal.
pub fn binarize(values: &[f64], params: &GammaParams, direction: Direction) -> Vec<bool> {
    match direction {
        Direction::Above => {
            let t = params.upper_threshold();
            values.iter().map(|&v| v > t).collect()
        }
        Direction::Below => {
            let t = params.lower_threshold();
            values.iter().map(|&v| v < t).collect()
        }
    }
}

/// Per-layer anomaly thresholds over negative log densities from a
/// single-class density bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGammas {
    pub layers: Vec<GammaParams>,
}

impl LayerGammas {
    /// Fits one Gamma per layer to `-log density` of the validation rows.
    pub fn fit(single_class: &InferenceTable, epsilon: f64) -> Result<Self> {
        if single_class.n_classes() != 1 || !single_class.has_log_densities() {
            return Err(Error::Invalid(
                "layer gammas need single-class inference with log densities".into(),
            ));
        }
        let n = single_class.n_instances();
        let layers = (0..single_class.n_layers())
            .map(|l| {
                let values: Vec<f64> = (0..n)
                    .map(|i| -single_class.log_density(i, l, 0).expect("densities present"))
                    .collect();
                fit_gamma_shifted(&values)?.with_epsilon(epsilon)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Two-class inference table: a layer infers `ANOMALOUS` when its
    /// negative log density exceeds that layer's upper threshold.
    pub fn binary_inference(&self, single_class: &InferenceTable) -> Result<InferenceTable> {
        if single_class.n_layers() != self.layers.len() || !single_class.has_log_densities() {
            return Err(Error::Invalid("inference table does not match the layer gammas".into()));
        }
        let thresholds: Vec<f64> = self.layers.iter().map(GammaParams::upper_threshold).collect();
        let n = single_class.n_instances();
        let mut classes = Vec::with_capacity(n * thresholds.len());
        for i in 0..n {
            for (l, &t) in thresholds.iter().enumerate() {
                let v = -single_class.log_density(i, l, 0).expect("densities present");
                classes.push(if v > t { ANOMALOUS } else { NORMAL });
            }
        }
        InferenceTable::from_classes(thresholds.len(), 2, classes)
    }
}

/// Labels from regression errors: `ANOMALOUS` above the upper threshold.
pub fn error_labels(errors: &[f64], params: &GammaParams) -> Vec<u32> {
    binarize(errors, params, Direction::Above)
        .into_iter()
        .map(|a| if a { ANOMALOUS } else { NORMAL })
        .collect()
}
