//! Seeded synthetic activation dumps for desk-scale experiments.
//!
//! Inputs are Gaussian clusters, one per class. They pass through a chain of
//! random affine maps with `tanh`; each emitted layer adds its own amount of
//! activation noise, so layers differ in how reliably they separate classes.
//! Stages picked as noise layers emit label-independent Gaussian noise
//! instead (the chain skips them). A simulated classifier mislabels a
//! configurable fraction of instances; those inputs are drawn between their
//! true class and the wrongly predicted one, and deeper layers see them
//! pulled further toward the prediction.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{save_feature_dump, FeatureTensorSet, LayerKind, LayerMatrix, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub n_classes: usize,
    pub n_layers: usize,
    pub noise_layer_count: usize,
    pub error_rate: f64,
    pub input_dim: usize,
    pub layer_dim: usize,
    /// Spread of the class centres relative to the unit within-class noise.
    pub separation: f64,
    /// How far the deepest layer moves toward the predicted class, in [0, 1].
    /// Misclassified inputs drift toward the wrong prediction with depth;
    /// correctly classified ones drift toward their own class centre.
    pub commitment: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_per_class: 2000,
            n_classes: 3,
            n_layers: 6,
            noise_layer_count: 1,
            error_rate: 0.12,
            input_dim: 8,
            layer_dim: 8,
            separation: 3.0,
            commitment: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDumps {
    pub train: FeatureTensorSet,
    pub valid: FeatureTensorSet,
    pub test: FeatureTensorSet,
    /// Indices of the stages replaced by noise.
    pub noise_layers: Vec<usize>,
}

impl SynthDumps {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_feature_dump(&self.train, &dir.join("train"))?;
        save_feature_dump(&self.valid, &dir.join("valid"))?;
        save_feature_dump(&self.test, &dir.join("test"))
    }
}

struct Stage {
    weights: Vec<f64>,
    bias: Vec<f64>,
    noise: f64,
    in_dim: usize,
}

/// Runs `x` through the given stages, skipping noise stages.
fn forward(stages: &[Stage], noise_layers: &[usize], mut h: Vec<f64>) -> Vec<f64> {
    for (l, stage) in stages.iter().enumerate() {
        if noise_layers.contains(&l) {
            continue;
        }
        h = (0..stage.bias.len())
            .map(|r| {
                let row = &stage.weights[r * stage.in_dim..(r + 1) * stage.in_dim];
                (row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + stage.bias[r]).tanh()
            })
            .collect();
    }
    h
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn synth_bench(cfg: &SynthConfig) -> Result<SynthDumps> {
    if cfg.n_classes < 2 || cfg.n_layers < 2 {
        return Err(Error::Invalid(
            "synthetic benchmark needs at least 2 classes and 2 layers".into(),
        ));
    }
    if cfg.noise_layer_count >= cfg.n_layers {
        return Err(Error::Invalid("at least one layer must carry signal".into()));
    }
    if cfg.n_per_class == 0 || cfg.input_dim == 0 || cfg.layer_dim == 0 {
        return Err(Error::Invalid("synthetic sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.commitment) {
        return Err(Error::Invalid(format!("commitment {} outside [0, 1]", cfg.commitment)));
    }
    if !(0.0..1.0).contains(&cfg.error_rate) {
        return Err(Error::Invalid(format!("error rate {} outside [0, 1)", cfg.error_rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let centres: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.input_dim).map(|_| cfg.separation * normal(&mut rng)).collect())
        .collect();
    let mut noise_layers = sample(&mut rng, cfg.n_layers, cfg.noise_layer_count).into_vec();
    noise_layers.sort_unstable();

    let mut in_dim = cfg.input_dim;
    let mut fed_raw = true;
    let stages: Vec<Stage> = (0..cfg.n_layers)
        .map(|l| {
            // Keep pre-activations in tanh's responsive range.
            let input_spread = if fed_raw { 1.0 + cfg.separation } else { 0.6 };
            let scale = 1.0 / (input_spread * (in_dim as f64).sqrt());
            let weights = (0..cfg.layer_dim * in_dim).map(|_| scale * normal(&mut rng)).collect();
            let bias = (0..cfg.layer_dim).map(|_| 0.1 * normal(&mut rng)).collect();
            // Deeper stages separate classes more cleanly, as in a trained net.
            let depth = l as f64 / (cfg.n_layers - 1) as f64;
            let noise = (0.03 + 0.12 * rng.random::<f64>()) * (1.0 - 0.5 * depth);
            let stage = Stage {
                weights,
                bias,
                noise,
                in_dim,
            };
            if !noise_layers.contains(&l) {
                in_dim = cfg.layer_dim;
                fed_raw = false;
            }
            stage
        })
        .collect();

    let mut make_split = |split: Split| -> Result<FeatureTensorSet> {
        let n = cfg.n_per_class * cfg.n_classes;
        let mut layer_data: Vec<Vec<f32>> = vec![Vec::with_capacity(n * cfg.layer_dim); cfg.n_layers];
        let mut labels = Vec::with_capacity(n);
        let mut predictions = Vec::with_capacity(n);
        for i in 0..n {
            let y = (i % cfg.n_classes) as u32;
            let wrong = rng.random::<f64>() < cfg.error_rate;
            let other = {
                let k = rng.random_range(0..cfg.n_classes - 1) as u32;
                if k >= y {
                    k + 1
                } else {
                    k
                }
            };
            let alpha: f64 = if wrong {
                rng.random_range(0.3..0.7)
            } else {
                rng.random_range(0.0..0.25)
            };
            let jitter: Vec<f64> = (0..cfg.input_dim).map(|_| normal(&mut rng)).collect();
            for (l, stage) in stages.iter().enumerate() {
                if noise_layers.contains(&l) {
                    layer_data[l].extend((0..cfg.layer_dim).map(|_| normal(&mut rng) as f32));
                    continue;
                }
                // Deeper layers lean toward the model's own prediction.
                let depth = cfg.commitment * l as f64 / (cfg.n_layers - 1) as f64;
                let a = if wrong {
                    alpha + (1.0 - alpha) * depth
                } else {
                    alpha * (1.0 - depth)
                };
                let x: Vec<f64> = (0..cfg.input_dim)
                    .map(|j| (1.0 - a) * centres[y as usize][j] + a * centres[other as usize][j] + jitter[j])
                    .collect();
                let h = forward(&stages[..=l], &noise_layers, x);
                layer_data[l].extend(h.iter().map(|&v| (v + stage.noise * normal(&mut rng)) as f32));
            }
            labels.push(y);
            predictions.push(if wrong { other } else { y });
        }
        let layers = layer_data
            .into_iter()
            .enumerate()
            .map(|(l, data)| LayerMatrix::new(format!("layer_{l}"), LayerKind::Dense, cfg.layer_dim, data))
            .collect::<Result<Vec<_>>>()?;
        FeatureTensorSet::new(split, layers, Some(labels), predictions, cfg.n_classes)
    };

    let train = make_split(Split::Train)?;
    let valid = make_split(Split::Valid)?;
    let test = make_split(Split::Test)?;
    Ok(SynthDumps {
        train,
        valid,
        test,
        noise_layers,
    })
}
