//! Independent reference implementations used by the integration tests and
//! the acceptance runner. They favour directness over speed and share no
//! code with the library beyond its public data types.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfcheck_core::{FeatureTensorSet, InferenceTable, LayerInference, LayerKind, LayerMatrix, Split};

/// Double-double number: an unevaluated sum `hi + lo` carrying about 106
/// bits, enough to keep the oracle exact well past float64 conditioning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd {
            hi: s,
            lo: (a - (s - bb)) + (b - bb),
        }
    }

    fn renorm(hi: f64, lo: f64) -> Dd {
        let s = hi + lo;
        Dd {
            hi: s,
            lo: lo - (s - hi),
        }
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    /// Natural log, accurate to about 1e-30 relative to its magnitude.
    pub fn ln(self) -> Dd {
        // One Newton step on exp(y) = x from the float64 estimate.
        let y = self.hi.ln();
        let e = Dd::new(y.exp());
        Dd::new(y) + (self - e) / e
    }
}

impl std::ops::Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl std::ops::Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.hi, o.hi);
        let t = Dd::two_sum(self.lo, o.lo);
        let r = Dd::renorm(s.hi, s.lo + t.hi);
        Dd::renorm(r.hi, r.lo + t.lo)
    }
}

impl std::ops::Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + -o
    }
}

impl std::ops::Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Dd::renorm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl std::ops::Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        Dd::renorm(q1, q2) + Dd::new(q3)
    }
}

/// Inverse and log-determinant by Gauss-Jordan elimination with partial
/// pivoting, in double-double arithmetic.
pub fn invert(a: &[Vec<Dd>]) -> (Vec<Vec<Dd>>, Dd) {
    let d = a.len();
    let mut m: Vec<Vec<Dd>> = a.to_vec();
    let mut inv: Vec<Vec<Dd>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { Dd::ONE } else { Dd::ZERO }).collect())
        .collect();
    let mut log_det = Dd::ZERO;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&x, &y| m[x][col].abs().hi.total_cmp(&m[y][col].abs().hi))
            .unwrap();
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        assert!(p.hi != 0.0, "singular matrix");
        log_det = log_det + p.abs().ln();
        for j in 0..d {
            m[col][j] = m[col][j] / p;
            inv[col][j] = inv[col][j] / p;
        }
        for r in 0..d {
            if r != col {
                let f = m[r][col];
                for j in 0..d {
                    m[r][j] = m[r][j] - f * m[col][j];
                    inv[r][j] = inv[r][j] - f * inv[col][j];
                }
            }
        }
    }
    (inv, log_det)
}

fn dd_sum(values: impl Iterator<Item = Dd>) -> Dd {
    values.fold(Dd::ZERO, |a, b| a + b)
}

/// Direct evaluation of the Gaussian-kernel density of one training class
/// at `query`: columns with population variance below `t_var` are dropped
/// (keeping the widest one if none survive), the kernel covariance is
/// `h² Σ` with Scott's `h` and `Σ` the ridge-regularized sample covariance.
/// The linear algebra runs in double-double so the reference is accurate
/// even where the kernel is close to singular.
pub fn oracle_log_density(rows: &[Vec<f64>], query: &[f64], t_var: f64) -> f64 {
    let m = rows.len();
    let full = rows[0].len();
    let mf = Dd::new(m as f64);
    let pop_var: Vec<f64> = (0..full)
        .map(|j| {
            let mu = dd_sum(rows.iter().map(|r| Dd::new(r[j]))) / mf;
            let ss = dd_sum(rows.iter().map(|r| {
                let t = Dd::new(r[j]) - mu;
                t * t
            }));
            (ss / mf).to_f64()
        })
        .collect();
    let mut kept: Vec<usize> = (0..full).filter(|&j| pop_var[j] >= t_var).collect();
    if kept.is_empty() {
        let mut best = 0;
        for j in 0..full {
            if pop_var[j] > pop_var[best] {
                best = j;
            }
        }
        kept.push(best);
    }
    let d = kept.len();
    let xs: Vec<Vec<Dd>> = rows
        .iter()
        .map(|r| kept.iter().map(|&j| Dd::new(r[j])).collect())
        .collect();
    let v: Vec<Dd> = kept.iter().map(|&j| Dd::new(query[j])).collect();

    let identity: Vec<Vec<Dd>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { Dd::ONE } else { Dd::ZERO }).collect())
        .collect();
    let sigma = if m < 2 {
        identity
    } else {
        let mu: Vec<Dd> = (0..d).map(|j| dd_sum(xs.iter().map(|x| x[j])) / mf).collect();
        let mut s: Vec<Vec<Dd>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| dd_sum(xs.iter().map(|x| (x[i] - mu[i]) * (x[j] - mu[j]))) / Dd::new((m - 1) as f64))
                    .collect()
            })
            .collect();
        let mean_diag = dd_sum((0..d).map(|j| s[j][j])) / Dd::new(d as f64);
        if mean_diag.hi > 0.0 {
            for (j, row) in s.iter_mut().enumerate() {
                row[j] = row[j] + Dd::new(1e-6) * mean_diag;
            }
            s
        } else {
            identity
        }
    };
    let h = Dd::new((m as f64).powf(-1.0 / (d as f64 + 4.0)));
    let kernel: Vec<Vec<Dd>> = sigma.iter().map(|r| r.iter().map(|&x| x * h * h).collect()).collect();
    let (inv, log_det) = invert(&kernel);
    let log_norm = Dd::new(-0.5) * (Dd::new(d as f64) * Dd::new(2.0 * PI).ln() + log_det);
    let exps: Vec<f64> = xs
        .iter()
        .map(|x| {
            let diff: Vec<Dd> = (0..d).map(|j| v[j] - x[j]).collect();
            let q = dd_sum(
                (0..d)
                    .flat_map(|i| (0..d).map(move |j| (i, j)))
                    .map(|(i, j)| diff[i] * inv[i][j] * diff[j]),
            );
            (log_norm - Dd::new(0.5) * q).to_f64()
        })
        .collect();
    let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln() - (m as f64).ln()
}

/// Random training rows for one cell: correlated Gaussian columns, with an
/// occasional constant column.
pub fn random_cell(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    let mix: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let constant_col = if d > 1 && rng.random_bool(0.2) {
        Some(rng.random_range(0..d))
    } else {
        None
    };
    (0..m)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            (0..d)
                .map(|j| {
                    if Some(j) == constant_col {
                        0.75
                    } else {
                        (0..d).map(|k| mix[j][k] * z[k]).sum::<f64>() + 0.3 * z[j]
                    }
                })
                .collect()
        })
        .collect()
}

/// One-layer, one-class training set built from `rows`.
pub fn single_cell_set(rows: &[Vec<f64>]) -> FeatureTensorSet {
    let d = rows[0].len();
    let data: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    let layer = LayerMatrix::new("cell", LayerKind::Dense, d, data).unwrap();
    FeatureTensorSet::new(
        Split::Train,
        vec![layer],
        Some(vec![0; rows.len()]),
        vec![0; rows.len()],
        1,
    )
    .unwrap()
}

/// Rounds through `f32`, as stored in dumps.
pub fn as_stored(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| f64::from(v as f32)).collect())
        .collect()
}

/// Random validation inference with per-layer log densities (inferred
/// class = argmax, lowest id on ties), labels and predictions. Some layers
/// track the label closely, others are noise; log densities are quantized
/// so that ties occur.
pub struct RandomValidation {
    pub table: InferenceTable,
    pub labels: Vec<u32>,
    pub predictions: Vec<u32>,
    pub n_layers: usize,
    pub n_classes: usize,
}

pub fn random_validation(seed: u64, n: usize, n_layers: usize, n_classes: usize) -> RandomValidation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quality: Vec<f64> = (0..n_layers).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut labels = Vec::with_capacity(n);
    let mut predictions = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..n_classes as u32);
        let p = if rng.random_bool(0.25) {
            rng.random_range(0..n_classes as u32)
        } else {
            y
        };
        let row: Vec<LayerInference> = (0..n_layers)
            .map(|l| {
                let target = if rng.random_bool(quality[l]) {
                    y
                } else {
                    rng.random_range(0..n_classes as u32)
                };
                let log_densities: Vec<f64> = (0..n_classes as u32)
                    .map(|c| {
                        let base = f64::from(rng.random_range(0..4u8));
                        -(if c == target { base } else { base + 2.0 })
                    })
                    .collect();
                let mut best = 0;
                for c in 1..n_classes {
                    if log_densities[c] > log_densities[best] {
                        best = c;
                    }
                }
                LayerInference {
                    inferred_class: best as u32,
                    log_densities,
                }
            })
            .collect();
        labels.push(y);
        predictions.push(p);
        rows.push(row);
    }
    RandomValidation {
        table: InferenceTable::from_rows(n_layers, n_classes, &rows),
        labels,
        predictions,
        n_layers,
        n_classes,
    }
}

/// Every non-empty layer subset as a sorted list, ordered by size and then
/// lexicographically, which is also the preference order among equal scores.
pub fn all_subsets(n_layers: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..(1 << n_layers))
        .map(|mask| (0..n_layers).filter(|&l| mask >> l & 1 == 1).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

fn raw_vote(row: &[u32], layers: &[usize], y_hat: u32) -> bool {
    let agree = layers.iter().filter(|&&l| row[l] == y_hat).count();
    layers.len() - agree >= agree
}

/// Brute-force alarm selection: per predicted class, the subset with the
/// highest F1 (compared as exact fractions), first in [`all_subsets`] order
/// among ties. Classes never predicted fall back to all layers with F1 0.
pub fn brute_alarm(v: &RandomValidation) -> Vec<(Vec<usize>, f64)> {
    let subsets = all_subsets(v.n_layers);
    (0..v.n_classes as u32)
        .map(|c| {
            let members: Vec<usize> = (0..v.labels.len()).filter(|&i| v.predictions[i] == c).collect();
            if members.is_empty() {
                return ((0..v.n_layers).collect(), 0.0);
            }
            let mut best: Option<(u64, u64, &Vec<usize>)> = None;
            for s in &subsets {
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for &i in &members {
                    let alarm = raw_vote(v.table.row(i), s, c);
                    let wrong = v.labels[i] != c;
                    match (alarm, wrong) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                let (num, den) = if 2 * tp + fp + fn_ == 0 {
                    (0, 1)
                } else {
                    (2 * tp, 2 * tp + fp + fn_)
                };
                let better = match best {
                    None => true,
                    Some((bn, bd, _)) => u128::from(num) * u128::from(bd) > u128::from(bn) * u128::from(den),
                };
                if better {
                    best = Some((num, den, s));
                }
            }
            let (num, den, s) = best.unwrap();
            (s.clone(), num as f64 / den as f64)
        })
        .collect()
}

fn brute_majority(table: &InferenceTable, i: usize, layers: &[usize]) -> u32 {
    let n_classes = table.n_classes();
    let mut best: Option<(usize, f64, u32)> = None;
    for c in 0..n_classes as u32 {
        let votes = layers.iter().filter(|&&l| table.row(i)[l] == c).count();
        let sum: f64 = layers
            .iter()
            .map(|&l| table.log_density(i, l, c as usize).unwrap())
            .sum();
        let better = match best {
            None => true,
            Some((bv, bs, _)) => votes > bv || (votes == bv && sum > bs),
        };
        if better {
            best = Some((votes, sum, c));
        }
    }
    best.unwrap().2
}

pub struct BruteAdvice {
    pub pos_layers: Vec<Vec<Vec<usize>>>,
    pub neg_layers: Vec<Vec<Vec<usize>>>,
    pub w_pos: Vec<Vec<f64>>,
    pub w_neg: Vec<Vec<f64>>,
}

/// Brute-force advice selection given the alarm layers per class.
pub fn brute_advice(v: &RandomValidation, alarm_layers: &[Vec<usize>]) -> BruteAdvice {
    let subsets = all_subsets(v.n_layers);
    let mut out = BruteAdvice {
        pos_layers: vec![],
        neg_layers: vec![],
        w_pos: vec![],
        w_neg: vec![],
    };
    for c_p in 0..v.n_classes as u32 {
        let members: Vec<usize> = (0..v.labels.len()).filter(|&i| v.predictions[i] == c_p).collect();
        let pos: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| raw_vote(v.table.row(i), &alarm_layers[c_p as usize], c_p))
            .collect();
        let neg: Vec<usize> = members.iter().copied().filter(|i| !pos.contains(i)).collect();
        for (branch, layers_out, w_out) in [
            (&pos, &mut out.pos_layers, &mut out.w_pos),
            (&neg, &mut out.neg_layers, &mut out.w_neg),
        ] {
            let correct = branch.iter().filter(|&&i| v.labels[i] == c_p).count();
            let mut layer_row = vec![];
            let mut w_row = vec![];
            for c_t in 0..v.n_classes as u32 {
                let idx: Vec<usize> = branch.iter().copied().filter(|&i| v.labels[i] == c_t).collect();
                if idx.is_empty() {
                    layer_row.push(alarm_layers[c_p as usize].clone());
                    w_row.push(0.0);
                    continue;
                }
                let mut best: Option<(usize, &Vec<usize>)> = None;
                for s in &subsets {
                    let hits = idx.iter().filter(|&&i| brute_majority(&v.table, i, s) == c_t).count();
                    if best.is_none_or(|(b, _)| hits > b) {
                        best = Some((hits, s));
                    }
                }
                let (hits, s) = best.unwrap();
                let acc = hits as f64 / idx.len() as f64;
                let denom = if c_t == c_p {
                    branch.len() as f64
                } else {
                    branch.len() as f64 - correct as f64
                };
                layer_row.push(s.clone());
                w_row.push(if denom <= 0.0 {
                    0.0
                } else {
                    idx.len() as f64 * acc / denom
                });
            }
            layers_out.push(layer_row);
            w_out.push(w_row);
        }
    }
    out
}

/// Average ranks by a direct count: rank = 1 + #smaller + (#equal - 1) / 2.
pub fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Spearman's rho as the Pearson correlation of naive average ranks,
/// computed with an explicit double loop over pairs.
pub fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (naive_ranks(x), naive_ranks(y));
    let n = x.len();
    // Σ_i Σ_j (rx_i - rx_j)(ry_i - ry_j) = 2n Σ (rx - mean)(ry - mean).
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            sxy += (rx[i] - rx[j]) * (ry[i] - ry[j]);
            sxx += (rx[i] - rx[j]).powi(2);
            syy += (ry[i] - ry[j]).powi(2);
        }
    }
    sxy / (sxx * syy).sqrt()
}

/// Published confusion rows with their printed percentages (TPR, FPR, F1).
pub const PUBLISHED_ROWS: [(&str, [u64; 4], [&str; 3]); 10] = [
    (
        "fmnist random layers",
        [280, 482, 8893, 345],
        ["44.80", "5.14", "40.37"],
    ),
    ("fmnist full layers", [209, 230, 9145, 416], ["33.44", "2.45", "39.29"]),
    (
        "fmnist selected layers",
        [317, 329, 9046, 308],
        ["50.72", "3.51", "49.88"],
    ),
    (
        "driving random layers",
        [112, 3059, 5180, 10],
        ["91.80", "37.13", "6.80"],
    ),
    ("driving full layers", [99, 2596, 5643, 23], ["81.15", "31.51", "7.03"]),
    (
        "driving selected layers",
        [116, 2978, 5261, 6],
        ["95.08", "36.15", "7.21"],
    ),
    (
        "fmnist without boosting",
        [402, 323, 8951, 324],
        ["55.37", "3.48", "55.41"],
    ),
    ("fmnist with boosting", [376, 91, 9183, 350], ["51.79", "0.98", "63.03"]),
    (
        "cifar100 without boosting",
        [2571, 930, 6022, 477],
        ["84.35", "13.38", "78.52"],
    ),
    (
        "cifar100 with boosting",
        [2468, 493, 6459, 580],
        ["80.97", "7.09", "82.14"],
    ),
];

/// Alarm, label and prediction vectors realizing the given confusion counts.
pub fn vectors_for_counts(counts: [u64; 4]) -> (Vec<bool>, Vec<u32>, Vec<u32>) {
    let [tp, fp, tn, fn_] = counts;
    let mut alarms = vec![];
    let mut labels = vec![];
    let mut preds = vec![];
    for (n, alarm, wrong) in [
        (tp, true, true),
        (fp, true, false),
        (tn, false, false),
        (fn_, false, true),
    ] {
        for _ in 0..n {
            alarms.push(alarm);
            preds.push(0);
            labels.push(u32::from(wrong));
        }
    }
    (alarms, labels, preds)
}
