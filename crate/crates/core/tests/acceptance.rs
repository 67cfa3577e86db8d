//! Acceptance runner: one PASS/FAIL line per criterion, each with its own
//! tolerance and wall-clock budget. Exits non-zero if any hard criterion
//! fails; the latency target is reported but never fails the run.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    as_stored, brute_advice, brute_alarm, naive_spearman, oracle_log_density, random_cell, random_validation,
    single_cell_set, vectors_for_counts, PUBLISHED_ROWS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use selfcheck_core::evaluation::DEFAULT_RANDOM_DRAWS;
use selfcheck_core::kde::KdeCell;
use selfcheck_core::metrics::format_percent;
use selfcheck_core::regression::{binarize, Direction};
use selfcheck_core::{
    confusion, evaluate, fit_gamma, fit_kde, rates, select_advice_layers, select_alarm_layers, spearman, synth_bench,
    Checker, SearchOptions, SynthConfig, DEFAULT_T_VAR,
};

const KDE_CELLS: usize = 120;
const KDE_REL_TOL: f64 = 1e-10;
const QUADRATURE_CELLS: usize = 20;
const QUADRATURE_RANGE: (f64, f64) = (0.999, 1.001);
const SEARCH_SEEDS: u64 = 60;
const SYNTH_SEED: u64 = 7;
const SYNTH_PER_CLASS: usize = 2000;
const GAMMA_N: usize = 100_000;
const GAMMA_SHAPE_TOL: f64 = 0.05;
const GAMMA_SCALE_TOL: f64 = 0.1;
const QUANTILE_TOL: f64 = 1e-9;
const OUTLIER_RECALL: f64 = 0.9;
const SPEARMAN_TOL: f64 = 1e-12;
const LATENCY_TARGET: Duration = Duration::from_millis(50);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn metrics_exactness() -> Outcome {
    let mut bad = vec![];
    for (name, counts, printed) in PUBLISHED_ROWS {
        let (alarms, labels, preds) = vectors_for_counts(counts);
        let r = rates(&confusion(&alarms, &labels, &preds).unwrap());
        let got = [format_percent(r.tpr), format_percent(r.fpr), format_percent(r.f1)];
        if got != printed.map(String::from) {
            bad.push(format!("{name}: {got:?} != {printed:?}"));
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} published rows, mismatches: {:?}", PUBLISHED_ROWS.len(), bad),
    )
}

fn kde_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for _ in 0..KDE_CELLS {
        let m = rng.random_range(1..=50);
        let d = rng.random_range(1..=5);
        let rows = as_stored(&random_cell(&mut rng, m, d));
        let bundle = fit_kde(&single_cell_set(&rows), DEFAULT_T_VAR).unwrap();
        let mut queries: Vec<Vec<f64>> = (0..3).map(|_| rows[rng.random_range(0..m)].clone()).collect();
        queries.push((0..d).map(|_| rng.random_range(-4.0..4.0)).collect());
        for q in &queries {
            let got = bundle.log_density(0, 0, q).unwrap();
            let want = oracle_log_density(&rows, q, DEFAULT_T_VAR);
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
            checks += 1;
        }
    }
    outcome(
        worst <= KDE_REL_TOL,
        format!("{KDE_CELLS} cells, {checks} queries, worst relative error {worst:.2e} (tol {KDE_REL_TOL:e})"),
    )
}

fn kde_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut lo_seen, mut hi_seen) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..QUADRATURE_CELLS {
        let m = rng.random_range(1..=30);
        let rows: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (cell, _) = KdeCell::fit(&rows, 1, DEFAULT_T_VAR).unwrap();
        let sigma = cell.whitening()[0] * cell.bandwidth();
        let lo = rows.iter().copied().fold(f64::INFINITY, f64::min) - 12.0 * sigma;
        let hi = rows.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sigma;
        let steps = 20_000;
        let dx = (hi - lo) / steps as f64;
        let total: f64 = (0..=steps)
            .map(|k| {
                let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
                w * cell.log_density(&[lo + k as f64 * dx]).exp()
            })
            .sum::<f64>()
            * dx;
        lo_seen = lo_seen.min(total);
        hi_seen = hi_seen.max(total);
    }
    let (a, b) = QUADRATURE_RANGE;
    outcome(
        lo_seen >= a && hi_seen <= b,
        format!("{QUADRATURE_CELLS} cells, integrals in [{lo_seen:.6}, {hi_seen:.6}] (required [{a}, {b}])"),
    )
}

fn search_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = SearchOptions::default();
    let mut mismatches = vec![];
    for seed in 0..SEARCH_SEEDS {
        let n_layers = rng.random_range(1..=8);
        let n_classes = rng.random_range(1..=3);
        let n = rng.random_range(20..150);
        let v = random_validation(seed, n, n_layers, n_classes);
        let alarm = select_alarm_layers(&v.table, &v.labels, &v.predictions, n_classes, &opts).unwrap();
        let want_alarm = brute_alarm(&v);
        let alarm_ok = want_alarm
            .iter()
            .zip(&alarm.classes)
            .all(|((layers, f1), got)| &got.selected_layers == layers && (got.achieved_f1 - f1).abs() < 1e-15);
        let sets: Vec<Vec<usize>> = alarm.classes.iter().map(|c| c.selected_layers.clone()).collect();
        let advice = select_advice_layers(&v.table, &v.labels, &v.predictions, &alarm, n_classes, &opts).unwrap();
        let want = brute_advice(&v, &sets);
        let close = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .flatten()
                .zip(b.iter().flatten())
                .all(|(x, y)| (x - y).abs() < 1e-12)
        };
        let advice_ok = advice.pos_layers == want.pos_layers
            && advice.neg_layers == want.neg_layers
            && close(&advice.w_pos, &want.w_pos)
            && close(&advice.w_neg, &want.w_neg);
        if !(alarm_ok && advice_ok) {
            mismatches.push(seed);
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("{SEARCH_SEEDS} seeds (L<=8, C<=3), mismatching seeds: {mismatches:?}"),
    )
}

/// Runs the synthetic benchmark end to end and returns the median check
/// latency alongside the outcome.
fn end_to_end() -> (Outcome, Option<Duration>) {
    let cfg = SynthConfig {
        seed: SYNTH_SEED,
        n_per_class: SYNTH_PER_CLASS,
        ..SynthConfig::default()
    };
    let dumps = synth_bench(&cfg).unwrap();
    let bundle = fit_kde(&dumps.train, DEFAULT_T_VAR).unwrap();
    let valid = bundle.infer_layers(&dumps.valid).unwrap();
    let (vl, vp) = (dumps.valid.labels().unwrap(), dumps.valid.predictions());
    let opts = SearchOptions::default();
    let alarm = select_alarm_layers(&valid, vl, vp, cfg.n_classes, &opts).unwrap();
    let advice = select_advice_layers(&valid, vl, vp, &alarm, cfg.n_classes, &opts).unwrap();
    let checker = Checker::new(bundle, alarm.clone(), advice).unwrap();
    let batch = checker.check_batch(&dumps.test).unwrap();
    let test_table = checker.bundle().infer_layers(&dumps.test).unwrap();
    let (tl, tp) = (dumps.test.labels().unwrap(), dumps.test.predictions());
    let r = evaluate(&test_table, &batch.verdicts, tl, tp, &alarm, 0, DEFAULT_RANDOM_DRAWS).unwrap();

    let a = r.f1 > r.random_layers.f1_mean && r.f1 > r.full_layers.rates.f1;
    let b = r.counts.fp < r.no_boost.counts.fp;
    let c = r.advice_accuracy >= r.model_accuracy;
    let detail = format!(
        "n={} per split; (a) F1 {:.4} vs random {:.4}, full {:.4}: {}; (b) FP {} vs {} unboosted: {}; \
         (c) advice accuracy {:.4} vs model {:.4}: {}",
        dumps.test.n_instances(),
        r.f1,
        r.random_layers.f1_mean,
        r.full_layers.rates.f1,
        pass_word(a),
        r.counts.fp,
        r.no_boost.counts.fp,
        pass_word(b),
        r.advice_accuracy,
        r.model_accuracy,
        pass_word(c),
    );
    (outcome(a && b && c, detail), batch.median_latency())
}

fn gamma_adapter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let g = Gamma::new(2.0, 3.0).unwrap();
    let sample: Vec<f64> = (0..GAMMA_N).map(|_| g.sample(&mut rng)).collect();
    let fit = fit_gamma(&sample).unwrap();
    let refit_ok = (fit.shape - 2.0).abs() <= GAMMA_SHAPE_TOL && (fit.scale - 3.0).abs() <= GAMMA_SCALE_TOL;

    let mut worst_inv = 0.0f64;
    for p in [1e-4, 0.01, 0.05, 0.5, 0.95, 0.99, 1.0 - 1e-4] {
        worst_inv = worst_inv.max((fit.cdf(fit.quantile(p)) - p).abs());
    }

    let mut errors: Vec<f64> = sample[..9_500].to_vec();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let planted: Vec<f64> = (0..500).map(|_| 10.0 * mean * rng.random_range(1.0..1.2)).collect();
    errors.extend(&planted);
    let contaminated = fit_gamma(&errors).unwrap();
    let flagged = binarize(&planted, &contaminated, Direction::Above)
        .iter()
        .filter(|&&a| a)
        .count();
    let recall = flagged as f64 / planted.len() as f64;

    outcome(
        refit_ok && worst_inv <= QUANTILE_TOL && recall >= OUTLIER_RECALL,
        format!(
            "refit k={:.4} theta={:.4} (tol {GAMMA_SHAPE_TOL}/{GAMMA_SCALE_TOL}); cdf(quantile) error {worst_inv:.1e}; \
             planted outliers flagged {:.1}%",
            fit.shape,
            fit.scale,
            100.0 * recall
        ),
    )
}

fn spearman_check() -> Outcome {
    let x: Vec<f64> = (0..30).map(f64::from).collect();
    let up: Vec<f64> = x.iter().map(|v| v * v).collect();
    let down: Vec<f64> = x.iter().map(|v| -v).collect();
    let exact = spearman(&x, &up).unwrap().rho == 1.0 && spearman(&x, &down).unwrap().rho == -1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(3..60);
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8))).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let want = naive_spearman(&a, &b);
        if want.is_finite() {
            worst = worst.max((spearman(&a, &b).unwrap().rho - want).abs());
        }
    }
    outcome(
        exact && worst <= SPEARMAN_TOL,
        format!("perfect/reversed exact: {exact}; tied-rank worst error {worst:.1e} (tol {SPEARMAN_TOL:e})"),
    )
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn report(name: &str, budget: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    let elapsed = start.elapsed();
    let ok = o.pass && elapsed <= budget;
    println!(
        "{} {name}: {} [{:.2}s of {:.0}s budget]",
        pass_word(ok),
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    ok
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= report("metrics exactness", secs(1), metrics_exactness);
    ok &= report("kde oracle equivalence", secs(10), kde_oracle);
    ok &= report("kde normalization", secs(5), kde_normalization);
    ok &= report("search optimality", secs(60), search_optimality);
    let mut latency = None;
    ok &= report("end-to-end synthetic benchmark", secs(300), || {
        let (o, l) = end_to_end();
        latency = l;
        o
    });
    ok &= report("gamma adapter", secs(30), gamma_adapter);
    ok &= report("spearman", secs(1), spearman_check);
    match latency {
        Some(l) if l <= LATENCY_TARGET => println!(
            "PASS check latency (soft): median {:.3} ms per instance (target {} ms)",
            l.as_secs_f64() * 1e3,
            LATENCY_TARGET.as_millis()
        ),
        Some(l) => println!(
            "FAIL check latency (soft, not counted): median {:.3} ms per instance (target {} ms)",
            l.as_secs_f64() * 1e3,
            LATENCY_TARGET.as_millis()
        ),
        None => println!("FAIL check latency (soft, not counted): no measurement"),
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
