//! `selfcheck`: train and deploy layer-wise self-checking for a classifier
//! from feature dumps on disk.
//!
//! Exit codes: `0` on success (alarms are data, not failures), `1` on data or
//! validation errors, `2` on usage errors.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::debug;
use selfcheck_core::pipeline;
use selfcheck_core::regression::{Direction, DEFAULT_EPSILON};
use selfcheck_core::{SearchOptions, SearchStrategy, SynthConfig, DEFAULT_T_VAR};

#[derive(Parser, Debug)]
#[command(
    name = "selfcheck",
    version,
    about = "Layer-wise density monitoring for deployed classifiers"
)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, env = "SELFCHECK_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SearchArgs {
    /// Layer-subset search strategy.
    #[arg(long, default_value = "exhaustive", value_parser = ["exhaustive", "greedy"])]
    search: String,
    /// Largest layer subset to consider.
    #[arg(long)]
    max_subset_size: Option<usize>,
    /// Wall-clock budget per search, in seconds; the best subset so far wins.
    #[arg(long)]
    time_budget_sec: Option<f64>,
}

impl SearchArgs {
    fn options(&self) -> anyhow::Result<SearchOptions> {
        let strategy: SearchStrategy = self.search.parse()?;
        let time_budget = match self.time_budget_sec {
            Some(s) if !(s > 0.0 && s.is_finite()) => anyhow::bail!("--time-budget-sec must be positive"),
            Some(s) => Some(Duration::from_secs_f64(s)),
            None => None,
        };
        Ok(SearchOptions {
            strategy,
            max_subset_size: self.max_subset_size,
            time_budget,
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit per-layer, per-class densities on the training dump.
    FitKde {
        #[arg(long)]
        train: PathBuf,
        /// Run directory that receives `bundle/`.
        #[arg(long, alias = "run")]
        out: PathBuf,
        /// Minimum column variance kept by the feature filter.
        #[arg(long, default_value_t = DEFAULT_T_VAR)]
        t_var: f64,
    },
    /// Infer a class per layer for every instance of a dump.
    InferLayers {
        #[arg(long, alias = "out")]
        run: PathBuf,
        /// Dump directory (any split).
        #[arg(long)]
        data: PathBuf,
    },
    /// Choose the alarm layers per predicted class on validation data.
    SelectAlarm {
        #[arg(long, alias = "out")]
        run: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Choose advice layers and weights on validation data.
    SelectAdvice {
        #[arg(long, alias = "out")]
        run: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Check every instance of a dump and write `verdicts.jsonl`.
    Check {
        #[arg(long, alias = "out")]
        run: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Score the verdicts against labels, with ablations and baselines.
    Evaluate {
        #[arg(long, alias = "out")]
        run: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Seed for the random-layer baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a one-row CSV summary here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Row tag for the CSV summary.
        #[arg(long, default_value = "selfcheck")]
        tag: String,
    },
    /// Fit a Gamma distribution to a raw float32 vector.
    GammaFit {
        /// Little-endian float32 file.
        #[arg(long)]
        input: PathBuf,
        /// Output JSON with shape, scale, loc and epsilon.
        #[arg(long)]
        out: PathBuf,
        /// Tail probability for the anomaly thresholds.
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Shift the sample onto the positive axis first (for values <= 0).
        #[arg(long)]
        shifted: bool,
    },
    /// Label a raw float32 vector normal (0) or anomalous (1).
    Binarize {
        #[arg(long)]
        input: PathBuf,
        /// Parameters written by `gamma-fit`.
        #[arg(long)]
        params: PathBuf,
        /// Output little-endian uint32 labels.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "above", value_parser = ["above", "below"])]
        direction: String,
    },
    /// Generate seeded synthetic train/valid/test dumps.
    SynthBench {
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().n_per_class)]
        n_per_class: usize,
        #[arg(long, default_value_t = SynthConfig::default().n_classes)]
        classes: usize,
        #[arg(long, default_value_t = SynthConfig::default().n_layers)]
        layers: usize,
        #[arg(long, default_value_t = SynthConfig::default().noise_layer_count)]
        noise_layers: usize,
        #[arg(long, default_value_t = SynthConfig::default().error_rate)]
        error_rate: f64,
    },
}

fn run(command: Command) -> anyhow::Result<serde_json::Value> {
    let summary = match command {
        Command::FitKde { train, out, t_var } => pipeline::fit_kde_stage(&train, &out, t_var)?,
        Command::InferLayers { run, data } => pipeline::infer_layers_stage(&run, &data)?,
        Command::SelectAlarm { run, valid, search } => pipeline::select_alarm_stage(&run, &valid, &search.options()?)?,
        Command::SelectAdvice { run, valid, search } => {
            pipeline::select_advice_stage(&run, &valid, &search.options()?)?
        }
        Command::Check { run, test } => pipeline::check_stage(&run, &test)?,
        Command::Evaluate {
            run,
            test,
            seed,
            csv,
            tag,
        } => pipeline::evaluate_stage(&run, &test, seed, csv.as_deref().map(|p| (p, tag.as_str())))?,
        Command::GammaFit {
            input,
            out,
            epsilon,
            shifted,
        } => pipeline::gamma_fit_stage(&input, &out, epsilon, shifted)?,
        Command::Binarize {
            input,
            params,
            out,
            direction,
        } => {
            let direction: Direction = direction.parse()?;
            pipeline::binarize_stage(&input, &params, direction, &out)?
        }
        Command::SynthBench {
            seed,
            out,
            n_per_class,
            classes,
            layers,
            noise_layers,
            error_rate,
        } => {
            let cfg = SynthConfig {
                seed,
                n_per_class,
                n_classes: classes,
                n_layers: layers,
                noise_layer_count: noise_layers,
                error_rate,
                ..SynthConfig::default()
            };
            pipeline::synth_bench_stage(&cfg, &out)?
        }
    };
    Ok(summary)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")
        {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
        debug!("using {n} worker threads");
    }
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
