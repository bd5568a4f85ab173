//! `ifsl`: data generation, pretraining, meta-training, evaluation sweeps and
//! gradient checks for attention attractor networks.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod gradcheck;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ifsl_core::attractor::AttractorMode;
use ifsl_core::classifier::ClassifierKind;
use ifsl_core::exec::Execution;
use ifsl_core::meta::GradientMethod;

use commands::{Context, EvalArgs, SweepArgs, TrainArgs, Variant};
use config::{ExperimentConfig, InnerSection};
use error::CliError;

#[derive(Parser)]
#[command(name = "ifsl", version, about = "Incremental few-shot learning with attention attractors")]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (must exist).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config and IFSL_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation and hypergradient averaging.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(long, global = true, value_parser = parse_kind)]
    kind: Option<ClassifierKind>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding table.
    GenData,
    /// Pretrain the base classifier on the base-train rows.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Meta-train attractor parameters.
    MetaTrain(MetaTrainFlags),
    /// Evaluate variants and write a metrics CSV.
    Eval(EvalFlags),
    /// Run the hypergradient verification suite.
    Gradcheck(GradcheckFlags),
    /// Run the whole pipeline over a grid of settings.
    Sweep(SweepFlags),
}

#[derive(Args)]
struct MetaTrainFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, default_value = "attention", value_parser = parse_mode)]
    variant: AttractorMode,
    #[arg(long)]
    shots: Option<usize>,
    /// `rbp`, `tbptt:T` or `tbptt:T:alpha`.
    #[arg(long, value_parser = parse_grad)]
    grad: Option<GradientMethod>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Explicit meta-parameter file (single variant and shots only).
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Comma-separated: vanilla, static, attention, imprint, protonet.
    #[arg(long, value_delimiter = ',', default_value = "attention", value_parser = parse_variant)]
    variant: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    shots: Vec<usize>,
    /// Selects which trained model file is evaluated.
    #[arg(long, value_parser = parse_grad)]
    grad: Option<GradientMethod>,
    #[arg(long)]
    episodes: Option<usize>,
    /// `converged` or `steps:T[:alpha]`.
    #[arg(long, value_parser = parse_inner)]
    inner: Option<InnerSection>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckFlags {
    /// RBP damping; anything above 0 biases the hypergradient.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Relative tolerance of the finite-difference comparison.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    /// Emit results as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepFlags {
    #[arg(long, value_delimiter = ',', default_value = "vanilla,static,attention", value_parser = parse_variant)]
    variant: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    shots: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    base_classes: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_grad)]
    grad: Vec<GradientMethod>,
    #[arg(long, value_delimiter = ',', value_parser = parse_inner)]
    inner: Vec<InnerSection>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ClassifierKind, String> {
    s.parse().map_err(|e: ifsl_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<AttractorMode, String> {
    s.parse().map_err(|e: ifsl_core::Error| e.to_string())
}

fn parse_grad(s: &str) -> Result<GradientMethod, String> {
    s.parse().map_err(|e: ifsl_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_inner(s: &str) -> Result<InnerSection, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply_env()?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(kind) = cli.kind {
        config.model.kind = kind;
    }
    Ok(config)
}

fn init_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = base_config(&cli)?;
    init_workers(cli.workers)?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };

    match cli.command {
        Command::GenData => {
            config.validate()?;
            commands::gen_data(&Context { config, exec })
        }
        Command::Pretrain { data } => {
            config.validate()?;
            commands::pretrain(&Context { config, exec }, data)
        }
        Command::MetaTrain(f) => {
            if let Some(s) = f.shots {
                config.episode.shots = s;
            }
            if let Some(g) = f.grad {
                config.meta.gradient = g;
            }
            if let Some(s) = f.steps {
                config.meta.steps = s;
            }
            config.validate()?;
            let args = TrainArgs {
                data: f.data,
                base: f.base,
                variant: f.variant,
            };
            commands::meta_train_cmd(&Context { config, exec }, args)
        }
        Command::Eval(f) => {
            if let Some(g) = f.grad {
                config.meta.gradient = g;
            }
            if let Some(e) = f.episodes {
                config.eval.episodes = e;
            }
            if let Some(i) = f.inner {
                config.eval.inner = i;
            }
            config.validate()?;
            let shots = if f.shots.is_empty() { vec![config.episode.shots] } else { f.shots };
            let args = EvalArgs {
                data: f.data,
                base: f.base,
                meta: f.meta,
                variants: f.variant,
                shots,
                csv: f.csv,
            };
            commands::eval_cmd(&Context { config, exec }, args)
        }
        Command::Gradcheck(f) => {
            let opts = gradcheck::GradcheckOptions {
                epsilon: f.epsilon,
                fd_tol: f.tol,
                episodes: f.episodes,
                seed: config.seed,
                ..Default::default()
            };
            let results = gradcheck::run(&opts, exec)?;
            if f.json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                for r in &results {
                    let status = if r.passed { "PASS" } else { "FAIL" };
                    println!("{status} {:<32} error {:.3e} (tol {:.1e})", r.name, r.error, r.tolerance);
                }
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Check(format!("{failed} of {} checks failed", results.len())));
            }
            Ok(())
        }
        Command::Sweep(f) => {
            if let Some(e) = f.episodes {
                config.eval.episodes = e;
            }
            if let Some(s) = f.steps {
                config.meta.steps = s;
            }
            config.validate()?;
            let args = SweepArgs {
                variants: f.variant,
                shots: if f.shots.is_empty() { vec![config.episode.shots] } else { f.shots },
                base_classes: if f.base_classes.is_empty() {
                    vec![config.world.base_classes]
                } else {
                    f.base_classes
                },
                grads: if f.grad.is_empty() { vec![config.meta.gradient] } else { f.grad },
                inners: if f.inner.is_empty() { vec![config.eval.inner] } else { f.inner },
                csv: f.csv,
            };
            commands::sweep_cmd(&Context { config, exec }, args)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ifsl: {e}");
            e.exit_code()
        }
    }
}
