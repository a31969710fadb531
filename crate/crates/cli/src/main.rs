//! `kgsynth`: stage-by-stage driver for the synthetic trajectory pipeline.
//!
//! Metrics go to stdout as `key=value` lines; failures print one
//! `error: <kind>: <message>` line to stderr and exit with status 1
//! (status 2 for config problems).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kgsynth::pipeline::{self, Metrics, RunConfig, RunDir, TrainOptions};
use kgsynth::{exec, Error};

#[derive(Parser)]
#[command(name = "kgsynth", version, about = "Knowledge-graph guided synthetic clinical trajectories")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the run directory of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the knowledge graph into kg/.
    GenKg,
    /// Simulate the cohort and write chronological splits into cohort/.
    Simulate,
    /// Compute the meta-path profile into profile/.
    Profile,
    /// Train the denoiser into ckpt/.
    Train {
        /// Continue from ckpt/checkpoint.json.
        #[arg(long)]
        resume: bool,
        /// Stop once this many steps are complete.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Generate synthetic trajectories into synth/.
    Sample,
    /// Score synthetic trajectories into eval/.
    Evaluate,
    /// Run the guidance-strength sweep into sweep/.
    Sweep,
    /// Every stage from gen-kg to evaluate.
    Run,
    /// Check the config and list every problem.
    ValidateConfig,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::UnknownNode(_) => "unknown_node",
        Error::DuplicateNode(_) => "duplicate_node",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Shape(_) => "shape",
        Error::NonFinite(_) => "non_finite",
        Error::VocabMismatch(_) => "vocab_mismatch",
        Error::Empty(_) => "empty",
        Error::Version { .. } => "version",
        Error::MissingArtifact { .. } => "missing_artifact",
        Error::Config(_) => "config",
        Error::Cell { .. } => "sweep_cell",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.sweep.workers = Some(w);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Metrics, Error> {
    let cfg = load_config(cli)?;
    cfg.validate()?;
    if let Some(w) = cfg.sweep.workers {
        exec::configure_workers(w);
    }
    let dir = RunDir::new(&cfg.out_dir);
    match &cli.command {
        Command::ValidateConfig => Ok(Vec::new()),
        Command::GenKg => pipeline::stage_gen_kg(&cfg, &dir),
        Command::Simulate => pipeline::stage_simulate(&cfg, &dir),
        Command::Profile => pipeline::stage_profile(&cfg, &dir),
        Command::Train { resume, until } => pipeline::stage_train(
            &cfg,
            &dir,
            TrainOptions {
                resume: *resume,
                until: *until,
            },
        ),
        Command::Sample => pipeline::stage_sample(&cfg, &dir),
        Command::Evaluate => pipeline::stage_evaluate(&cfg, &dir).map(|(m, _)| m),
        Command::Sweep => pipeline::stage_sweep(&cfg, &dir).map(|(m, _)| m),
        Command::Run => pipeline::run_all(&cfg, &dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(metrics) => {
            if matches!(cli.command, Command::ValidateConfig) {
                println!("ok");
            }
            if pipeline::write_metrics(std::io::stdout().lock(), &metrics).is_err() {
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {}: {line}", error_kind(&e));
            if matches!(e, Error::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
