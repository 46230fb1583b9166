//! `lindistill`: train students, evaluate risks and bounds, and run the
//! experiment pipelines from TOML configurations.
//!
//! Exit status: 0 on success, 1 on a runtime failure (including failed
//! verification checks), 2 on a usage or configuration error.

mod commands;
mod config;
mod manifest;
mod output;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{SecondsFormat, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use lindistill::experiments::{BiasConfig, GeometryConfig, MonotonicityConfig};
use serde::Serialize;

use crate::commands::Outcome;
use crate::config::{
    load, BoundConfig, ClosedFormConfig, CommandConfig, RiskConfig, TrainConfig, VerifyConfig,
};
use crate::manifest::{config_hash, RunManifest, MANIFEST_SCHEMA};

/// A run that did not complete.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration; nothing was computed.
    Config(String),
    /// The computation itself failed.
    Runtime(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<lindistill::Error> for Failure {
    fn from(e: lindistill::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lindistill",
    version,
    about = "Linear knowledge distillation laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory [default: runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Also write plot.svg (experiments only).
    #[arg(long, global = true)]
    plot: bool,

    /// Directory holding the four MNIST idx files.
    #[arg(long, global = true, env = "LINDISTILL_MNIST_DIR")]
    mnist_dir: Option<PathBuf>,

    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a shallow or deep student by gradient descent.
    Train,
    /// Compute the closed-form distillation solution.
    ClosedForm,
    /// Estimate the transfer risk of a learner over repeated trials.
    Risk,
    /// Evaluate the geometric risk bound, optimised over β.
    Bound,
    /// Run one of the experiment pipelines.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
    },
    /// Run the randomised property checks.
    Verify {
        /// Cases per check; overrides the configuration.
        #[arg(long)]
        cases: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExperimentName {
    Geometry,
    Bias,
    Monotonicity,
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Train => "train".into(),
            Command::ClosedForm => "closed-form".into(),
            Command::Risk => "risk".into(),
            Command::Bound => "bound".into(),
            Command::Experiment { name } => format!(
                "experiment-{}",
                name.to_possible_value()
                    .expect("no skipped variants")
                    .get_name()
            ),
            Command::Verify { .. } => "verify".into(),
        }
    }
}

/// A configuration ready to run, with its materialised form for the manifest.
struct Prepared<C> {
    cfg: C,
    seed: Option<u64>,
    value: serde_json::Value,
}

fn prepare<C: CommandConfig>(cli: &Cli) -> Result<Prepared<C>, Failure> {
    let mut cfg: C = load(cli.config.as_deref(), cli.seed)?;
    let seed = cfg.seed_mut().map(|s| *s);
    let value = to_value(&cfg)?;
    Ok(Prepared { cfg, seed, value })
}

fn to_value(cfg: &impl Serialize) -> Result<serde_json::Value, Failure> {
    serde_json::to_value(cfg).map_err(|e| Failure::Runtime(format!("cannot record config: {e}")))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn run(cli: &Cli) -> Result<(Outcome, RunManifest), Failure> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("cannot start thread pool: {e}")))?;
    }
    if cli.plot && !matches!(cli.command, Command::Experiment { .. }) {
        return Err(Failure::Config("--plot applies only to experiments".into()));
    }
    let started_at = now();
    let (outcome, seed, value) = match &cli.command {
        Command::Train => {
            let p = prepare::<TrainConfig>(cli)?;
            (commands::train(&p.cfg)?, p.seed, p.value)
        }
        Command::ClosedForm => {
            let p = prepare::<ClosedFormConfig>(cli)?;
            (commands::closed_form(&p.cfg)?, p.seed, p.value)
        }
        Command::Risk => {
            let p = prepare::<RiskConfig>(cli)?;
            (commands::risk(&p.cfg)?, p.seed, p.value)
        }
        Command::Bound => {
            let p = prepare::<BoundConfig>(cli)?;
            (commands::bound(&p.cfg)?, p.seed, p.value)
        }
        Command::Experiment { name } => match name {
            ExperimentName::Geometry => {
                let p = prepare::<GeometryConfig>(cli)?;
                (commands::geometry(&p.cfg, cli.plot)?, p.seed, p.value)
            }
            ExperimentName::Bias => {
                let p = prepare::<BiasConfig>(cli)?;
                let dir = cli.mnist_dir.as_deref();
                (commands::bias(&p.cfg, dir, cli.plot)?, p.seed, p.value)
            }
            ExperimentName::Monotonicity => {
                let p = prepare::<MonotonicityConfig>(cli)?;
                (commands::monotonicity(&p.cfg, cli.plot)?, p.seed, p.value)
            }
        },
        Command::Verify { cases } => {
            let mut p = prepare::<VerifyConfig>(cli)?;
            if let Some(cases) = *cases {
                if cases == 0 {
                    return Err(Failure::Config("--cases must be at least 1".into()));
                }
                p.cfg.cases = cases;
                p.value = to_value(&p.cfg)?;
            }
            (commands::verify(&p.cfg)?, p.seed, p.value)
        }
    };
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cli.command.name(),
        config_sha256: config_hash(&value),
        seed,
        threads: rayon::current_num_threads(),
        started_at,
        finished_at: now(),
        config: value,
        outputs: outcome.artifacts.names(),
        results: outcome.results.clone(),
        failures: outcome.failures,
        warnings: outcome.warnings.clone(),
    };
    Ok((outcome, manifest))
}

fn write(dir: &Path, outcome: &Outcome, manifest: &RunManifest) -> Result<(), Failure> {
    let mut json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Failure::Runtime(format!("cannot serialise manifest: {e}")))?;
    json.push(b'\n');
    outcome
        .artifacts
        .commit(dir, &json)
        .map_err(|e| Failure::Runtime(format!("cannot write to {}: {e}", dir.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    let result = run(&cli).and_then(|(outcome, manifest)| {
        write(&dir, &outcome, &manifest)?;
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", dir.display());
            let verify_failed =
                matches!(cli.command, Command::Verify { .. }) && outcome.failures > 0;
            if verify_failed {
                eprintln!("error: {} checks failed", outcome.failures);
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
