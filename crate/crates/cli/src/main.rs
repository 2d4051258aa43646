mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgAction, Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::stages::{Run, Stage};

/// Learns per-cell demand weights with a graph attention model and
/// allocates regional totals to facilities.
#[derive(Parser)]
#[command(name = "gridalloc", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset described by [synth].
    Synth,
    /// Load the inputs and lay out the grid (cells.json).
    Ingest,
    /// Build the region/cell graph (graph.json).
    BuildGraph,
    /// Train the weight model (checkpoint.json, loss_trace.csv, weights.csv).
    Train,
    /// Allocate regional totals with every method (allocations.csv).
    Allocate,
    /// Score allocations against ground truth (comparison.csv/.txt).
    Evaluate,
    /// Every stage in order.
    FullRun,
}

/// 2 for a missing file, 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let not_found = err.chain().any(|cause| {
        if let Some(gridalloc::Error::Io { source, .. }) = cause.downcast_ref::<gridalloc::Error>() {
            return source.kind() == std::io::ErrorKind::NotFound;
        }
        cause
            .downcast_ref::<std::io::Error>()
            .is_some_and(|e| e.kind() == std::io::ErrorKind::NotFound)
    });
    if not_found {
        2
    } else {
        1
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
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
    cfg.validate()?;
    Ok(cfg)
}

fn stages_for(cmd: Command, cfg: &RunConfig) -> Vec<Stage> {
    match cmd {
        Command::Synth => vec![Stage::Synth],
        Command::Ingest => vec![Stage::Ingest],
        Command::BuildGraph => vec![Stage::BuildGraph],
        Command::Train => vec![Stage::Train],
        Command::Allocate => vec![Stage::Allocate],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::FullRun => {
            let mut v = Vec::new();
            if cfg.synth.is_some() {
                v.push(Stage::Synth);
            }
            v.extend([
                Stage::Ingest,
                Stage::BuildGraph,
                Stage::Train,
                Stage::Allocate,
                Stage::Evaluate,
            ]);
            v
        }
    }
}

fn run_stages(cli: &Cli, cfg: RunConfig) -> Result<(), (Option<Stage>, anyhow::Error)> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
        .map_err(|e| (None, e))?;
    let manifest_path = out.join("manifest.json");
    let snapshot = serde_json::to_value(&cfg).map_err(|e| (None, e.into()))?;
    let mut manifest = Manifest::open(&manifest_path, cfg.seed, snapshot);
    let stages = stages_for(cli.command, &cfg);
    let run = Run::new(cfg);
    for stage in stages {
        let fail = |e: anyhow::Error| (Some(stage), e);
        info!("stage {}", stage.name());
        let start = Instant::now();
        let outputs = run.stage(stage).map_err(fail)?;
        let secs = start.elapsed().as_secs_f64();
        let mut inputs: Vec<&std::path::Path> = run.inputs.all();
        if let Some(c) = &cli.config {
            inputs.push(c);
        }
        manifest.record_inputs(&inputs).map_err(fail)?;
        let outs: Vec<&std::path::Path> = outputs.iter().map(|p| p.as_path()).collect();
        manifest.record_stage(stage.name(), secs, &out, &outs).map_err(fail)?;
        manifest.write(&manifest_path).map_err(fail)?;
        info!("stage {} done in {secs:.1}s", stage.name());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: configuration: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run_stages(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            match stage {
                Some(s) => eprintln!("error: stage {} failed: {e:#}", s.name()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
