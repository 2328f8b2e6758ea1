use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use logtgn::graph::HopSet;
use logtgn::harness::pipeline::{
    build_stage, detect_stage, embed_stage, eval_stage, parse_stage, run_pipeline, synthesize, train_stage, RunDir,
};
use logtgn::harness::RunConfig;

/// Event-level log anomaly detection with temporal graph networks.
#[derive(Debug, Parser)]
#[command(name = "logtgn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration. `LOGTGN_<SECTION>_<KEY>` variables override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only read the first N accepted lines.
    #[arg(long, global = true)]
    head_limit: Option<usize>,
    /// Hop distances, e.g. `0,1`.
    #[arg(long, global = true)]
    hops: Option<String>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mine templates and write the structured event stream.
    Parse {
        /// Log file; defaults to `data.input`.
        input: Option<PathBuf>,
    },
    /// Compute semantic vectors for all templates.
    Embed,
    /// Build co-occurrence counts and the train/test event streams.
    Build,
    /// Train the detector and store the checkpoint and memory.
    Train,
    /// Score the test stream and write per-event verdicts.
    Detect,
    /// Compare verdicts with labels.
    Eval,
    /// Write a labeled synthetic log.
    Synth,
    /// Run every stage; generates a synthetic corpus when no input is configured.
    Pipeline {
        input: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(k) = common.head_limit {
        cfg.data.head_limit = Some(k);
    }
    if let Some(hops) = &common.hops {
        cfg.train.hops = HopSet::parse(hops)?.hops().to_vec();
    }
    if let Some(t) = common.threshold {
        cfg.train.threshold = t;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_path(cfg: &RunConfig, arg: Option<PathBuf>) -> Result<PathBuf> {
    arg.or_else(|| cfg.data.input.clone())
        .context("no input log given (pass a path or set data.input)")
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let dir = RunDir::new(&cfg.out_dir);
    match cli.command {
        Command::Parse { input } => {
            let input = input_path(&cfg, input)?;
            let m = parse_stage(&cfg, &dir, &input)?;
            println!(
                "{} records, {} rejected, {} templates ({} in training), split at {}",
                m.records, m.rejected, m.n_templates, m.n_train_templates, m.split_index
            );
        }
        Command::Embed => {
            let misses = embed_stage(&cfg, &dir)?;
            println!("embedded templates, {misses} fallback vectors");
        }
        Command::Build => {
            let g = build_stage(&cfg, &dir)?;
            println!("{} train events, {} test events", g.train_events, g.test_events);
        }
        Command::Train => {
            let log = train_stage(&cfg, &dir)?;
            for e in &log.epochs {
                println!("epoch {} loss {:.4}", e.epoch, e.mean_loss);
            }
            println!("trained in {:.1}s", log.seconds);
        }
        Command::Detect => {
            let verdicts = detect_stage(&cfg, &dir, cli.common.threshold)?;
            let flagged = verdicts
                .iter()
                .filter(|v| v.verdict.decision == logtgn::detector::Decision::Anomaly)
                .count();
            println!("{} verdicts, {flagged} anomalous", verdicts.len());
        }
        Command::Eval => {
            println!("{}", eval_stage(&dir)?);
        }
        Command::Synth => {
            let path = synthesize(&cfg, &dir)?;
            println!("{}", path.display());
        }
        Command::Pipeline { input } => {
            if input.is_some() {
                cfg.data.input = input;
            }
            let outcome = run_pipeline(&cfg, &dir)?;
            println!("{}", outcome.report);
            println!("total time {:.1}s", outcome.seconds);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
