use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use noduleviz_core::config::RunConfig;
use noduleviz_core::evaluation::{format_report, MetricsReport};
use noduleviz_core::pipeline::{generate_phantom_source, run_pipeline, Stage, StageOutcome, METRICS, RUN_CONFIG};
use noduleviz_core::Error;

/// Nodule malignancy classification with manifestation heads and soft
/// activation maps.
#[derive(Debug, Parser)]
#[command(name = "noduleviz", version)]
struct Cli {
    /// Run configuration (TOML). Defaults to the run directory's saved
    /// config, then to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Requests deterministic execution (always the case on this backend;
    /// recorded in the run config).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Run directory, or the output directory of `phantom-generate`.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resample, normalise and crop a source cohort into patches.
    Prepare {
        /// Source cohort CSV; overrides `paths.cohort_csv`.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Write a synthetic source cohort with known manifestations.
    PhantomGenerate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the segmenter and write probability maps.
    Segment,
    /// Two-phase classifier training.
    Train,
    /// Test-split metrics, report and embeddings.
    Evaluate,
    /// Activation-map overlays and localization scores.
    Explain,
    /// Print the metrics report of a finished run.
    Report,
    /// Print the effective configuration as TOML.
    Config,
    /// Every stage in order; unchanged stages are skipped.
    Run {
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let saved = cli.out.join(RUN_CONFIG);
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if saved.is_file() => RunConfig::load(&saved)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn stages(cfg: &RunConfig, out: &Path, stages: &[Stage]) -> Result<()> {
    for StageOutcome { stage, skipped } in run_pipeline(cfg, out, stages)? {
        let state = if skipped { "up to date" } else { "done" };
        println!("{:<9} {state}", stage.name());
    }
    Ok(())
}

fn report(out: &Path) -> Result<()> {
    let path = out.join(METRICS);
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            path,
            hint: "run the `evaluate` stage first".into(),
        }
        .into());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let metrics: MetricsReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    print!("{}", format_report(&metrics));
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::PhantomGenerate { count } => {
            let mut cfg = load_config(&cli)?.phantom;
            if let Some(n) = count {
                cfg.cohort.count = *n;
            }
            if let Some(seed) = cli.seed {
                cfg.cohort.seed = seed;
            }
            let csv = generate_phantom_source(&cfg, &cli.out)?;
            println!("{}", csv.display());
        }
        Command::Report => report(&cli.out)?,
        Command::Config => print!("{}", load_config(&cli)?.to_toml_string()?),
        Command::Prepare { cohort } | Command::Run { cohort } => {
            let mut cfg = load_config(&cli)?;
            if let Some(c) = cohort {
                cfg.paths.cohort_csv = Some(fs::canonicalize(c).with_context(|| format!("cohort {}", c.display()))?);
            }
            let which: &[Stage] = match cli.command {
                Command::Run { .. } => &Stage::ALL,
                _ => &[Stage::Prepare],
            };
            stages(&cfg, &cli.out, which)?;
        }
        cmd => {
            let stage = match cmd {
                Command::Segment => Stage::Segment,
                Command::Train => Stage::Train,
                Command::Evaluate => Stage::Evaluate,
                _ => Stage::Explain,
            };
            stages(&load_config(&cli)?, &cli.out, &[stage])?;
        }
    }
    Ok(())
}
