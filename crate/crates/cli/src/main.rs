use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mlemtrl::experiment::{bounds_from_summary, gap_between, run_experiment, ModelFile, RunConfig, RunSummary};

#[derive(Parser, Debug)]
#[command(name = "mlemtrl", version, about = "Model transfer RL by maximum-likelihood mixing of source models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every (task, seed) pair of an experiment and write logs plus metrics.csv.
    Run {
        /// TOML run configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Environment steps per run (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate the performance-gap and concentration bounds for a finished run.
    Bounds {
        /// A run's `.summary.json`, or its `.jsonl` step log.
        run: PathBuf,
        /// Confidence parameter of the concentration bound.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Distance from a target model to the convex hull of a source set.
    Gap {
        /// JSON list of source models.
        #[arg(long)]
        sources: PathBuf,
        /// JSON target model of the same class.
        #[arg(long)]
        target: PathBuf,
    },
    /// Check run configs (`.toml`) and model files (`.json`) without running anything.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn summary_path(run: &Path) -> PathBuf {
    let name = run.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match name.strip_suffix(".jsonl") {
        Some(stem) => run.with_file_name(format!("{stem}.summary.json")),
        None => run.to_path_buf(),
    }
}

fn run(config: Option<PathBuf>, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    if let Some(workers) = workers {
        cfg.workers = workers;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(steps) = steps {
        cfg.steps = steps;
    }
    let report = run_experiment(&cfg)?;
    let n = report.summaries.len() as f64;
    let mean_final = report.summaries.iter().map(|s| s.final_regret).sum::<f64>() / n;
    let mean_tail = report.summaries.iter().map(|s| s.tail_mean_regret).sum::<f64>() / n;
    println!(
        "{} runs -> {} (mean final regret {mean_final:.6}, mean tail regret {mean_tail:.6})",
        report.summaries.len(),
        report.output_dir.display()
    );
    Ok(())
}

fn validate(files: &[PathBuf]) -> bool {
    let mut ok = true;
    for path in files {
        let result = if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(path).map(|c| format!("run config ({})", c.environment.kind()))
        } else {
            ModelFile::load(path).map(|m| match m {
                ModelFile::Tabular(t) => format!("tabular model ({} states, {} actions)", t.n_states(), t.n_actions()),
                ModelFile::Lqr(l) => format!("LQR model (state {}, action {})", l.dim_state(), l.dim_action()),
                ModelFile::TabularSet(v) => format!("{} tabular models", v.len()),
                ModelFile::LqrSet(v) => format!("{} LQR models", v.len()),
            })
        };
        match result {
            Ok(kind) => println!("ok    {}: {kind}", path.display()),
            Err(e) => {
                ok = false;
                println!("error {}: {e}", path.display());
            }
        }
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            out,
            steps,
        } => run(config, seed, workers, out, steps),
        Command::Bounds { run, delta } => (|| -> Result<()> {
            let summary = RunSummary::load(summary_path(&run))?;
            let report = bounds_from_summary(&summary, delta)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        })(),
        Command::Gap { sources, target } => (|| -> Result<()> {
            let (gap, w) = gap_between(&ModelFile::load(&sources)?, &ModelFile::load(&target)?)?;
            let out = serde_json::json!({ "realisability_gap": gap, "weights": w });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        })(),
        Command::Validate { files } => {
            if validate(&files) {
                Ok(())
            } else {
                Err(anyhow::anyhow!("validation failed"))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
