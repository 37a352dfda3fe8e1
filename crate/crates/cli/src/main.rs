use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use edge_grpo::analytics::{analyze_log, export_csv};
use edge_grpo::trainer::{train, Mode};

mod config;

use config::{load_config, Manifest, Overrides, RunRecord};

#[derive(Parser)]
#[command(name = "edge-grpo", version, about = "EDGE-GRPO training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train all four modes (vanilla, force-r, force-r-eda, edge) on a shared seed.
    GecAblate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reflection, RCM and calibration report for a JSONL response log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export metric columns as CSV.
    Export {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: edge_grpo::Error| e.to_string())
}

fn run_train(config_path: &Path, overrides: &Overrides, out: &Path) -> Result<()> {
    let config = load_config(config_path, overrides)?;
    let summary = train(&config, out).with_context(|| format!("training {}", config.mode))?;
    let record = RunRecord::new(&config, &summary)?;
    let manifest = Manifest::new(config_path, vec![record]).write(out)?;
    println!(
        "{}: eval accuracy {:.3} -> {:.3}, mean advantage variance {:.4}",
        config.mode,
        summary.initial_eval_accuracy,
        summary.final_eval_accuracy,
        summary.mean_advantage_variance
    );
    println!("metrics: {}", summary.metrics_path.display());
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn run_ablation(config_path: &Path, overrides: &Overrides, out: &Path) -> Result<()> {
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        let overrides = Overrides {
            mode: Some(mode),
            ..overrides.clone()
        };
        let config = load_config(config_path, &overrides)?;
        let summary = train(&config, out).with_context(|| format!("training {mode}"))?;
        println!(
            "{:<12} eval {:.3}  mean advantage variance {:.4}  collapsed {:.3}",
            mode.name(),
            summary.final_eval_accuracy,
            summary.mean_advantage_variance,
            summary.collapsed_fraction
        );
        runs.push(RunRecord::new(&config, &summary)?);
    }
    let manifest = Manifest::new(config_path, runs).write(out)?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

/// Prints to stdout, treating a closed pipe as success.
fn print_stdout(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.context("cannot write to stdout"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            mode,
            seed,
            steps,
            out,
        } => run_train(&config, &Overrides { mode, seed, steps }, &out),
        Command::GecAblate {
            config,
            seed,
            steps,
            out,
        } => run_ablation(
            &config,
            &Overrides {
                mode: None,
                seed,
                steps,
            },
            &out,
        ),
        Command::Analyze { log, report } => {
            let analysis = analyze_log(&log)?;
            let text = serde_json::to_string_pretty(&analysis)?;
            match report {
                Some(path) => std::fs::write(&path, text + "\n")
                    .with_context(|| format!("cannot write {}", path.display()))?,
                None => print_stdout(&text)?,
            }
            if analysis.malformed_lines > 0 {
                eprintln!("skipped {} malformed line(s)", analysis.malformed_lines);
            }
            Ok(())
        }
        Command::Export {
            metrics,
            columns,
            out,
        } => {
            let rows = export_csv(&metrics, &columns, &out)?;
            println!("wrote {rows} row(s) to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
