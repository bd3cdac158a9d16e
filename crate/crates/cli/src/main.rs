use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use qspectro::experiment::{list_scenarios, preset, run_scenario, ExperimentConfig};
use qspectro::Error;

/// Noise spectroscopy experiment runner.
#[derive(Debug, Parser)]
#[command(name = "qspectro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a config file, or a preset name prefixed with `preset:`.
    Run {
        config: String,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's `output_dir`, else `out/<scenario>`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        workers: Option<usize>,
        /// Override the repetition count.
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// List the built-in scenarios.
    List,
    /// Print a preset as a config file.
    ExportConfig {
        preset: String,
        /// Write to this file instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn load(spec: &str) -> anyhow::Result<ExperimentConfig> {
    if let Some(name) = spec.strip_prefix("preset:") {
        return preset(name).with_context(|| format!("unknown preset `{name}` (see `qspectro list`)"));
    }
    Ok(ExperimentConfig::from_path(spec.as_ref())?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::List => {
            let scenarios = list_scenarios();
            let width = scenarios.iter().map(|s| s.0.len()).max().unwrap_or(0);
            for (name, description) in scenarios {
                println!("{name:width$}  {description}");
            }
        }
        Command::ExportConfig { preset: name, output } => {
            let cfg = preset(&name).with_context(|| format!("unknown preset `{name}` (see `qspectro list`)"))?;
            let text = cfg.to_toml();
            match output {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Run {
            config,
            seed,
            out_dir,
            workers,
            repetitions,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            if workers == Some(0) {
                anyhow::bail!("--workers must be at least 1");
            }
            let dir = out_dir
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(&cfg.scenario));
            let report = run_scenario(&cfg, workers)?;
            report.write_to(&dir)?;
            print!("{}", report.summary_text());
            eprintln!("wrote {} files to {}", report.artifacts.len() + 1, dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
