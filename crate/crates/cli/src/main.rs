use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fidelity_explore::harness::{
    collect_warm_samples, coverage_curves_csv, default_workers, matrix_jobs, run_episode_detailed, run_matrix,
    run_matrix_records, warm_start_fit, Config, VariantTag,
};
use fidelity_explore::metrics::{episode_metrics, read_jsonl, to_csv, write_jsonl};

#[derive(Parser)]
#[command(name = "fidex", version, about = "Multi-robot frontier exploration benchmarks")]
struct Cli {
    /// TOML configuration file; every key can be overridden with trailing
    /// `--section.key=value` arguments.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to $FIDEX_WORKERS or the CPU count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single episode and print its metrics as JSON.
    Run {
        #[arg(long, default_value = "Full")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON-lines episode log here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Run the `[matrix]` experiment grid and write the aggregate CSV.
    Matrix {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report per-episode wall time (breaks byte-identical reruns).
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Fit warm gate parameters on cold, adaptive rollouts.
    Warmstart {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        seeds: u64,
        #[arg(long, default_value_t = 1_000_000)]
        first_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "16,64,128")]
        obstacles: Vec<usize>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Recompute metrics from a JSON-lines episode log.
    Replay {
        log: PathBuf,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Per-step coverage curves of the `[matrix]` grid as CSV.
    EmitPlotData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    let load = |rest: &Overrides| Config::load(cli.config.as_deref(), &rest.overrides);
    let workers = cli.workers.unwrap_or_else(default_workers);
    match &cli.command {
        Command::Run { variant, seed, log, rest } => {
            let config = load(rest)?;
            let tag: VariantTag = variant.parse()?;
            let warm = config.gate.warm_params()?;
            let out = run_episode_detailed(&config, tag, *seed, &warm)?;
            if let Some(path) = log {
                let file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
                write_jsonl(&out.record, file)?;
            }
            let metrics = episode_metrics(&out.record, &config.objective);
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Matrix { out, timing, rest } => {
            let config = load(rest)?;
            let jobs = matrix_jobs(&config)?;
            log::info!("running {} episodes on {workers} workers", jobs.len());
            let rows = run_matrix(&jobs, &config.gate.warm_params()?, workers, *timing);
            let mut w = output(out.as_deref())?;
            w.write_all(to_csv(&rows)?.as_bytes())?;
            w.flush()?;
        }
        Command::Warmstart { out, seeds, first_seed, obstacles, rest } => {
            let config = load(rest)?;
            let seed_list: Vec<u64> = (*first_seed..first_seed + seeds).collect();
            let samples = collect_warm_samples(&config, &seed_list, obstacles, workers)?;
            let report = warm_start_fit(&samples, &config.gate.cold_params())?;
            log::info!(
                "fitted {} samples ({} positive) in {} iterations: loss {:.6}, accuracy {:.4}",
                report.samples,
                report.positives,
                report.iterations,
                report.loss,
                report.accuracy
            );
            report.params.save(out)?;
            eprintln!(
                "wrote {} ({} samples, {} positive, accuracy {:.4})",
                out.display(),
                report.samples,
                report.positives,
                report.accuracy
            );
        }
        Command::Replay { log, rest } => {
            let config = load(rest)?;
            let file = File::open(log).with_context(|| format!("opening {}", log.display()))?;
            let record = read_jsonl(BufReader::new(file))?;
            println!("{}", serde_json::to_string_pretty(&episode_metrics(&record, &config.objective))?);
        }
        Command::EmitPlotData { out, rest } => {
            let config = load(rest)?;
            let jobs = matrix_jobs(&config)?;
            let records = run_matrix_records(&jobs, &config.gate.warm_params()?, workers);
            let runs: Vec<_> =
                records.into_iter().zip(&jobs).filter_map(|((r, _), job)| r.map(|r| (job.label(), r))).collect();
            let mut w = output(out.as_deref())?;
            w.write_all(coverage_curves_csv(&runs).as_bytes())?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<fidelity_explore::Error>() {
                Some(fidelity_explore::Error::Config(_)) | Some(fidelity_explore::Error::Parse(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
