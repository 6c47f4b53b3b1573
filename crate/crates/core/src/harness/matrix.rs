//! Parallel experiment matrices.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;

use super::config::Config;
use super::episode::run_episode_detailed;
use super::VariantTag;
use crate::error::{Error, Result};
use crate::gate::GateParams;
use crate::metrics::{episode_metrics, EpisodeMetrics, EpisodeRecord, EpisodeRow};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "FIDEX_WORKERS";

pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n: &usize| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One episode of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub config: Config,
    pub tag: VariantTag,
    pub seed: u64,
}

impl Job {
    /// CSV label: the variant tag plus the scenario shape.
    pub fn label(&self) -> String {
        let s = &self.config.scenario;
        format!("{}@{}x{}/n{}/o{}", self.tag, s.width, s.height, s.robots, s.dynamic_obstacles)
    }
}

/// Expands the `[matrix]` section: team sizes, then obstacle counts, then
/// variants, then seeds, in that nesting order.
pub fn matrix_jobs(config: &Config) -> Result<Vec<Job>> {
    let m = &config.matrix;
    let tags = m.variants.iter().map(|v| v.parse::<VariantTag>()).collect::<Result<Vec<_>>>()?;
    if tags.is_empty() {
        return Err(Error::Config("matrix needs at least one variant".into()));
    }
    let robots = if m.robots.is_empty() { vec![config.scenario.robots] } else { m.robots.clone() };
    let counts = if m.dynamic_obstacles.is_empty() { vec![config.scenario.dynamic_obstacles] } else { m.dynamic_obstacles.clone() };
    let mut jobs = Vec::new();
    for &r in &robots {
        for &o in &counts {
            let mut c = config.clone();
            c.scenario.robots = r;
            c.scenario.dynamic_obstacles = o;
            c.validate()?;
            for tag in &tags {
                for seed in m.first_seed..m.first_seed + m.seeds {
                    jobs.push(Job { config: c.clone(), tag: *tag, seed });
                }
            }
        }
    }
    Ok(jobs)
}

fn failed_metrics() -> EpisodeMetrics {
    EpisodeMetrics {
        success: false,
        t_star: None,
        exploration_length: None,
        overlap: None,
        objective: f64::NAN,
        recoveries: 0,
        planner_fraction: 0.0,
        collisions: 0,
    }
}

/// Runs every job on a pool of `workers` threads. Output order follows
/// `jobs`. Panicking or erroring episodes are logged and come back as `None`.
pub fn run_matrix_records(jobs: &[Job], warm: &GateParams, workers: usize) -> Vec<(Option<EpisodeRecord>, f64)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let outcome = catch_unwind(AssertUnwindSafe(|| run_episode_detailed(&job.config, job.tag, job.seed, warm)));
                match outcome {
                    Ok(Ok(out)) => (Some(out.record), out.wall_time),
                    Ok(Err(e)) => {
                        log::error!("{} seed {}: {e}", job.label(), job.seed);
                        (None, 0.0)
                    }
                    Err(_) => {
                        log::error!("{} seed {}: episode panicked", job.label(), job.seed);
                        (None, 0.0)
                    }
                }
            })
            .collect()
    })
}

/// Runs the matrix and scores each episode. Wall times are reported only
/// when `timing` is set so that untimed CSVs are reproducible byte for byte.
pub fn run_matrix(jobs: &[Job], warm: &GateParams, workers: usize, timing: bool) -> Vec<EpisodeRow> {
    run_matrix_records(jobs, warm, workers)
        .into_iter()
        .zip(jobs)
        .map(|((record, wall), job)| EpisodeRow {
            variant: job.label(),
            seed: job.seed,
            metrics: record.as_ref().map_or_else(failed_metrics, |r| episode_metrics(r, &job.config.objective)),
            wall_time: if timing { wall } else { 0.0 },
        })
        .collect()
}

/// Per-step coverage curves: `variant,seed,t,known_cells,coverage`.
pub fn coverage_curves_csv(runs: &[(String, EpisodeRecord)]) -> String {
    let mut out = String::from("variant,seed,t,known_cells,coverage\n");
    for (label, rec) in runs {
        let total = (rec.header.width * rec.header.height) as f64;
        for (t, known) in rec.known_curve().iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{:.6}", label, rec.header.seed, t, known, *known as f64 / total);
        }
    }
    out
}
