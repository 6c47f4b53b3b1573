//! Episode records, per-episode scoring and aggregation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, Cell};

/// One robot's slice of a step. `pose` is the cell at the start of the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotStep {
    pub pose: Cell,
    pub action: Action,
    /// Branch that produced the action before recovery: `true` is the planner.
    pub planner: bool,
    pub fidelity: f64,
    /// A recovery manoeuvre was executed this step.
    pub recovery: bool,
    /// A recovery was triggered this step.
    pub recovery_started: bool,
    pub collision: bool,
    pub goal: Option<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub robots: Vec<RobotStep>,
    /// Cells that left the unknown state during this step's sensing.
    pub newly_known: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub variant: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub team_size: usize,
    pub horizon: usize,
    /// Known cells after the initial sensing pass, before step 0.
    pub initial_known: u32,
    /// Post-repair static obstacle fraction of the ground truth.
    pub static_density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    /// First step at which no frontier remained.
    pub t_star: Option<usize>,
    /// Strict collision mode ended the episode on contact.
    pub strict_failure: bool,
    /// The episode panicked and was recorded as a failure.
    pub aborted: bool,
}

impl Outcome {
    pub fn success(&self) -> bool {
        self.t_star.is_some() && !self.strict_failure && !self.aborted
    }
}

/// Append-only log of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepLog>,
    pub outcome: Option<Outcome>,
}

impl EpisodeRecord {
    pub fn new(header: EpisodeHeader) -> Self {
        EpisodeRecord { header, steps: Vec::new(), outcome: None }
    }

    pub fn push(&mut self, step: StepLog) {
        assert_eq!(step.t, self.steps.len(), "step indices must be contiguous from 0");
        assert!(self.outcome.is_none(), "record is closed");
        self.steps.push(step);
    }

    pub fn finish(&mut self, outcome: Outcome) {
        self.outcome = Some(outcome);
    }

    /// Steps that count towards metrics: those before completion, or all of
    /// them when the episode never completed.
    pub fn scored_steps(&self) -> &[StepLog] {
        match self.outcome.and_then(|o| o.t_star) {
            Some(t) => &self.steps[..t.min(self.steps.len())],
            None => &self.steps,
        }
    }

    /// Cumulative known-cell count after the initial pass and after each step.
    pub fn known_curve(&self) -> Vec<u32> {
        let mut known = self.header.initial_known;
        let mut curve = vec![known];
        for s in &self.steps {
            known += s.newly_known;
            curve.push(known);
        }
        curve
    }
}

/// Fraction of visited cells that at least two distinct robots occupied.
pub fn overlap(record: &EpisodeRecord) -> Result<f64> {
    let mut visitors: HashMap<Cell, u64> = HashMap::new();
    for step in record.scored_steps() {
        for (i, r) in step.robots.iter().enumerate() {
            *visitors.entry(r.pose).or_default() |= 1 << (i % 64);
        }
    }
    if visitors.is_empty() {
        return Err(Error::UndefinedMetric("overlap needs at least one visited cell"));
    }
    // Large teams would alias in the bitmask; fall back to explicit sets.
    if record.header.team_size > 64 {
        let mut sets: HashMap<Cell, HashSet<usize>> = HashMap::new();
        for step in record.scored_steps() {
            for (i, r) in step.robots.iter().enumerate() {
                sets.entry(r.pose).or_default().insert(i);
            }
        }
        let shared = sets.values().filter(|s| s.len() >= 2).count();
        return Ok(shared as f64 / sets.len() as f64);
    }
    let shared = visitors.values().filter(|m| m.count_ones() >= 2).count();
    Ok(shared as f64 / visitors.len() as f64)
}

/// Weights of the completion-time and redundancy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveParams {
    pub alpha: f64,
    pub lambda_overlap: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams { alpha: 1.0, lambda_overlap: 0.1 }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > self.lambda_overlap && self.lambda_overlap >= 0.0) {
            return Err(Error::Config(format!(
                "objective weights need alpha > lambda_overlap >= 0, got {} and {}",
                self.alpha, self.lambda_overlap
            )));
        }
        Ok(())
    }
}

/// `alpha * t_star + lambda * overlap`; an undefined overlap counts as 0.
pub fn objective(t_star: usize, overlap: Option<f64>, params: &ObjectiveParams) -> f64 {
    params.alpha * t_star as f64 + params.lambda_overlap * overlap.unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub t_star: Option<usize>,
    /// Completion steps, set only for successful episodes.
    pub exploration_length: Option<usize>,
    pub overlap: Option<f64>,
    /// Uses the horizon in place of `t_star` for incomplete episodes.
    pub objective: f64,
    pub recoveries: usize,
    pub planner_fraction: f64,
    pub collisions: usize,
}

pub fn episode_metrics(record: &EpisodeRecord, params: &ObjectiveParams) -> EpisodeMetrics {
    let outcome = record.outcome.unwrap_or(Outcome { t_star: None, strict_failure: false, aborted: true });
    let success = outcome.success();
    let ov = overlap(record).ok();
    let steps = record.scored_steps();
    let robot_steps: usize = steps.iter().map(|s| s.robots.len()).sum();
    let planner_steps = steps.iter().flat_map(|s| &s.robots).filter(|r| r.planner).count();
    let recoveries = steps.iter().flat_map(|s| &s.robots).filter(|r| r.recovery_started).count();
    let collisions = steps.iter().flat_map(|s| &s.robots).filter(|r| r.collision).count();
    let completion = outcome.t_star.unwrap_or(record.header.horizon);
    EpisodeMetrics {
        success,
        t_star: outcome.t_star,
        exploration_length: if success { outcome.t_star } else { None },
        overlap: ov,
        objective: objective(completion, ov, params),
        recoveries,
        planner_fraction: if robot_steps == 0 { 0.0 } else { planner_steps as f64 / robot_steps as f64 },
        collisions,
    }
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(MeanStd { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6}±{:.6}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful episodes only.
    pub exploration_length: Option<MeanStd>,
    /// Over episodes with a defined overlap.
    pub overlap: Option<MeanStd>,
    pub recoveries: MeanStd,
    pub planner_fraction: MeanStd,
    pub wall_time: MeanStd,
}

/// Aggregates episodes; `wall_times` pairs with `metrics` by index.
pub fn summarize(metrics: &[EpisodeMetrics], wall_times: &[f64]) -> Result<Summary> {
    if metrics.is_empty() {
        return Err(Error::UndefinedMetric("summary needs at least one episode"));
    }
    let successes = metrics.iter().filter(|m| m.success).count();
    let el: Vec<f64> = metrics.iter().filter_map(|m| m.exploration_length).map(|v| v as f64).collect();
    let ov: Vec<f64> = metrics.iter().filter_map(|m| m.overlap).collect();
    let rec: Vec<f64> = metrics.iter().map(|m| m.recoveries as f64).collect();
    let pf: Vec<f64> = metrics.iter().map(|m| m.planner_fraction).collect();
    let wt: Vec<f64> = if wall_times.len() == metrics.len() { wall_times.to_vec() } else { vec![0.0; metrics.len()] };
    Ok(Summary {
        episodes: metrics.len(),
        successes,
        success_rate: successes as f64 / metrics.len() as f64,
        exploration_length: MeanStd::of(&el),
        overlap: MeanStd::of(&ov),
        recoveries: MeanStd::of(&rec).expect("non-empty"),
        planner_fraction: MeanStd::of(&pf).expect("non-empty"),
        wall_time: MeanStd::of(&wt).expect("non-empty"),
    })
}

pub const CSV_HEADER: &str = "variant,seed,SR,EL,overlap,recoveries,planner_fraction,wall_time";

/// One finished episode as it appears in the aggregate CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
    pub wall_time: f64,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-episode rows followed by one aggregate row per variant, in first
/// appearance order. Empty cells mark undefined values.
pub fn to_csv(rows: &[EpisodeRow]) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").expect("string write");
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    for variant in order {
        let group: Vec<&EpisodeRow> = rows.iter().filter(|r| r.variant == variant).collect();
        for r in &group {
            let m = &r.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{:.6}",
                r.variant,
                r.seed,
                u8::from(m.success),
                opt(m.exploration_length),
                opt(m.overlap.map(|v| format!("{v:.6}"))),
                m.recoveries,
                m.planner_fraction,
                r.wall_time
            )
            .expect("string write");
        }
        let metrics: Vec<EpisodeMetrics> = group.iter().map(|r| r.metrics).collect();
        let times: Vec<f64> = group.iter().map(|r| r.wall_time).collect();
        let s = summarize(&metrics, &times)?;
        writeln!(
            out,
            "{},aggregate,{:.6},{},{},{},{},{}",
            variant,
            s.success_rate,
            opt(s.exploration_length),
            opt(s.overlap),
            s.recoveries,
            s.planner_fraction,
            s.wall_time
        )
        .expect("string write");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header(EpisodeHeader),
    Step(StepLog),
    Outcome(Outcome),
}

/// Writes the record as JSON lines: a header, one object per step, and the
/// outcome if the episode finished.
pub fn write_jsonl(record: &EpisodeRecord, mut out: impl Write) -> Result<()> {
    serde_json::to_writer(&mut out, &LogLine::Header(record.header.clone()))?;
    writeln!(out)?;
    for s in &record.steps {
        serde_json::to_writer(&mut out, &LogLine::Step(s.clone()))?;
        writeln!(out)?;
    }
    if let Some(o) = record.outcome {
        serde_json::to_writer(&mut out, &LogLine::Outcome(o))?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<EpisodeRecord> {
    let mut record: Option<EpisodeRecord> = None;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line)?;
        match (parsed, record.as_mut()) {
            (LogLine::Header(h), None) => record = Some(EpisodeRecord::new(h)),
            (LogLine::Step(s), Some(r)) if r.outcome.is_none() && s.t == r.steps.len() => r.steps.push(s),
            (LogLine::Outcome(o), Some(r)) if r.outcome.is_none() => r.finish(o),
            _ => return Err(Error::Parse(format!("unexpected log line {}", n + 1))),
        }
    }
    record.ok_or_else(|| Error::Parse("log has no header".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(team: usize) -> EpisodeHeader {
        EpisodeHeader {
            variant: "test".into(),
            seed: 0,
            width: 10,
            height: 10,
            team_size: team,
            horizon: 100,
            initial_known: 5,
            static_density: 0.0,
        }
    }

    fn robot(pose: Cell) -> RobotStep {
        RobotStep {
            pose,
            action: Action::Stay,
            planner: true,
            fidelity: 0.5,
            recovery: false,
            recovery_started: false,
            collision: false,
            goal: None,
        }
    }

    fn record_from_paths(paths: &[Vec<Cell>], t_star: Option<usize>) -> EpisodeRecord {
        let mut rec = EpisodeRecord::new(header(paths.len()));
        let len = paths.iter().map(|p| p.len()).max().unwrap_or(0);
        for t in 0..len {
            let robots = paths.iter().map(|p| robot(p[t.min(p.len() - 1)])).collect();
            rec.push(StepLog { t, robots, newly_known: 1 });
        }
        rec.finish(Outcome { t_star, strict_failure: false, aborted: false });
        rec
    }

    #[test]
    fn overlap_hand_example() {
        let c = |k| Cell::new(0, k);
        let rec = record_from_paths(&[vec![c(1), c(1)], vec![c(1), c(2)], vec![c(3), c(3)]], None);
        assert!((overlap(&rec).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let rec = record_from_paths(&[vec![c(0), c(1)], vec![c(5), c(6)]], None);
        assert_eq!(overlap(&rec).unwrap(), 0.0);
    }

    #[test]
    fn overlap_excludes_visits_from_completion_on() {
        let c = |k| Cell::new(0, k);
        let rec = record_from_paths(&[vec![c(0), c(1), c(2)], vec![c(4), c(3), c(2)]], Some(2));
        assert_eq!(overlap(&rec).unwrap(), 0.0);
        let rec = record_from_paths(&[vec![c(0), c(1), c(2)], vec![c(4), c(3), c(2)]], None);
        assert!((overlap(&rec).unwrap() - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_undefined_without_visits() {
        let mut rec = EpisodeRecord::new(header(2));
        rec.finish(Outcome { t_star: Some(0), strict_failure: false, aborted: false });
        assert!(matches!(overlap(&rec), Err(Error::UndefinedMetric(_))));
        let m = episode_metrics(&rec, &ObjectiveParams::default());
        assert_eq!((m.objective, m.success, m.overlap), (0.0, true, None));
    }

    #[test]
    fn overlap_matches_tabulation_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..5);
            let len = rng.gen_range(1..30);
            let paths: Vec<Vec<Cell>> =
                (0..n).map(|_| (0..len).map(|_| Cell::new(rng.gen_range(0..4), rng.gen_range(0..4))).collect()).collect();
            let rec = record_from_paths(&paths, None);
            let mut kappa = [[0usize; 4]; 4];
            for r in 0..4 {
                for c in 0..4 {
                    kappa[r][c] = paths.iter().filter(|p| p.contains(&Cell::new(r, c))).count();
                }
            }
            let visited = kappa.iter().flatten().filter(|k| **k >= 1).count();
            let shared = kappa.iter().flatten().filter(|k| **k >= 2).count();
            let om = overlap(&rec).unwrap();
            assert_eq!(om, shared as f64 / visited as f64);
            assert!((0.0..=1.0).contains(&om));
            if n >= 2 {
                // Robot 1 steps onto a cell robot 0 already visited; everyone else holds.
                let mut more = paths.clone();
                for (i, p) in more.iter_mut().enumerate() {
                    let next = if i == 1 { paths[0][0] } else { *p.last().unwrap() };
                    p.push(next);
                }
                assert!(overlap(&record_from_paths(&more, None)).unwrap() >= om);
            }
        }
    }

    #[test]
    fn objective_examples() {
        let p = ObjectiveParams { alpha: 1.0, lambda_overlap: 0.0 };
        assert_eq!(objective(100, Some(0.4), &p), 100.0);
        assert_eq!(objective(0, None, &ObjectiveParams::default()), 0.0);
        assert!(ObjectiveParams { alpha: 0.1, lambda_overlap: 1.0 }.validate().is_err());
        assert!(ObjectiveParams::default().validate().is_ok());
    }

    fn metric(success: bool, el: usize, ov: f64, rec: usize, pf: f64) -> EpisodeMetrics {
        EpisodeMetrics {
            success,
            t_star: success.then_some(el),
            exploration_length: success.then_some(el),
            overlap: Some(ov),
            objective: 0.0,
            recoveries: rec,
            planner_fraction: pf,
            collisions: 0,
        }
    }

    #[test]
    fn summary_successful_runs_convention() {
        let s = summarize(&[metric(true, 10, 0.1, 0, 1.0), metric(false, 0, 0.3, 2, 0.0)], &[]).unwrap();
        assert_eq!(s.success_rate, 0.5);
        assert_eq!(s.exploration_length, Some(MeanStd { mean: 10.0, std: 0.0 }));
        let same = summarize(&[metric(true, 7, 0.2, 1, 0.5); 5], &[]).unwrap();
        assert_eq!(same.recoveries.std, 0.0);
        assert_eq!(same.overlap.unwrap().std, 0.0);
    }

    #[test]
    fn summary_matches_spreadsheet_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ms: Vec<EpisodeMetrics> = (0..20)
            .map(|_| metric(rng.gen_bool(0.7), rng.gen_range(1..500), rng.gen(), rng.gen_range(0..10), rng.gen()))
            .collect();
        let s = summarize(&ms, &[]).unwrap();
        // Two-pass textbook formulas, written out independently.
        let succ: Vec<f64> = ms.iter().filter(|m| m.success).map(|m| m.t_star.unwrap() as f64).collect();
        let mut total = 0.0;
        for v in &succ {
            total += v;
        }
        let mean = total / succ.len() as f64;
        let mut ss = 0.0;
        for v in &succ {
            ss += (v - mean).powi(2);
        }
        let el = s.exploration_length.unwrap();
        assert!((el.mean - mean).abs() < 1e-9);
        assert!((el.std - (ss / (succ.len() as f64 - 1.0)).sqrt()).abs() < 1e-9);
        assert_eq!(s.successes, succ.len());
        assert_eq!(s.success_rate * 20.0, succ.len() as f64);
        let pf_mean: f64 = ms.iter().map(|m| m.planner_fraction).sum::<f64>() / 20.0;
        assert!((s.planner_fraction.mean - pf_mean).abs() < 1e-12);
    }

    #[test]
    fn episode_metrics_counts() {
        let c = |k| Cell::new(0, k);
        let mut rec = record_from_paths(&[vec![c(0), c(1), c(2), c(3)]], None);
        rec.outcome = None;
        rec.steps[1].robots[0].planner = false;
        rec.steps[2].robots[0].recovery_started = true;
        rec.steps[2].robots[0].recovery = true;
        rec.finish(Outcome { t_star: Some(3), strict_failure: false, aborted: false });
        let m = episode_metrics(&rec, &ObjectiveParams::default());
        assert_eq!(m.recoveries, 1);
        assert!((m.planner_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.exploration_length, Some(3));
        assert_eq!(m.overlap, Some(0.0));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let c = |k| Cell::new(1, k);
        let mut rec = record_from_paths(&[vec![c(0), c(1)], vec![c(3), c(2)]], Some(2));
        rec.steps[0].robots[1].fidelity = 0.1 + 0.2;
        rec.steps[1].robots[0].goal = Some(Cell::new(4, 4));
        let mut buf = Vec::new();
        write_jsonl(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, rec);
        let p = ObjectiveParams::default();
        assert_eq!(episode_metrics(&back, &p), episode_metrics(&rec, &p));
    }

    #[test]
    fn jsonl_rejects_gaps() {
        let c = |k| Cell::new(1, k);
        let rec = record_from_paths(&[vec![c(0), c(1), c(2)]], None);
        let mut buf = Vec::new();
        write_jsonl(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let dropped: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 2).map(|(_, l)| l).collect();
        assert!(read_jsonl(dropped.join("\n").as_bytes()).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows: Vec<EpisodeRow> = (0..3)
            .map(|s| EpisodeRow { variant: "Full".into(), seed: s, metrics: metric(s != 1, 10, 0.25, 1, 0.5), wall_time: 0.0 })
            .collect();
        let csv = to_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "Full,0,1,10,0.250000,1,0.500000,0.000000");
        assert_eq!(lines[2], "Full,1,0,,0.250000,1,0.500000,0.000000");
        assert!(lines[4].starts_with("Full,aggregate,0.666667,10.000000±0.000000,"));
    }
}
