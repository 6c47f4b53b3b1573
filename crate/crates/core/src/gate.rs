//! Execution-fidelity gate.
//!
//! A per-robot logistic model maps eight local statistics to a fidelity
//! `p` in (0, 1). A dual-threshold counter switch turns `p` into the planner
//! (`true`) / reactive (`false`) branch selection, and a windowed surrogate
//! score supplies pseudo-labels for single-step online updates.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{ActionSet, Cell, CellState, GridMap};

pub const FEATURE_DIM: usize = 8;

/// Logistic gate parameters plus the online-update hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub weights: [f64; FEATURE_DIM],
    pub bias: f64,
    pub learning_rate: f64,
    pub l2: f64,
    pub margin: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams::cold(0.05, 1e-3, 0.5)
    }
}

impl GateParams {
    /// Zero weights and bias: `p = 0.5` everywhere.
    pub fn cold(learning_rate: f64, l2: f64, margin: f64) -> Self {
        GateParams { weights: [0.0; FEATURE_DIM], bias: 0.0, learning_rate, l2, margin }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite()) && self.bias.is_finite()
    }

    pub fn logit(&self, z: &FeatureVector) -> f64 {
        self.weights.iter().zip(z.0.iter()).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// Cross-entropy plus L2 penalty on the weights for one labelled sample.
    pub fn loss(&self, z: &FeatureVector, label: f64) -> f64 {
        let p = predict(self, z);
        let l2 = 0.5 * self.l2 * self.weights.iter().map(|w| w * w).sum::<f64>();
        -label * p.ln() - (1.0 - label) * (1.0 - p).ln() + l2
    }

    /// Analytic gradient of [`GateParams::loss`] with respect to `(w, b)`.
    pub fn gradient(&self, z: &FeatureVector, label: f64) -> ([f64; FEATURE_DIM], f64) {
        let residual = predict(self, z) - label;
        let mut gw = [0.0; FEATURE_DIM];
        for k in 0..FEATURE_DIM {
            gw[k] = residual * z.0[k] + self.l2 * self.weights[k];
        }
        (gw, residual)
    }

    /// Text format: a version line followed by the nine numbers
    /// `w1 .. w8 b`, one per line. `#` starts a comment.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from(GATE_FILE_HEADER);
        out.push('\n');
        for w in &self.weights {
            let _ = writeln!(out, "{w:?}");
        }
        let _ = writeln!(out, "{:?}", self.bias);
        out
    }

    /// Parses weights and bias; update hyperparameters are taken from `base`.
    pub fn from_file_str(text: &str, base: &GateParams) -> Result<Self> {
        let mut lines = text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty());
        match lines.next() {
            Some(GATE_FILE_HEADER) => {}
            other => return Err(Error::Parse(format!("expected {GATE_FILE_HEADER:?} header, found {other:?}"))),
        }
        let numbers = lines
            .flat_map(|l| l.split_whitespace())
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad gate parameter {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if numbers.len() != FEATURE_DIM + 1 {
            return Err(Error::Parse(format!("gate file needs {} numbers, found {}", FEATURE_DIM + 1, numbers.len())));
        }
        let mut params = base.clone();
        params.weights.copy_from_slice(&numbers[..FEATURE_DIM]);
        params.bias = numbers[FEATURE_DIM];
        if !params.is_finite() {
            return Err(Error::Parse("gate parameters must be finite".into()));
        }
        Ok(params)
    }

    pub fn load(path: &Path, base: &GateParams) -> Result<Self> {
        Self::from_file_str(&std::fs::read_to_string(path)?, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

pub const GATE_FILE_HEADER: &str = "gate-params v1";

/// Eight gate inputs, each in [0, 1]:
/// crowding, stuck flag, goal distance, feasible-action ratio, unknown ratio
/// around the robot, unknown ratio around the goal, blockage, planner flag.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

/// Numerically stable logistic, clamped away from exactly 0 and 1 so the
/// log-loss stays finite.
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

pub fn predict(params: &GateParams, z: &FeatureVector) -> f64 {
    sigmoid(params.logit(z))
}

/// Per-step record kept in the history window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Pose at the start of the step.
    pub from: Cell,
    /// Pose after the step's move.
    pub to: Cell,
    /// Unknown cells this robot revealed during the step.
    pub newly_seen: u32,
    /// Bounced by a dynamic obstacle entering the target cell.
    pub collision: bool,
    /// Move cancelled by conflict resolution against a teammate.
    pub violation: bool,
    /// The hysteresis switch changed state this step.
    pub switch_flip: bool,
    /// The planner branch was selected but could not produce a path.
    pub forced_fallback: bool,
}

/// Fixed-length FIFO of recent [`StepRecord`]s.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistoryBuffer {
    capacity: usize,
    records: VecDeque<StepRecord>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        HistoryBuffer { capacity: capacity.max(1), records: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn push(&mut self, record: StepRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.records.len() == self.capacity
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &StepRecord> + ExactSizeIterator {
        self.records.iter()
    }

    pub fn first(&self) -> Option<&StepRecord> {
        self.records.front()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.back()
    }

    /// No movement and no coverage gain over every record.
    pub fn is_stalled(&self) -> bool {
        !self.is_empty() && self.iter().all(|r| r.from == r.to && r.newly_seen == 0)
    }

    /// The robot has stayed within at most two cells for a full window.
    pub fn is_stuck(&self) -> bool {
        if !self.is_full() {
            return false;
        }
        let mut seen: Vec<Cell> = Vec::with_capacity(3);
        for r in self.iter() {
            for c in [r.from, r.to] {
                if !seen.contains(&c) {
                    seen.push(c);
                    if seen.len() > 2 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Inputs of [`extract_features`] for one robot.
#[derive(Debug, Clone, Copy)]
pub struct FeatureInputs<'a> {
    pub map: &'a GridMap,
    pub pose: Cell,
    pub team_size: usize,
    /// BFS distance from this robot to every teammate, `None` if unreachable.
    pub teammate_distances: &'a [Option<u32>],
    pub goal: Option<Cell>,
    /// BFS distance from the robot to its goal.
    pub goal_distance: Option<u32>,
    pub feasible: ActionSet,
    pub history: &'a HistoryBuffer,
    pub planner_ok: bool,
    pub sensing_radius: usize,
    pub interaction_radius: u32,
}

fn unknown_ratio(map: &GridMap, center: Cell, radius: usize) -> f64 {
    let (mut unk, mut total) = (0usize, 0usize);
    for c in map.window(center, radius) {
        total += 1;
        if map.get(c) == CellState::Unk {
            unk += 1;
        }
    }
    unk as f64 / total as f64
}

pub fn extract_features(inp: &FeatureInputs<'_>) -> FeatureVector {
    let map = inp.map;
    let crowding = if inp.team_size > 1 {
        let near = inp.teammate_distances.iter().filter(|d| matches!(d, Some(d) if *d <= inp.interaction_radius)).count();
        near as f64 / (inp.team_size - 1) as f64
    } else {
        0.0
    };
    let stuck = if inp.history.is_stuck() { 1.0 } else { 0.0 };
    let goal_distance = match (inp.goal, inp.goal_distance) {
        (Some(_), Some(d)) => d as f64 / (map.width() + map.height()) as f64,
        _ => 1.0,
    };
    let feasible_ratio = inp.feasible.len() as f64 / 5.0;
    let unknown_here = unknown_ratio(map, inp.pose, inp.sensing_radius);
    let unknown_goal = inp.goal.map_or(1.0, |g| unknown_ratio(map, g, inp.sensing_radius));
    let free_neighbors = map.neighbors4(inp.pose).filter(|n| map.get(*n) == CellState::Free).count();
    let blockage = 1.0 - free_neighbors as f64 / 4.0;
    let planner = if inp.planner_ok { 1.0 } else { 0.0 };
    let z = [crowding, stuck, goal_distance, feasible_ratio, unknown_here, unknown_goal, blockage, planner];
    FeatureVector(z.map(|x| x.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HysteresisConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    pub dwell: usize,
}

impl Default for HysteresisConfig {
    fn default() -> Self {
        HysteresisConfig { tau_high: 0.7, tau_low: 0.3, dwell: 3 }
    }
}

impl HysteresisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_low) || !(0.0..=1.0).contains(&self.tau_high) {
            return Err(Error::Config("hysteresis thresholds must lie in [0, 1]".into()));
        }
        if !(self.tau_high > self.tau_low) {
            return Err(Error::Config("tau_high must exceed tau_low".into()));
        }
        if self.dwell == 0 {
            return Err(Error::Config("dwell must be at least 1".into()));
        }
        Ok(())
    }
}

/// Dual-threshold switch with consecutive-step counters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    /// `true` selects the planner branch.
    pub planner: bool,
    pub high_count: usize,
    pub low_count: usize,
    pub config: HysteresisConfig,
    pub last_p: f64,
}

impl GateState {
    pub fn new(config: HysteresisConfig, planner: bool) -> Self {
        GateState { planner, high_count: 0, low_count: 0, config, last_p: 0.5 }
    }

    /// Feeds one fidelity sample. Returns `true` when the switch flipped.
    /// Both counters reset on a flip.
    pub fn update(&mut self, p: f64) -> bool {
        let HysteresisConfig { tau_high, tau_low, dwell } = self.config;
        self.high_count = if p >= tau_high { self.high_count + 1 } else { 0 };
        self.low_count = if p <= tau_low { self.low_count + 1 } else { 0 };
        assert!(self.high_count == 0 || self.low_count == 0, "tau_high must exceed tau_low");
        self.last_p = p;
        let flip = (!self.planner && self.high_count >= dwell) || (self.planner && self.low_count >= dwell);
        if flip {
            self.planner = !self.planner;
            self.high_count = 0;
            self.low_count = 0;
        }
        flip
    }
}

/// Functional form of [`GateState::update`].
pub fn update_hysteresis(state: &GateState, p: f64) -> GateState {
    let mut next = *state;
    next.update(p);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateWeights {
    pub coverage: f64,
    pub distance: f64,
    pub risk: f64,
    pub stall: f64,
}

impl Default for SurrogateWeights {
    fn default() -> Self {
        SurrogateWeights { coverage: 1.0, distance: 0.5, risk: 2.0, stall: 1.0 }
    }
}

impl SurrogateWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.coverage, self.distance, self.risk, self.stall];
        if all.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("surrogate weights must be positive".into()));
        }
        Ok(())
    }
}

/// Raw terms of the surrogate score over one window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowSummary {
    pub coverage_gain: f64,
    pub distance_gain: f64,
    pub risk: f64,
    pub stall: f64,
}

impl WindowSummary {
    /// `goal_distance` is the BFS distance to the current goal on the current
    /// map; the distance term is zero when either end is unreachable.
    pub fn from_history(history: &HistoryBuffer, goal_distance: impl Fn(Cell) -> Option<u32>) -> Self {
        let coverage_gain = history.iter().map(|r| r.newly_seen as f64).sum();
        let distance_gain = match (history.first(), history.last()) {
            (Some(first), Some(last)) => match (goal_distance(first.from), goal_distance(last.to)) {
                (Some(a), Some(b)) => a as f64 - b as f64,
                _ => 0.0,
            },
            _ => 0.0,
        };
        let risk = history.iter().map(|r| r.collision as u32 + r.violation as u32).sum::<u32>() as f64;
        let stall = if history.is_stalled() { 1.0 } else { 0.0 };
        WindowSummary { coverage_gain, distance_gain, risk, stall }
    }

    pub fn score(&self, w: &SurrogateWeights) -> f64 {
        w.coverage * self.coverage_gain + w.distance * self.distance_gain - w.risk * self.risk - w.stall * self.stall
    }
}

pub fn surrogate_score(history: &HistoryBuffer, weights: &SurrogateWeights, goal_distance: impl Fn(Cell) -> Option<u32>) -> f64 {
    WindowSummary::from_history(history, goal_distance).score(weights)
}

pub fn pseudo_label(q: f64) -> u8 {
    u8::from(q >= 0.0)
}

/// One margin-gated SGD step on the regularised log-loss. Leaves `params`
/// untouched and returns an error if the step would produce non-finite values.
pub fn online_update(params: &mut GateParams, z: &FeatureVector, p: f64, label: u8, q: f64) -> Result<bool> {
    if q.abs() < params.margin {
        return Ok(false);
    }
    let residual = p - f64::from(label);
    let mut next = params.clone();
    for k in 0..FEATURE_DIM {
        next.weights[k] -= params.learning_rate * (residual * z.0[k] + params.l2 * params.weights[k]);
    }
    next.bias -= params.learning_rate * residual;
    if !next.is_finite() {
        log::warn!("rejected non-finite gate update");
        return Err(Error::NonFiniteUpdate);
    }
    *params = next;
    Ok(true)
}
