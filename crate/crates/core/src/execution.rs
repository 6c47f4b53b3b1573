//! Action branches, arbitration, recovery and simultaneous-move resolution.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::HistoryBuffer;
use crate::gridworld::{ActionSet, Cell, CellState, GridMap};

pub use crate::gridworld::Action;

/// Output of the planner branch. `ok == false` always carries `Stay`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanResult {
    pub action: Action,
    pub ok: bool,
    /// Length of the planned path, when one exists.
    pub cost: Option<u32>,
}

impl PlanResult {
    pub const INFEASIBLE: PlanResult = PlanResult { action: Action::Stay, ok: false, cost: None };
}

/// A* over free, unblocked cells with the Manhattan heuristic. Returns the
/// first step of a shortest path.
pub fn plan_astar(map: &GridMap, start: Cell, goal: Option<Cell>, blocked: &[Cell]) -> PlanResult {
    let Some(goal) = goal else { return PlanResult::INFEASIBLE };
    if !map.is_free(start) || !map.is_free(goal) || blocked.contains(&goal) {
        return PlanResult::INFEASIBLE;
    }
    if start == goal {
        return PlanResult { action: Action::Stay, ok: true, cost: Some(0) };
    }
    let n = map.len();
    let mut passable: Vec<bool> = (0..n).map(|i| map.get(map.cell_at(i)) == CellState::Free).collect();
    for b in blocked {
        if map.in_bounds(*b) && *b != start {
            passable[map.index(*b)] = false;
        }
    }
    let mut g = vec![u32::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let (si, gi) = (map.index(start), map.index(goal));
    g[si] = 0;
    let h = |c: Cell| c.manhattan(goal) as u32;
    open.push(Reverse((h(start), h(start), si)));
    while let Some(Reverse((_, _, i))) = open.pop() {
        if closed[i] {
            continue;
        }
        closed[i] = true;
        if i == gi {
            break;
        }
        let c = map.cell_at(i);
        for nb in map.neighbors4(c) {
            let j = map.index(nb);
            if !passable[j] || closed[j] {
                continue;
            }
            let cand = g[i] + 1;
            if cand < g[j] {
                g[j] = cand;
                parent[j] = i;
                let hn = h(nb);
                open.push(Reverse((cand + hn, hn, j)));
            }
        }
    }
    if !closed[gi] {
        return PlanResult::INFEASIBLE;
    }
    let mut cur = gi;
    while parent[cur] != si {
        cur = parent[cur];
    }
    let action = Action::between(start, map.cell_at(cur)).expect("A* parents are adjacent");
    PlanResult { action, ok: true, cost: Some(g[gi]) }
}

/// Robot-centred local view handed to a reactive policy.
///
/// Serialised layout, space separated, in this order: radius; the
/// `(2r+1)^2` window cells row-major as `.`/`#`/`?` (out of bounds is `#`);
/// goal row offset; goal column offset; goal flag (`1` if a goal is set,
/// offsets are `0 0` otherwise); teammate mask over the window (`0`/`1`);
/// dynamic-obstacle mask; feasible mask over `Up Down Left Right Stay`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub radius: usize,
    pub cells: Vec<CellState>,
    pub goal_offset: Option<(i64, i64)>,
    pub teammates: Vec<bool>,
    pub obstacles: Vec<bool>,
    pub feasible: ActionSet,
}

impl Observation {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Window index of the local offset `(dr, dc)`, if inside.
    pub fn local_index(&self, dr: i64, dc: i64) -> Option<usize> {
        let r = self.radius as i64;
        (dr.abs() <= r && dc.abs() <= r).then(|| ((dr + r) as usize) * self.side() + (dc + r) as usize)
    }

    pub fn to_line(&self) -> String {
        let cells: String = self.cells.iter().map(|s| s.to_char()).collect();
        let mask = |m: &[bool]| m.iter().map(|b| if *b { '1' } else { '0' }).collect::<String>();
        let (dr, dc, flag) = match self.goal_offset {
            Some((dr, dc)) => (dr, dc, 1),
            None => (0, 0, 0),
        };
        let feasible: String = Action::ALL.iter().map(|a| if self.feasible.contains(*a) { '1' } else { '0' }).collect();
        format!(
            "{} {} {} {} {} {} {} {}",
            self.radius,
            cells,
            dr,
            dc,
            flag,
            mask(&self.teammates),
            mask(&self.obstacles),
            feasible
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 8 {
            return Err(Error::Parse(format!("observation needs 8 fields, found {}", tok.len())));
        }
        let num = |s: &str| s.parse::<i64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let radius = num(tok[0])? as usize;
        let area = (2 * radius + 1) * (2 * radius + 1);
        let cells = tok[1]
            .chars()
            .map(|c| CellState::from_char(c).ok_or_else(|| Error::Parse(format!("bad cell {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let mask = |s: &str| s.chars().map(|c| c == '1').collect::<Vec<_>>();
        let teammates = mask(tok[5]);
        let obstacles = mask(tok[6]);
        if cells.len() != area || teammates.len() != area || obstacles.len() != area || tok[7].len() != 5 {
            return Err(Error::Parse("observation field lengths do not match radius".into()));
        }
        let goal_offset = (tok[4] == "1").then(|| Ok::<_, Error>((num(tok[2])?, num(tok[3])?))).transpose()?;
        let feasible = Action::ALL.iter().zip(tok[7].chars()).filter(|(_, c)| *c == '1').map(|(a, _)| *a).collect();
        Ok(Observation { radius, cells, goal_offset, teammates, obstacles, feasible })
    }
}

/// Builds the local view from cells within `radius` of `pose` only.
pub fn build_observation(
    map: &GridMap,
    pose: Cell,
    goal: Option<Cell>,
    teammates: &[Cell],
    obstacles: &[Cell],
    feasible: ActionSet,
    radius: usize,
) -> Observation {
    let side = 2 * radius + 1;
    let mut cells = vec![CellState::Occ; side * side];
    let mut tm = vec![false; side * side];
    let mut ob = vec![false; side * side];
    let r = radius as i64;
    let to_local = |c: Cell| {
        let dr = c.row as i64 - pose.row as i64;
        let dc = c.col as i64 - pose.col as i64;
        (dr.abs() <= r && dc.abs() <= r).then(|| ((dr + r) as usize) * side + (dc + r) as usize)
    };
    for c in map.window(pose, radius) {
        if let Some(k) = to_local(c) {
            cells[k] = map.get(c);
        }
    }
    for t in teammates {
        if let Some(k) = to_local(*t) {
            tm[k] = true;
        }
    }
    for o in obstacles {
        if let Some(k) = to_local(*o) {
            ob[k] = true;
        }
    }
    let goal_offset = goal.map(|g| (g.row as i64 - pose.row as i64, g.col as i64 - pose.col as i64));
    Observation { radius, cells, goal_offset, teammates: tm, obstacles: ob, feasible }
}

/// A local executor: maps an observation to an action in `obs.feasible`.
pub trait ReactivePolicy: Send {
    fn act(&mut self, obs: &Observation) -> Action;
}

/// Tuning of [`PotentialFieldPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialFieldConfig {
    /// Penalty per dynamic obstacle orthogonally adjacent to the target cell.
    pub obstacle_adjacent: f64,
    /// Penalty per dynamic obstacle diagonally adjacent to the target cell.
    pub obstacle_diagonal: f64,
    /// Penalty per teammate adjacent to the target cell.
    pub teammate_adjacent: f64,
    /// Bonus for repeating the previous move.
    pub momentum: f64,
    /// Upper bound of the uniform random tie-break.
    pub noise: f64,
}

impl Default for PotentialFieldConfig {
    fn default() -> Self {
        PotentialFieldConfig {
            obstacle_adjacent: 0.6,
            obstacle_diagonal: 0.2,
            teammate_adjacent: 0.3,
            momentum: 0.1,
            noise: 0.05,
        }
    }
}

/// Baseline reactive policy.
///
/// Attraction is the drop in a local navigation potential: for every
/// passable window cell, the fewest in-window steps to an exit (a passable
/// cell on the window border, or the goal itself) plus that exit's Manhattan
/// distance to the goal. Only exits are seeded, so walls inside the window
/// do not create local minima. Without a goal the
/// potential is the in-window distance to the nearest cell bordering
/// unknown space. Proximity to obstacles and teammates is penalised, the
/// previous move gets a small bonus, and a seeded uniform draw breaks ties.
#[derive(Debug, Clone)]
pub struct PotentialFieldPolicy {
    config: PotentialFieldConfig,
    rng: ChaCha8Rng,
    last: Action,
}

impl PotentialFieldPolicy {
    pub fn new(config: PotentialFieldConfig, seed: u64) -> Self {
        PotentialFieldPolicy { config, rng: ChaCha8Rng::seed_from_u64(seed), last: Action::Stay }
    }

    /// Multi-source Dijkstra over passable window cells with per-source
    /// initial costs. `None` marks impassable or unreachable cells.
    fn potential(obs: &Observation) -> Vec<Option<u32>> {
        let side = obs.side();
        let area = side * side;
        let r = obs.radius as i64;
        let centre = obs.local_index(0, 0).expect("centre is inside");
        let passable: Vec<bool> = (0..area)
            .map(|k| k == centre || (obs.cells[k] == CellState::Free && !obs.teammates[k] && !obs.obstacles[k]))
            .collect();
        let mut seed = vec![None; area];
        match obs.goal_offset {
            Some((gr, gc)) => {
                for k in 0..area {
                    let (dr, dc) = ((k / side) as i64 - r, (k % side) as i64 - r);
                    let exit = dr.abs() == r || dc.abs() == r || (dr, dc) == (gr, gc);
                    if passable[k] && exit {
                        seed[k] = Some(((gr - dr).abs() + (gc - dc).abs()) as u32);
                    }
                }
            }
            None => {
                for k in 0..area {
                    if !passable[k] {
                        continue;
                    }
                    let (lr, lc) = ((k / side) as i64, (k % side) as i64);
                    let borders_unknown = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(a, b)| {
                        let (nr, nc) = (lr + a, lc + b);
                        nr >= 0
                            && nc >= 0
                            && nr < side as i64
                            && nc < side as i64
                            && obs.cells[nr as usize * side + nc as usize] == CellState::Unk
                    });
                    if borders_unknown {
                        seed[k] = Some(0);
                    }
                }
            }
        }
        let mut best: Vec<Option<u32>> = vec![None; area];
        let mut heap: BinaryHeap<Reverse<(u32, usize)>> =
            seed.iter().enumerate().filter_map(|(k, s)| s.map(|s| Reverse((s, k)))).collect();
        while let Some(Reverse((d, k))) = heap.pop() {
            if best[k].is_some() {
                continue;
            }
            best[k] = Some(d);
            let (lr, lc) = ((k / side) as i64, (k % side) as i64);
            for (a, b) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (lr + a, lc + b);
                if nr < 0 || nc < 0 || nr >= side as i64 || nc >= side as i64 {
                    continue;
                }
                let j = nr as usize * side + nc as usize;
                if passable[j] && best[j].is_none() {
                    heap.push(Reverse((d + 1, j)));
                }
            }
        }
        best
    }

    fn proximity_penalty(&self, obs: &Observation, dr: i64, dc: i64) -> f64 {
        let mut penalty = 0.0;
        for a in -1..=1i64 {
            for b in -1..=1i64 {
                if a == 0 && b == 0 {
                    continue;
                }
                let Some(k) = obs.local_index(dr + a, dc + b) else { continue };
                let orthogonal = a == 0 || b == 0;
                if obs.obstacles[k] {
                    penalty += if orthogonal { self.config.obstacle_adjacent } else { self.config.obstacle_diagonal };
                }
                if obs.teammates[k] && orthogonal && (dr + a, dc + b) != (0, 0) {
                    penalty += self.config.teammate_adjacent;
                }
            }
        }
        penalty
    }
}

impl ReactivePolicy for PotentialFieldPolicy {
    fn act(&mut self, obs: &Observation) -> Action {
        let phi = Self::potential(obs);
        let here = phi[obs.local_index(0, 0).expect("centre")];
        let mut best = (f64::NEG_INFINITY, Action::Stay);
        for a in Action::ALL {
            // One draw per action keeps the stream aligned across calls.
            let noise = self.rng.gen::<f64>() * self.config.noise;
            if !obs.feasible.contains(a) {
                continue;
            }
            let (dr, dc) = a.delta();
            let (dr, dc) = (dr as i64, dc as i64);
            let there = obs.local_index(dr, dc).and_then(|k| phi[k]);
            let attraction = match (here, there) {
                (Some(h), Some(t)) => h as f64 - t as f64,
                _ => 0.0,
            };
            let momentum = if a == self.last && a != Action::Stay { self.config.momentum } else { 0.0 };
            let score = attraction - self.proximity_penalty(obs, dr, dc) + momentum + noise;
            if score > best.0 {
                best = (score, a);
            }
        }
        self.last = best.1;
        best.1
    }
}

/// Runs an external policy process: one observation line is written to its
/// stdin per decision and one action name (`Up`, `Down`, `Left`, `Right`,
/// `Stay`) is read back. Infeasible or malformed replies become `Stay`.
pub struct SubprocessPolicy {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessPolicy {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Config("policy stdin unavailable".into()))?;
        let stdout = BufReader::new(child.stdout.take().ok_or_else(|| Error::Config("policy stdout unavailable".into()))?);
        Ok(SubprocessPolicy { child, stdin, stdout })
    }

    fn exchange(&mut self, obs: &Observation) -> Result<Action> {
        writeln!(self.stdin, "{}", obs.to_line())?;
        self.stdin.flush()?;
        let mut line = String::new();
        self.stdout.read_line(&mut line)?;
        line.parse()
    }
}

impl ReactivePolicy for SubprocessPolicy {
    fn act(&mut self, obs: &Observation) -> Action {
        match self.exchange(obs) {
            Ok(a) if obs.feasible.contains(a) => a,
            Ok(a) => {
                log::warn!("external policy proposed infeasible action {a}");
                Action::Stay
            }
            Err(e) => {
                log::warn!("external policy failed: {e}");
                Action::Stay
            }
        }
    }
}

impl Drop for SubprocessPolicy {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Planner branch when `planner` is set, reactive branch otherwise.
pub fn arbitrate(planner: bool, plan: PlanResult, reactive: Action) -> Action {
    if planner {
        plan.action
    } else {
        reactive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryReason {
    Infeasible,
    Stalled,
    Oscillating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    /// Steps of forced manoeuvre per activation.
    pub length: usize,
    /// Switch flips within one window that count as oscillation.
    pub oscillation_flips: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig { length: 4, oscillation_flips: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecoveryState {
    pub active: bool,
    pub remaining: usize,
    pub reason: Option<RecoveryReason>,
    /// Pass-through steps since the last release (or episode start).
    pub since_release: usize,
}

impl RecoveryState {
    /// Trigger check over the full history window.
    fn trigger(history: &HistoryBuffer, config: &RecoveryConfig) -> Option<RecoveryReason> {
        if !history.is_full() {
            return None;
        }
        if history.iter().all(|r| r.forced_fallback) {
            return Some(RecoveryReason::Infeasible);
        }
        if history.is_stalled() {
            return Some(RecoveryReason::Stalled);
        }
        if history.iter().filter(|r| r.switch_flip).count() >= config.oscillation_flips {
            return Some(RecoveryReason::Oscillating);
        }
        None
    }
}

/// Deterministic symmetry-breaking move: feasible non-`Stay` action number
/// `(robot + t) mod k` among the `k` available.
pub fn symmetry_breaking_move(feasible: ActionSet, robot: usize, t: usize) -> Action {
    let choices: Vec<Action> = feasible.iter().filter(|a| *a != Action::Stay).collect();
    if choices.is_empty() {
        Action::Stay
    } else {
        choices[(robot + t) % choices.len()]
    }
}

/// Passes `proposed` through unless a recovery is running or is triggered by
/// the last full window of history. Returns the action and whether a new
/// recovery started this step.
pub fn recovery_override(
    proposed: Action,
    state: &mut RecoveryState,
    history: &HistoryBuffer,
    feasible: ActionSet,
    robot: usize,
    t: usize,
    config: &RecoveryConfig,
) -> (Action, bool) {
    let mut started = false;
    if !state.active && config.length > 0 && state.since_release >= history.capacity() {
        if let Some(reason) = RecoveryState::trigger(history, config) {
            *state = RecoveryState { active: true, remaining: config.length, reason: Some(reason), since_release: 0 };
            started = true;
        }
    }
    if state.active {
        let action = symmetry_breaking_move(feasible, robot, t);
        state.remaining -= 1;
        if state.remaining == 0 {
            state.active = false;
        }
        (action, started)
    } else {
        state.since_release += 1;
        (proposed, false)
    }
}

/// Outcome of one simultaneous move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub executed: Vec<Action>,
    /// Bounced because a dynamic obstacle entered the target this step.
    pub collisions: Vec<bool>,
    /// Move cancelled by a robot-robot conflict.
    pub violations: Vec<bool>,
}

/// Resolves simultaneous robot moves against each other and against the
/// obstacles' post-move cells. Robots entering an obstacle cell bounce
/// (and log a collision); in a swap or vertex conflict the higher id yields;
/// moves into a cell whose robot stays are cancelled, repeated to a fixed
/// point. A swap therefore leaves both robots in place.
pub fn resolve_collisions(intended: &[Action], poses: &[Cell], obstacles_next: &[Cell]) -> Resolution {
    let n = poses.len();
    let mut executed = intended.to_vec();
    let mut collisions = vec![false; n];
    let mut violations = vec![false; n];
    let target = |i: usize, a: Action| poses[i].step(a).unwrap_or(poses[i]);

    for i in 0..n {
        if executed[i] != Action::Stay && obstacles_next.contains(&target(i, executed[i])) {
            executed[i] = Action::Stay;
            collisions[i] = true;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if executed[i] != Action::Stay
                && executed[j] != Action::Stay
                && target(i, executed[i]) == poses[j]
                && target(j, executed[j]) == poses[i]
            {
                // The higher id yields; the fixed point below then stops the other.
                executed[j] = Action::Stay;
                violations[j] = true;
            }
        }
    }
    loop {
        let mut changed = false;
        for i in 0..n {
            if executed[i] == Action::Stay {
                continue;
            }
            let ti = target(i, executed[i]);
            let blocked = (0..n).any(|j| {
                j != i && {
                    let tj = target(j, executed[j]);
                    // A staying robot holds its cell; a lower-id mover wins ties.
                    (executed[j] == Action::Stay && tj == ti) || (executed[j] != Action::Stay && tj == ti && j < i)
                }
            });
            if blocked {
                executed[i] = Action::Stay;
                violations[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Resolution { executed, collisions, violations }
}
