//! Fidelity-coupled frontier allocation.
//!
//! Each reassignment round partitions the frontier set by BFS distance
//! (a Voronoi partition on the free-space graph), scores every candidate in
//! a robot's cell by utility, travel distance and teammate repulsion, and
//! picks the maximiser. Low execution fidelity raises the distance and
//! repulsion weights, steering robots toward near, uncontested frontiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{bfs_distance_field, extract_frontiers, Cell, CellState, DistanceField, GridMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentParams {
    pub lambda0: f64,
    pub lambda1: f64,
    pub rho0: f64,
    pub rho1: f64,
    /// Weight of the teammate-goal repulsion term.
    pub beta: f64,
    pub sigma_x: f64,
    pub sigma_g: f64,
    /// Teammates farther than this (BFS steps) exert no repulsion.
    pub interaction_radius: u32,
    /// Periodic reassignment interval in steps.
    pub reassign_interval: usize,
}

impl Default for AssignmentParams {
    fn default() -> Self {
        AssignmentParams {
            lambda0: 6.0,
            lambda1: 6.0,
            rho0: 0.2,
            rho1: 0.8,
            beta: 0.5,
            sigma_x: 2.0,
            sigma_g: 2.0,
            interaction_radius: 3,
            reassign_interval: 5,
        }
    }
}

impl AssignmentParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda0, self.lambda1, self.rho0, self.rho1, self.beta];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("assignment weights must be finite and non-negative".into()));
        }
        if !(self.sigma_x > 0.0 && self.sigma_g > 0.0) || !self.sigma_x.is_finite() || !self.sigma_g.is_finite() {
            return Err(Error::Config("sigma_x and sigma_g must be positive".into()));
        }
        if self.reassign_interval == 0 {
            return Err(Error::Config("reassign_interval must be at least 1".into()));
        }
        Ok(())
    }

    /// Distance weight `lambda0 + lambda1 * (1 - p)`.
    pub fn distance_weight(&self, fidelity: f64) -> f64 {
        self.lambda0 + self.lambda1 * (1.0 - fidelity)
    }

    /// Repulsion weight `rho0 + rho1 * (1 - p)`.
    pub fn repulsion_weight(&self, fidelity: f64) -> f64 {
        self.rho0 + self.rho1 * (1.0 - fidelity)
    }
}

/// Splits `frontiers` among robots: a frontier goes to the robot with the
/// smallest finite BFS distance, ties to the lower id. Frontiers nobody can
/// reach are dropped.
pub fn voronoi_filter(frontiers: &[Cell], fields: &[Option<DistanceField>]) -> Vec<Vec<Cell>> {
    let mut out = vec![Vec::new(); fields.len()];
    for &f in frontiers {
        let owner = fields
            .iter()
            .enumerate()
            .filter_map(|(i, field)| field.as_ref()?.get(f).map(|d| (d, i)))
            .min();
        if let Some((_, i)) = owner {
            out[i].push(f);
        }
    }
    out
}

/// Unknown cells in the square window of radius `sensing_radius` around `f`.
pub fn utility(map: &GridMap, f: Cell, sensing_radius: usize) -> usize {
    map.window(f, sensing_radius).filter(|c| map.get(*c) == CellState::Unk).count()
}

/// The two repulsion terms, kept apart for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Repulsion {
    pub pose: f64,
    pub goal: f64,
}

impl Repulsion {
    pub fn total(&self) -> f64 {
        self.pose + self.goal
    }
}

/// Repulsion from teammate distances. `pose_distance(j)` and
/// `goal_distance(j)` give BFS distances from the frontier to teammate `j`'s
/// pose and goal, `None` when unreachable or when the goal is unset.
pub fn repulsion_from_distances(
    robot: usize,
    team_size: usize,
    params: &AssignmentParams,
    pose_distance: impl Fn(usize) -> Option<u32>,
    goal_distance: impl Fn(usize) -> Option<u32>,
) -> Repulsion {
    if team_size <= 1 {
        return Repulsion::default();
    }
    let norm = 1.0 / (team_size - 1) as f64;
    let term = |d: Option<u32>, sigma: f64| match d {
        Some(d) if d <= params.interaction_radius => (-(d as f64) / sigma).exp(),
        _ => 0.0,
    };
    let mut pose = 0.0;
    let mut goal = 0.0;
    for j in (0..team_size).filter(|j| *j != robot) {
        pose += term(pose_distance(j), params.sigma_x);
        goal += term(goal_distance(j), params.sigma_g);
    }
    Repulsion { pose: norm * pose, goal: params.beta * norm * goal }
}

/// Repulsion on frontier `field_from_f.source()` for robot `robot`, given
/// the BFS field rooted at that frontier.
pub fn repulsion(
    robot: usize,
    poses: &[Cell],
    goals: &[Option<Cell>],
    field_from_f: &DistanceField,
    params: &AssignmentParams,
) -> Repulsion {
    repulsion_from_distances(
        robot,
        poses.len(),
        params,
        |j| field_from_f.get(poses[j]),
        |j| goals[j].and_then(|g| field_from_f.get(g)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierCandidate {
    pub cell: Cell,
    pub utility: usize,
    pub distance: u32,
    pub repulsion: f64,
    pub norm_utility: f64,
    pub norm_distance: f64,
    pub norm_repulsion: f64,
    pub score: f64,
}

impl FrontierCandidate {
    pub fn new(cell: Cell, utility: usize, distance: u32, repulsion: f64) -> Self {
        FrontierCandidate {
            cell,
            utility,
            distance,
            repulsion,
            norm_utility: 0.0,
            norm_distance: 0.0,
            norm_repulsion: 0.0,
            score: 0.0,
        }
    }
}

/// Min-max normalisation to [0, 1]; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Normalises the raw terms over the candidate list and fills in the coupled
/// score. Returns the index of the winner, or `None` for an empty list.
pub fn coupled_scores(cands: &mut [FrontierCandidate], fidelity: f64, params: &AssignmentParams) -> Option<usize> {
    if cands.is_empty() {
        return None;
    }
    let u = min_max_normalize(&cands.iter().map(|c| c.utility as f64).collect::<Vec<_>>());
    let d = min_max_normalize(&cands.iter().map(|c| c.distance as f64).collect::<Vec<_>>());
    let r = min_max_normalize(&cands.iter().map(|c| c.repulsion).collect::<Vec<_>>());
    let lambda = params.distance_weight(fidelity);
    let rho = params.repulsion_weight(fidelity);
    for (k, c) in cands.iter_mut().enumerate() {
        c.norm_utility = u[k];
        c.norm_distance = d[k];
        c.norm_repulsion = r[k];
        c.score = u[k] - lambda * d[k] - rho * r[k];
    }
    best_candidate(cands)
}

/// Highest score; ties go to the smaller distance, then row-major order.
pub fn best_candidate(cands: &[FrontierCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, c) in cands.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let b = &cands[b];
                c.score > b.score
                    || (c.score == b.score && (c.distance, c.cell) < (b.distance, b.cell))
            }
        };
        if better {
            best = Some(k);
        }
    }
    best
}

/// Periodic refresh, lost goal, or goal reached.
pub fn should_reassign(t: usize, interval: usize, goal: Option<Cell>, pose: Cell) -> bool {
    t % interval.max(1) == 0 || goal.is_none() || goal == Some(pose)
}

/// Everything a reassignment round reads, computed once per step.
#[derive(Debug, Clone)]
pub struct TeamSnapshot<'a> {
    pub map: &'a GridMap,
    pub poses: &'a [Cell],
    /// Goals published in the previous round.
    pub goals: &'a [Option<Cell>],
    pub frontiers: Vec<Cell>,
    pub robot_fields: Vec<Option<DistanceField>>,
    pub goal_fields: Vec<Option<DistanceField>>,
    pub partition: Vec<Vec<Cell>>,
}

impl<'a> TeamSnapshot<'a> {
    pub fn build(map: &'a GridMap, poses: &'a [Cell], goals: &'a [Option<Cell>]) -> Self {
        let robot_fields: Vec<_> = poses.iter().map(|p| bfs_distance_field(map, *p).ok()).collect();
        Self::with_fields(map, poses, goals, robot_fields)
    }

    pub fn with_fields(
        map: &'a GridMap,
        poses: &'a [Cell],
        goals: &'a [Option<Cell>],
        robot_fields: Vec<Option<DistanceField>>,
    ) -> Self {
        let frontiers = extract_frontiers(map);
        let goal_fields = goals
            .iter()
            .map(|g| g.and_then(|g| bfs_distance_field(map, g).ok()))
            .collect();
        let partition = voronoi_filter(&frontiers, &robot_fields);
        TeamSnapshot { map, poses, goals, frontiers, robot_fields, goal_fields, partition }
    }

    /// Scored candidates of robot `robot`'s Voronoi cell, in row-major order.
    pub fn candidates(&self, robot: usize, fidelity: f64, params: &AssignmentParams, sensing_radius: usize) -> Vec<FrontierCandidate> {
        let Some(field) = &self.robot_fields[robot] else { return Vec::new() };
        let mut cands: Vec<_> = self.partition[robot]
            .iter()
            .filter_map(|&f| {
                let d = field.get(f)?;
                // d(f, x_j) = d(x_j, f) on the undirected free-space graph.
                let rep = repulsion_from_distances(
                    robot,
                    self.poses.len(),
                    params,
                    |j| self.robot_fields[j].as_ref().and_then(|fj| fj.get(f)),
                    |j| self.goal_fields[j].as_ref().and_then(|gj| gj.get(f)),
                );
                Some(FrontierCandidate::new(f, utility(self.map, f, sensing_radius), d, rep.total()))
            })
            .collect();
        coupled_scores(&mut cands, fidelity, params);
        cands
    }

    /// Nearest frontier reachable by `robot`, ignoring the partition.
    pub fn nearest_frontier(&self, robot: usize) -> Option<Cell> {
        let field = self.robot_fields[robot].as_ref()?;
        self.frontiers.iter().filter_map(|&f| field.get(f).map(|d| (d, f))).min().map(|(_, f)| f)
    }
}

/// Coupled target selection for one robot: argmax of the score over its
/// Voronoi cell, else the globally nearest reachable frontier, else `None`.
pub fn assign_target(
    robot: usize,
    snapshot: &TeamSnapshot<'_>,
    fidelity: f64,
    params: &AssignmentParams,
    sensing_radius: usize,
) -> Option<Cell> {
    let cands = snapshot.candidates(robot, fidelity, params, sensing_radius);
    match best_candidate(&cands) {
        Some(k) => Some(cands[k].cell),
        None => snapshot.nearest_frontier(robot),
    }
}
