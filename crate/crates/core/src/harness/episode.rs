//! The closed-loop step pipeline for one episode.

use std::collections::VecDeque;
use std::time::Instant;

use super::allocators::{allocator_baseline, AllocatorKind};
use super::config::Config;
use super::scenario::generate_scenario;
use super::{derive_seed, Allocator, Switching, VariantTag};
use crate::assignment::{assign_target, should_reassign, TeamSnapshot};
use crate::error::Result;
use crate::execution::{
    arbitrate, build_observation, plan_astar, recovery_override, resolve_collisions, PlanResult, PotentialFieldPolicy,
    ReactivePolicy, RecoveryState, SubprocessPolicy,
};
use crate::gate::{
    extract_features, online_update, predict, pseudo_label, surrogate_score, FeatureInputs, FeatureVector, GateParams,
    GateState, HistoryBuffer, StepRecord,
};
use crate::gridworld::{
    bfs_distance_field, feasible_actions, has_frontier, sense_and_fuse, Cell, CellState, DistanceField,
    DynamicObstacleSet, GridMap,
};
use crate::metrics::{EpisodeHeader, EpisodeRecord, Outcome, RobotStep, StepLog};

/// A labelled gate sample: features at the start of a window and the
/// pseudo-label its surrogate score produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmSample {
    pub features: FeatureVector,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub record: EpisodeRecord,
    /// Samples whose surrogate magnitude cleared the update margin.
    pub samples: Vec<WarmSample>,
    pub final_gate: GateParams,
    /// Shared map at the end of the episode.
    pub final_map: GridMap,
    pub wall_time: f64,
}

/// Runs one episode with the configured warm parameters.
pub fn run_episode(config: &Config, tag: VariantTag, seed: u64) -> Result<EpisodeRecord> {
    let warm = config.gate.warm_params()?;
    Ok(run_episode_detailed(config, tag, seed, &warm)?.record)
}

fn is_frontier(map: &GridMap, c: Cell) -> bool {
    map.is_free(c) && map.neighbors4(c).any(|n| map.get(n) == CellState::Unk)
}

fn make_policy(config: &Config, seed: u64, robot: usize) -> Result<Box<dyn ReactivePolicy>> {
    Ok(match &config.execution.policy_command {
        Some(cmd) => Box::new(SubprocessPolicy::spawn(cmd)?),
        None => Box::new(PotentialFieldPolicy::new(config.policy, derive_seed(seed, 0x100 + robot as u64))),
    })
}

/// Runs one episode; `warm` is used when the tag asks for a warm gate.
pub fn run_episode_detailed(config: &Config, tag: VariantTag, seed: u64, warm: &GateParams) -> Result<EpisodeOutput> {
    config.validate()?;
    let started = Instant::now();
    let sp = &config.scenario;
    let scenario = generate_scenario(sp, seed)?;
    let truth = scenario.truth;
    let n = sp.robots;
    let radius = sp.sensing_radius;
    let horizon = sp.horizon();
    let window = config.gate.window;
    let switching = tag.method.switching();

    let mut obstacles = DynamicObstacleSet::new(&scenario.obstacles, sp.speed_ratio, derive_seed(seed, 0x0B5))?;
    let mut poses = scenario.robots;
    let mut shared = GridMap::new(sp.width, sp.height, CellState::Unk)?;
    for p in &poses {
        sense_and_fuse(&mut shared, &truth, &obstacles, *p, radius)?;
    }
    // Obstacle marks in `shared` persist after the obstacle has left. Planning
    // uses the static belief plus whatever obstacles are in view right now.
    let no_obstacles = DynamicObstacleSet::new(&[], sp.speed_ratio, 0)?;
    let mut belief = GridMap::new(sp.width, sp.height, CellState::Unk)?;
    for p in &poses {
        sense_and_fuse(&mut belief, &truth, &no_obstacles, *p, radius)?;
    }
    let initial_known = (shared.len() - shared.count(CellState::Unk)) as u32;

    let mut gate_params = if tag.gate.warm {
        GateParams { learning_rate: config.gate.learning_rate, l2: config.gate.l2, margin: config.gate.margin, ..warm.clone() }
    } else {
        config.gate.cold_params()
    };
    let mut policies = (0..n).map(|i| make_policy(config, seed, i)).collect::<Result<Vec<_>>>()?;
    let mut gates = vec![GateState::new(config.hysteresis, true); n];
    let mut histories = vec![HistoryBuffer::new(window); n];
    let mut feature_log: Vec<VecDeque<FeatureVector>> = vec![VecDeque::with_capacity(window); n];
    let mut recovery = vec![RecoveryState::default(); n];
    let mut goals: Vec<Option<Cell>> = vec![None; n];
    let mut samples = Vec::new();

    let mut record = EpisodeRecord::new(EpisodeHeader {
        variant: tag.to_string(),
        seed,
        width: sp.width,
        height: sp.height,
        team_size: n,
        horizon,
        initial_known,
        static_density: scenario.static_density,
    });
    let mut t_star = None;
    let mut strict_failure = false;

    for t in 0..=horizon {
        let mut visible: Vec<Cell> = poses.iter().flat_map(|p| obstacles.visible_from(*p, radius)).collect();
        visible.sort();
        visible.dedup();
        let mut view = belief.clone();
        for o in &visible {
            view.set(*o, CellState::Occ);
        }
        if !has_frontier(&view) {
            t_star = Some(t);
            break;
        }
        if t == horizon {
            break;
        }
        let fields: Vec<Option<DistanceField>> = poses.iter().map(|p| bfs_distance_field(&view, *p).ok()).collect();
        let others = |i: usize| -> Vec<Cell> { poses.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| *c).collect() };
        // The planner only blocks teammates it can currently see.
        let seen_mates = |i: usize| -> Vec<Cell> { others(i).into_iter().filter(|c| c.chebyshev(poses[i]) <= radius).collect() };

        // Features and fidelity, using last round's goals.
        let mut feasible = Vec::with_capacity(n);
        let mut plans = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n);
        let mut fidelity = Vec::with_capacity(n);
        for i in 0..n {
            let mates = others(i);
            feasible.push(feasible_actions(&view, poses[i], &mates, &visible));
            plans.push(plan_astar(&view, poses[i], goals[i], &seen_mates(i)));
            let field = fields[i].as_ref();
            let teammate_distances: Vec<Option<u32>> = mates.iter().map(|m| field.and_then(|f| f.get(*m))).collect();
            let z = extract_features(&FeatureInputs {
                map: &view,
                pose: poses[i],
                team_size: n,
                teammate_distances: &teammate_distances,
                goal: goals[i],
                goal_distance: goals[i].and_then(|g| field.and_then(|f| f.get(g))),
                feasible: feasible[i],
                history: &histories[i],
                planner_ok: plans[i].ok,
                sensing_radius: radius,
                interaction_radius: config.assignment.interaction_radius,
            });
            fidelity.push(predict(&gate_params, &z));
            features.push(z);
        }

        let flips: Vec<bool> =
            (0..n).map(|i| switching == Switching::Gated && gates[i].update(fidelity[i])).collect();

        // Reassignment.
        let due: Vec<bool> = (0..n)
            .map(|i| {
                should_reassign(t, config.assignment.reassign_interval, goals[i], poses[i])
                    || goals[i].is_some_and(|g| !is_frontier(&view, g))
            })
            .collect();
        if due.iter().any(|d| *d) {
            let published = goals.clone();
            let snapshot = TeamSnapshot::with_fields(&view, &poses, &published, fields.clone());
            let baseline = match tag.allocator {
                Allocator::Coupled => None,
                Allocator::Greedy => Some(AllocatorKind::Greedy),
                Allocator::Hungarian => Some(AllocatorKind::Hungarian),
                Allocator::Auction => Some(AllocatorKind::Auction),
            }
            .map(|kind| allocator_baseline(kind, &snapshot.frontiers, &snapshot.robot_fields));
            for i in (0..n).filter(|i| due[*i]) {
                let next = match &baseline {
                    Some(all) => all[i],
                    None => {
                        let p = if tag.method.couples_assignment() { fidelity[i] } else { 1.0 };
                        assign_target(i, &snapshot, p, &config.assignment, radius)
                    }
                };
                if next != goals[i] {
                    goals[i] = next;
                    plans[i] = plan_astar(&view, poses[i], next, &seen_mates(i));
                }
            }
        }

        // Branch selection, arbitration and recovery.
        let mut intended = Vec::with_capacity(n);
        let mut branch = Vec::with_capacity(n);
        let mut forced = Vec::with_capacity(n);
        let mut recovering = Vec::with_capacity(n);
        let mut triggered = Vec::with_capacity(n);
        for i in 0..n {
            let selected = match switching {
                Switching::Gated => gates[i].planner,
                Switching::PlannerWithFallback | Switching::PlannerOnly => true,
                Switching::ReactiveOnly => false,
            };
            let plan: PlanResult = plans[i];
            let fallback = selected && !plan.ok;
            let planner = selected && plan.ok;
            let obs = build_observation(&view, poses[i], goals[i], &others(i), &visible, feasible[i], radius);
            let reactive = policies[i].act(&obs);
            let proposed = if switching == Switching::PlannerOnly { plan.action } else { arbitrate(planner, plan, reactive) };
            let was_active = recovery[i].active;
            let (action, started) =
                recovery_override(proposed, &mut recovery[i], &histories[i], feasible[i], i, t, &config.recovery);
            intended.push(action);
            branch.push(planner);
            forced.push(fallback);
            recovering.push(was_active || started);
            triggered.push(started);
        }

        // Obstacles choose their moves against the robots' current cells;
        // robots then resolve against the obstacles' new cells.
        let mut next_obstacles = obstacles.clone();
        next_obstacles.step(&truth, &poses, t);
        let obstacle_cells: Vec<Cell> = next_obstacles.positions().collect();
        let resolution = resolve_collisions(&intended, &poses, &obstacle_cells);
        let next_poses: Vec<Cell> =
            poses.iter().zip(&resolution.executed).map(|(p, a)| p.step(*a).unwrap_or(*p)).collect();
        for (i, c) in next_poses.iter().enumerate() {
            assert!(truth.is_free(*c), "robot {i} entered static obstacle {c} at step {t}");
            assert!(!next_poses[..i].contains(c), "robots share cell {c} at step {t}");
        }
        obstacles = next_obstacles;
        if config.execution.strict_collisions && resolution.collisions.iter().any(|c| *c) {
            strict_failure = true;
        }

        let mut newly = vec![0u32; n];
        for i in 0..n {
            newly[i] = sense_and_fuse(&mut shared, &truth, &obstacles, next_poses[i], radius)? as u32;
            sense_and_fuse(&mut belief, &truth, &no_obstacles, next_poses[i], radius)?;
        }

        record.push(StepLog {
            t,
            robots: (0..n)
                .map(|i| RobotStep {
                    pose: poses[i],
                    action: resolution.executed[i],
                    planner: branch[i],
                    fidelity: fidelity[i],
                    recovery: recovering[i],
                    recovery_started: triggered[i],
                    collision: resolution.collisions[i],
                    goal: goals[i],
                })
                .collect(),
            newly_known: newly.iter().sum(),
        });
        for i in 0..n {
            histories[i].push(StepRecord {
                from: poses[i],
                to: next_poses[i],
                newly_seen: newly[i],
                collision: resolution.collisions[i],
                violation: resolution.violations[i],
                switch_flip: flips[i],
                forced_fallback: forced[i],
            });
            if feature_log[i].len() == window {
                feature_log[i].pop_front();
            }
            feature_log[i].push_back(features[i]);
        }
        poses = next_poses;

        if tag.gate.adaptive && (t + 1) % config.gate.update_interval == 0 {
            for i in 0..n {
                let goal_field = goals[i].and_then(|g| bfs_distance_field(&view, g).ok());
                let q = surrogate_score(&histories[i], &config.surrogate, |c| goal_field.as_ref().and_then(|f| f.get(c)));
                let label = pseudo_label(q);
                let z = *feature_log[i].front().expect("logged this step");
                let p = predict(&gate_params, &z);
                if q.abs() >= gate_params.margin {
                    samples.push(WarmSample { features: z, label });
                }
                if let Err(e) = online_update(&mut gate_params, &z, p, label, q) {
                    log::warn!("seed {seed} step {t}: gate update skipped: {e}");
                }
            }
        }
        if strict_failure {
            break;
        }
    }

    record.finish(Outcome { t_star, strict_failure, aborted: false });
    Ok(EpisodeOutput { record, samples, final_gate: gate_params, final_map: shared, wall_time: started.elapsed().as_secs_f64() })
}

/// Poses of every robot after each step, including the start.
#[cfg(test)]
pub(crate) fn trajectory(record: &EpisodeRecord) -> Vec<Vec<Cell>> {
    let mut out: Vec<Vec<Cell>> = record.steps.iter().map(|s| s.robots.iter().map(|r| r.pose).collect()).collect();
    if let Some(last) = record.steps.last() {
        out.push(last.robots.iter().map(|r| r.pose.step(r.action).unwrap_or(r.pose)).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Action;
    use crate::harness::Method;
    use crate::metrics::{episode_metrics, ObjectiveParams};

    fn small(width: usize, robots: usize, obstacles: usize, density: f64) -> Config {
        let mut c = Config::default();
        c.scenario.width = width;
        c.scenario.height = width;
        c.scenario.robots = robots;
        c.scenario.dynamic_obstacles = obstacles;
        c.scenario.static_density = density;
        c
    }

    #[test]
    fn tiny_open_map_single_robot() {
        let c = small(5, 1, 0, 0.0);
        let rec = run_episode(&c, VariantTag::new(Method::Full), 0).unwrap();
        let m = episode_metrics(&rec, &ObjectiveParams::default());
        assert!(m.success);
        assert!(m.t_star.unwrap() <= 4, "{:?}", m.t_star);
        assert!(m.overlap.unwrap_or(0.0) == 0.0);
    }

    #[test]
    fn fully_sensed_map_completes_at_zero() {
        let mut c = small(3, 1, 0, 0.0);
        c.scenario.sensing_radius = 3;
        let rec = run_episode(&c, VariantTag::new(Method::Full), 1).unwrap();
        assert_eq!(rec.outcome.unwrap().t_star, Some(0));
        assert!(rec.steps.is_empty());
    }

    #[test]
    fn same_seed_same_record() {
        let c = small(20, 3, 6, 0.25);
        for m in Method::ALL {
            let a = run_episode(&c, VariantTag::new(m), 11).unwrap();
            let b = run_episode(&c, VariantTag::new(m), 11).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn variant_branch_invariants() {
        let c = small(20, 3, 10, 0.3);
        for seed in 0..3 {
            let rl = run_episode(&c, VariantTag::new(Method::VorlRl), seed).unwrap();
            assert!(rl.steps.iter().flat_map(|s| &s.robots).all(|r| !r.planner));
            let astar = run_episode(&c, VariantTag::new(Method::VorlAstar), seed).unwrap();
            for r in astar.steps.iter().flat_map(|s| &s.robots) {
                // Non-planner steps are forced holds unless a recovery moved the robot.
                assert!(r.planner || r.action == Action::Stay || r.recovery);
            }
        }
    }

    #[test]
    fn trajectories_are_contiguous_moves() {
        let c = small(20, 4, 8, 0.3);
        let rec = run_episode(&c, VariantTag::new(Method::Full), 3).unwrap();
        let traj = trajectory(&rec);
        for w in traj.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(a.manhattan(*b) <= 1);
            }
        }
    }

    #[test]
    fn strict_mode_ends_on_contact() {
        let mut c = small(20, 4, 60, 0.1);
        c.execution.strict_collisions = true;
        let mut saw_failure = false;
        for seed in 0..10 {
            let rec = run_episode(&c, VariantTag::new(Method::VorlAstar), seed).unwrap();
            let o = rec.outcome.unwrap();
            if o.strict_failure {
                saw_failure = true;
                assert!(rec.steps.last().unwrap().robots.iter().any(|r| r.collision));
                assert!(!o.success());
            }
        }
        assert!(saw_failure);
    }
}
