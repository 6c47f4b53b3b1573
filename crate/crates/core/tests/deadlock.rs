use fidelity_explore::execution::{plan_astar, recovery_override, resolve_collisions, RecoveryConfig, RecoveryState};
use fidelity_explore::gate::{HistoryBuffer, StepRecord};
use fidelity_explore::gridworld::{feasible_actions, Cell, GridMap};

const WINDOW: usize = 8;

/// Two robots meet head-on in a corridor with a single side pocket. Each
/// plans around the other, fails, and holds still until recovery kicks in.
/// The id-offset manoeuvre only guarantees that the standoff is broken; in
/// this fixture both robots step back and return, so the standoff recurs
/// once per window plus manoeuvre.
#[test]
fn corridor_deadlock_is_broken_within_one_recovery() {
    let map = GridMap::from_ascii(".......\n###.###\n").unwrap();
    let goals = [Cell::new(0, 6), Cell::new(0, 0)];
    let mut poses = vec![Cell::new(0, 2), Cell::new(0, 3)];
    let config = RecoveryConfig::default();
    let mut states = vec![RecoveryState::default(); 2];
    let mut histories = vec![HistoryBuffer::new(WINDOW); 2];
    let mut first_move = None;
    let mut moved_steps = 0;

    for t in 0..80 {
        let mut intended = Vec::new();
        let mut infeasible = Vec::new();
        for i in 0..2 {
            let others = [poses[1 - i]];
            let feasible = feasible_actions(&map, poses[i], &others, &[]);
            let plan = plan_astar(&map, poses[i], Some(goals[i]), &others);
            let (action, _) = recovery_override(plan.action, &mut states[i], &histories[i], feasible, i, t, &config);
            intended.push(action);
            infeasible.push(!plan.ok);
        }
        let res = resolve_collisions(&intended, &poses, &[]);
        let next: Vec<Cell> = poses.iter().zip(&res.executed).map(|(p, a)| p.step(*a).unwrap()).collect();
        assert_ne!(next[0], next[1]);
        for i in 0..2 {
            assert!(map.is_free(next[i]));
            histories[i].push(StepRecord {
                from: poses[i],
                to: next[i],
                newly_seen: 0,
                collision: false,
                violation: res.violations[i],
                switch_flip: false,
                forced_fallback: infeasible[i],
            });
        }
        if next != poses {
            first_move.get_or_insert(t);
            moved_steps += 1;
        }
        poses = next;
    }

    let broken = first_move.expect("deadlock never broken");
    assert!(broken <= WINDOW + config.length, "first move at step {broken}");
    // Every standoff of W idle steps is followed by a full manoeuvre.
    assert!(moved_steps >= 80 / (WINDOW + config.length) * config.length - config.length);
}
