use proptest::prelude::*;

use fidelity_explore::assignment::{min_max_normalize, AssignmentParams};
use fidelity_explore::execution::resolve_collisions;
use fidelity_explore::gate::{predict, FeatureVector, GateParams, GateState, HysteresisConfig};
use fidelity_explore::gridworld::{Action, Cell};

fn action() -> impl Strategy<Value = Action> {
    prop::sample::select(Action::ALL.to_vec())
}

proptest! {
    #[test]
    fn resolution_never_stacks_robots(
        cells in prop::collection::btree_set((1usize..7, 1usize..7), 1..10),
        seed_actions in prop::collection::vec(action(), 10),
        obstacles in prop::collection::vec((0usize..8, 0usize..8), 0..6),
    ) {
        let poses: Vec<Cell> = cells.iter().map(|&(r, c)| Cell::new(r, c)).collect();
        let intended: Vec<Action> = seed_actions[..poses.len()].to_vec();
        let obstacles: Vec<Cell> = obstacles.iter().map(|&(r, c)| Cell::new(r, c)).collect();
        let res = resolve_collisions(&intended, &poses, &obstacles);
        let next: Vec<Cell> = poses.iter().zip(&res.executed).map(|(p, a)| p.step(*a).unwrap()).collect();
        for (i, c) in next.iter().enumerate() {
            prop_assert!(!next[..i].contains(c));
            if res.executed[i] != Action::Stay {
                prop_assert!(!obstacles.contains(c));
                prop_assert_eq!(res.executed[i], intended[i]);
            }
        }
    }

    #[test]
    fn flips_respect_the_dwell(ps in prop::collection::vec(0.0f64..=1.0, 1..300), dwell in 1usize..6, start: bool) {
        let mut g = GateState::new(HysteresisConfig { tau_high: 0.7, tau_low: 0.3, dwell }, start);
        let mut last = None;
        for (t, p) in ps.into_iter().enumerate() {
            if g.update(p) {
                if let Some(l) = last {
                    prop_assert!(t - l >= dwell);
                }
                last = Some(t);
            }
            prop_assert!(g.high_count == 0 || g.low_count == 0);
        }
    }

    #[test]
    fn fidelity_stays_open(w in prop::array::uniform8(-50.0f64..50.0), b in -50.0f64..50.0, z in prop::array::uniform8(0.0f64..=1.0)) {
        let params = GateParams { weights: w, bias: b, ..GateParams::default() };
        let p = predict(&params, &FeatureVector(z));
        prop_assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn normalisation_is_bounded(values in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        for v in min_max_normalize(&values) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn weights_do_not_increase_with_fidelity(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let params = AssignmentParams::default();
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        prop_assert!(params.distance_weight(lo) >= params.distance_weight(hi));
        prop_assert!(params.repulsion_weight(lo) >= params.repulsion_weight(hi));
    }
}
