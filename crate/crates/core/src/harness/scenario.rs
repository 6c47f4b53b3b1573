use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ScenarioParams;
use super::derive_seed;
use crate::error::{Error, Result};
use crate::gridworld::{Cell, CellState, GridMap};

/// Ground truth and initial placements of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub truth: GridMap,
    pub robots: Vec<Cell>,
    pub obstacles: Vec<Cell>,
    /// Seed that produced the accepted map (differs from the requested
    /// seed after a retry).
    pub map_seed: u64,
    pub static_density: f64,
}

/// Independent Bernoulli static obstacles.
pub fn sample_static_map(width: usize, height: usize, p_occ: f64, rng: &mut impl Rng) -> Result<GridMap> {
    let mut map = GridMap::new(width, height, CellState::Free)?;
    for i in 0..map.len() {
        if rng.gen::<f64>() < p_occ {
            map.set(map.cell_at(i), CellState::Occ);
        }
    }
    Ok(map)
}

/// Keeps the largest four-connected free component (earliest row-major
/// cell on ties) and turns every other free cell into an obstacle.
/// Returns the kept component in row-major order.
pub fn repair_connectivity(map: &mut GridMap) -> Vec<Cell> {
    let mut label = vec![usize::MAX; map.len()];
    let mut best: Vec<Cell> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..map.len() {
        let c = map.cell_at(start);
        if label[start] != usize::MAX || !map.is_free(c) {
            continue;
        }
        let mut comp = vec![c];
        label[start] = start;
        stack.push(c);
        while let Some(u) = stack.pop() {
            for v in map.neighbors4(u) {
                let j = map.index(v);
                if label[j] == usize::MAX && map.is_free(v) {
                    label[j] = start;
                    comp.push(v);
                    stack.push(v);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort();
    let keep = best.first().map(|c| label[map.index(*c)]);
    for i in 0..map.len() {
        let c = map.cell_at(i);
        if map.is_free(c) && Some(label[i]) != keep {
            map.set(c, CellState::Occ);
        }
    }
    best
}

/// Samples a connectivity-repaired map and places robots, then dynamic
/// obstacles, on distinct free cells. Deterministic per seed.
pub fn generate_scenario(params: &ScenarioParams, seed: u64) -> Result<Scenario> {
    let needed = params.robots + params.dynamic_obstacles;
    for attempt in 0..=params.max_retries {
        let map_seed = if attempt == 0 { seed } else { derive_seed(seed, u64::from(attempt)) };
        let mut rng = ChaCha8Rng::seed_from_u64(map_seed);
        let mut truth = sample_static_map(params.width, params.height, params.static_density, &mut rng)?;
        let component = repair_connectivity(&mut truth);
        if component.len() < needed {
            log::debug!("seed {map_seed}: free component of {} cells is too small, regenerating", component.len());
            continue;
        }
        let picks = sample(&mut rng, component.len(), needed).into_vec();
        let robots = picks[..params.robots].iter().map(|&k| component[k]).collect();
        let obstacles = picks[params.robots..].iter().map(|&k| component[k]).collect();
        let static_density = truth.count(CellState::Occ) as f64 / truth.len() as f64;
        return Ok(Scenario { truth, robots, obstacles, map_seed, static_density });
    }
    Err(Error::Config(format!(
        "no map with a free component of {needed} cells after {} retries",
        params.max_retries
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::bfs_distance_field;

    fn params(w: usize, p: f64, robots: usize, obstacles: usize) -> ScenarioParams {
        ScenarioParams {
            width: w,
            height: w,
            robots,
            static_density: p,
            dynamic_obstacles: obstacles,
            ..Default::default()
        }
    }

    #[test]
    fn empty_density_is_all_free() {
        let s = generate_scenario(&params(10, 0.0, 2, 3), 1).unwrap();
        assert_eq!(s.truth.count(CellState::Occ), 0);
        assert_eq!(s.static_density, 0.0);
    }

    #[test]
    fn same_seed_same_scenario() {
        let p = params(30, 0.3, 4, 16);
        assert_eq!(generate_scenario(&p, 5).unwrap(), generate_scenario(&p, 5).unwrap());
        assert_ne!(generate_scenario(&p, 5).unwrap(), generate_scenario(&p, 6).unwrap());
    }

    #[test]
    fn density_concentrates_before_repair() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_static_map(40, 40, 0.3, &mut rng).unwrap();
            let frac = m.count(CellState::Occ) as f64 / m.len() as f64;
            assert!((frac - 0.3).abs() <= 0.03, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn placements_are_distinct_free_and_connected() {
        for seed in 0..30 {
            let s = generate_scenario(&params(25, 0.35, 6, 20), seed).unwrap();
            let mut all: Vec<Cell> = s.robots.iter().chain(&s.obstacles).copied().collect();
            assert!(all.iter().all(|c| s.truth.is_free(*c)));
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 26);
            let field = bfs_distance_field(&s.truth, s.robots[0]).unwrap();
            // Every free cell is in the single kept component.
            assert!(s.truth.cells().filter(|c| s.truth.is_free(*c)).all(|c| field.is_reachable(c)));
        }
    }

    #[test]
    fn impossible_requests_error() {
        let mut p = params(3, 0.0, 5, 5);
        p.max_retries = 2;
        assert!(generate_scenario(&p, 0).is_err());
    }

    #[test]
    fn repair_keeps_largest_component() {
        let mut m = GridMap::from_ascii("..#.\n..#.\n###.\n....\n").unwrap();
        let kept = repair_connectivity(&mut m);
        assert_eq!(kept.len(), 7);
        assert_eq!(m.to_ascii(), "###.\n###.\n###.\n....\n");
    }
}
