//! Fidelity-free allocators used as comparison baselines.

use crate::gridworld::{Cell, DistanceField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocatorKind {
    Greedy,
    Hungarian,
    Auction,
}

/// Min-cost assignment of rows to distinct columns. `None` entries are
/// prohibited. Among assignments with the most allowed pairs the total
/// cost is minimal. Returns the column of each row, if any.
pub fn hungarian(cost: &[Vec<Option<u64>>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<Vec<Option<u64>>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let by_col = hungarian(&transposed);
        let mut out = vec![None; rows];
        for (j, i) in by_col.iter().enumerate() {
            if let Some(i) = i {
                out[*i] = Some(j);
            }
        }
        return out;
    }
    // Prohibited pairs cost more than any all-allowed assignment.
    let finite_total: u64 = cost.iter().flatten().flatten().sum();
    let big = (finite_total + 1) as i128;
    let c = |i: usize, j: usize| cost[i][j].map_or(big, |v| v as i128);

    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let inf = i128::MAX / 4;
    let mut u = vec![0i128; rows + 1];
    let mut v = vec![0i128; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=cols {
        if owner[j] != 0 && cost[owner[j] - 1][j - 1].is_some() {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Forward auction with epsilon scaling down to `epsilon`. Bidders value an
/// object at `max_cost + 1 - cost` and drop out once prices have risen so
/// far that they can only be fighting over objects a rival must get. Returns the column of each row, if any.
pub fn auction(cost: &[Vec<Option<u64>>], epsilon: f64) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<Vec<Option<u64>>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let by_col = auction(&transposed, epsilon);
        let mut out = vec![None; rows];
        for (j, i) in by_col.iter().enumerate() {
            if let Some(i) = i {
                out[*i] = Some(j);
            }
        }
        return out;
    }
    let max_cost = cost.iter().flatten().flatten().copied().max().unwrap_or(0);
    // Zero-value dummy bidders square the market so leftover objects are
    // cleared and their prices stay comparable.
    let value = |i: usize, j: usize| if i < rows { cost[i][j].map(|c| (max_cost + 1 - c) as f64) } else { Some(0.0) };
    let bidders = cols;
    let mut prices = vec![0.0f64; cols];
    let mut eps = ((max_cost + 1) as f64 / 2.0).max(epsilon);
    // Prices in a feasible market stay far below this; a bidder whose best
    // net value sinks under it is fighting over objects it cannot win.
    let floor = -((bidders + 1) as f64) * ((max_cost + 1) as f64 + eps);
    let mut assigned: Vec<Option<usize>>;
    loop {
        assigned = vec![None; bidders];
        let mut holder: Vec<Option<usize>> = vec![None; cols];
        let mut queue: Vec<usize> = (0..bidders).rev().collect();
        while let Some(i) = queue.pop() {
            let mut best: Option<(f64, usize)> = None;
            let mut second = f64::NEG_INFINITY;
            for j in 0..cols {
                if let Some(a) = value(i, j) {
                    let net = a - prices[j];
                    match best {
                        Some((b, _)) if net <= b => second = second.max(net),
                        Some((b, _)) => {
                            second = second.max(b);
                            best = Some((net, j));
                        }
                        None => best = Some((net, j)),
                    }
                }
            }
            match best {
                Some((b, j)) if b >= floor => {
                    let runner_up = if second.is_finite() { second } else { b };
                    prices[j] += b - runner_up + eps;
                    if let Some(prev) = holder[j].replace(i) {
                        assigned[prev] = None;
                        queue.push(prev);
                    }
                    assigned[i] = Some(j);
                }
                _ => {}
            }
        }
        if eps <= epsilon {
            break;
        }
        eps = (eps / 4.0).max(epsilon);
    }
    assigned.truncate(rows);
    assigned
}

/// Baseline goals from BFS distance fields. Greedy lets every robot take its
/// nearest reachable frontier, duplicates allowed. Hungarian and auction
/// match robots to distinct frontiers on the distance matrix; a robot left
/// unmatched while it can reach some frontier takes its nearest one.
pub fn allocator_baseline(kind: AllocatorKind, frontiers: &[Cell], fields: &[Option<DistanceField>]) -> Vec<Option<Cell>> {
    let nearest = |i: usize| -> Option<Cell> {
        let field = fields[i].as_ref()?;
        frontiers.iter().filter_map(|&f| field.get(f).map(|d| (d, f))).min().map(|(_, f)| f)
    };
    let cost: Vec<Vec<Option<u64>>> = fields
        .iter()
        .map(|field| frontiers.iter().map(|&f| field.as_ref().and_then(|d| d.get(f)).map(u64::from)).collect())
        .collect();
    let matched = match kind {
        AllocatorKind::Greedy => return (0..fields.len()).map(nearest).collect(),
        AllocatorKind::Hungarian => hungarian(&cost),
        AllocatorKind::Auction => auction(&cost, 1.0),
    };
    matched.iter().enumerate().map(|(i, m)| m.map(|j| frontiers[j]).or_else(|| nearest(i))).collect()
}
