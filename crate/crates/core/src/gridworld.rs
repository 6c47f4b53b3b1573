//! Occupancy grids, sensing, frontiers, BFS distance fields and dynamic obstacles.
//!
//! Everything here works on a four-connected square grid. Cells are addressed
//! by `(row, col)` and ordered row-major, which is the iteration order used
//! everywhere determinism matters.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Occupancy of a single cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellState {
    Free,
    Occ,
    Unk,
}

impl CellState {
    pub fn to_char(self) -> char {
        match self {
            CellState::Free => '.',
            CellState::Occ => '#',
            CellState::Unk => '?',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(CellState::Free),
            '#' => Some(CellState::Occ),
            '?' => Some(CellState::Unk),
            _ => None,
        }
    }
}

/// A grid coordinate. The derived ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn chebyshev(self, other: Cell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    /// The cell reached by `action`, or `None` when it would leave the
    /// non-negative quadrant. Upper bounds are the map's business.
    pub fn step(self, action: Action) -> Option<Cell> {
        let (dr, dc) = action.delta();
        let row = self.row.checked_add_signed(dr)?;
        let col = self.col.checked_add_signed(dc)?;
        Some(Cell { row, col })
    }
}

impl From<(usize, usize)> for Cell {
    fn from((row, col): (usize, usize)) -> Self {
        Cell { row, col }
    }
}

impl From<Cell> for (usize, usize) {
    fn from(c: Cell) -> Self {
        (c.row, c.col)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Discrete robot action. `Up` decreases the row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    /// Fixed enumeration order, used for action sets and tie-breaks.
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }

    fn bit(self) -> u8 {
        match self {
            Action::Up => 1,
            Action::Down => 2,
            Action::Left => 4,
            Action::Right => 8,
            Action::Stay => 16,
        }
    }

    /// The move from `from` to an adjacent (or equal) cell `to`.
    pub fn between(from: Cell, to: Cell) -> Option<Action> {
        Action::ALL.into_iter().find(|a| from.step(*a) == Some(to))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Up" | "up" => Ok(Action::Up),
            "Down" | "down" => Ok(Action::Down),
            "Left" | "left" => Ok(Action::Left),
            "Right" | "right" => Ok(Action::Right),
            "Stay" | "stay" => Ok(Action::Stay),
            other => Err(Error::Parse(format!("unknown action {other:?}"))),
        }
    }
}

/// A subset of [`Action::ALL`], iterated in that fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ActionSet(u8);

impl ActionSet {
    pub fn empty() -> Self {
        ActionSet(0)
    }

    pub fn all() -> Self {
        ActionSet(0b1_1111)
    }

    pub fn insert(&mut self, a: Action) {
        self.0 |= a.bit();
    }

    pub fn contains(self, a: Action) -> bool {
        self.0 & a.bit() != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL.into_iter().filter(move |a| self.contains(*a))
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        let mut set = ActionSet::empty();
        for a in iter {
            set.insert(a);
        }
        set
    }
}

/// Rectangular occupancy grid stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridMap {
    width: usize,
    height: usize,
    cells: Vec<CellState>,
}

impl GridMap {
    pub fn new(width: usize, height: usize, fill: CellState) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {width}x{height}")));
        }
        Ok(GridMap { width, height, cells: vec![fill; width * height] })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn same_shape(&self, other: &GridMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.row < self.height && c.col < self.width
    }

    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.row * self.width + c.col
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> Cell {
        Cell { row: index / self.width, col: index % self.width }
    }

    /// State of `c`; panics when out of bounds.
    #[inline]
    pub fn get(&self, c: Cell) -> CellState {
        self.cells[self.index(c)]
    }

    pub fn try_get(&self, c: Cell) -> Option<CellState> {
        self.in_bounds(c).then(|| self.get(c))
    }

    #[inline]
    pub fn set(&mut self, c: Cell, state: CellState) {
        let i = self.index(c);
        self.cells[i] = state;
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.try_get(c) == Some(CellState::Free)
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|s| **s == state).count()
    }

    /// All cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.cells.len()).map(|i| self.cell_at(i))
    }

    /// In-bounds four-neighbours in `Action::MOVES` order.
    pub fn neighbors4(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        Action::MOVES.into_iter().filter_map(move |a| c.step(a)).filter(|n| self.in_bounds(*n))
    }

    /// Cells of the square window of half-width `radius` around `center`,
    /// clamped to the grid, in row-major order.
    pub fn window(&self, center: Cell, radius: usize) -> impl Iterator<Item = Cell> + '_ {
        let r0 = center.row.saturating_sub(radius);
        let r1 = (center.row + radius).min(self.height - 1);
        let c0 = center.col.saturating_sub(radius);
        let c1 = (center.col + radius).min(self.width - 1);
        (r0..=r1).flat_map(move |row| (c0..=c1).map(move |col| Cell { row, col }))
    }

    /// Parses the `.`/`#`/`?` text format, one row per line.
    pub fn from_ascii(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(Error::Parse("empty map".into()));
        }
        let mut cells = Vec::with_capacity(width * height);
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Parse(format!("row {r} has {} cells, expected {width}", line.chars().count())));
            }
            for (c, ch) in line.chars().enumerate() {
                let state = CellState::from_char(ch)
                    .ok_or_else(|| Error::Parse(format!("invalid character {ch:?} at row {r}, column {c}")))?;
                cells.push(state);
            }
        }
        Ok(GridMap { width, height, cells })
    }

    /// Inverse of [`GridMap::from_ascii`]; every row is newline-terminated.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for row in self.cells.chunks(self.width) {
            out.extend(row.iter().map(|s| s.to_char()));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for GridMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_ascii())
    }
}

/// A robot position with its team index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RobotPose {
    pub id: usize,
    pub cell: Cell,
}

/// Overwrites the sensing window around `pose` with ground truth and marks
/// visible dynamic obstacles as occupied. Returns how many cells in the
/// window were unknown before the call.
pub fn sense_and_fuse(
    shared: &mut GridMap,
    truth: &GridMap,
    obstacles: &DynamicObstacleSet,
    pose: Cell,
    sensing_radius: usize,
) -> Result<usize> {
    if !shared.same_shape(truth) {
        return Err(Error::Config(format!(
            "shared map is {}x{} but ground truth is {}x{}",
            shared.width, shared.height, truth.width, truth.height
        )));
    }
    if sensing_radius == 0 {
        return Err(Error::Config("sensing radius must be at least 1".into()));
    }
    let mut newly_known = 0;
    for c in truth.window(pose, sensing_radius) {
        if shared.get(c) == CellState::Unk {
            newly_known += 1;
        }
        shared.set(c, truth.get(c));
    }
    for o in obstacles.positions() {
        if o.chebyshev(pose) <= sensing_radius && shared.in_bounds(o) {
            shared.set(o, CellState::Occ);
        }
    }
    Ok(newly_known)
}

/// Free cells with at least one unknown four-neighbour, in row-major order.
pub fn extract_frontiers(map: &GridMap) -> Vec<Cell> {
    map.cells()
        .filter(|c| map.get(*c) == CellState::Free)
        .filter(|c| map.neighbors4(*c).any(|n| map.get(n) == CellState::Unk))
        .collect()
}

/// Cheaper check than `!extract_frontiers(map).is_empty()`.
pub fn has_frontier(map: &GridMap) -> bool {
    map.cells()
        .any(|c| map.get(c) == CellState::Free && map.neighbors4(c).any(|n| map.get(n) == CellState::Unk))
}

/// Unit-cost shortest-path lengths from a source through free cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    width: usize,
    source: Cell,
    dist: Vec<u32>,
}

impl DistanceField {
    const UNREACHABLE: u32 = u32::MAX;

    pub fn source(&self) -> Cell {
        self.source
    }

    /// Steps from the source, or `None` when unreachable or out of bounds.
    #[inline]
    pub fn get(&self, c: Cell) -> Option<u32> {
        if c.col >= self.width {
            return None;
        }
        match self.dist.get(c.row * self.width + c.col) {
            Some(&d) if d != Self::UNREACHABLE => Some(d),
            _ => None,
        }
    }

    pub fn is_reachable(&self, c: Cell) -> bool {
        self.get(c).is_some()
    }
}

/// Breadth-first search over free cells. Unknown and occupied cells are
/// never entered.
pub fn bfs_distance_field(map: &GridMap, source: Cell) -> Result<DistanceField> {
    if !map.is_free(source) {
        return Err(Error::InvalidSource(source));
    }
    let mut dist = vec![DistanceField::UNREACHABLE; map.len()];
    let mut queue = VecDeque::new();
    dist[map.index(source)] = 0;
    queue.push_back(source);
    while let Some(c) = queue.pop_front() {
        let next = dist[map.index(c)] + 1;
        for n in map.neighbors4(c) {
            let i = map.index(n);
            if dist[i] == DistanceField::UNREACHABLE && map.get(n) == CellState::Free {
                dist[i] = next;
                queue.push_back(n);
            }
        }
    }
    Ok(DistanceField { width: map.width, source, dist })
}

/// Actions whose target is in bounds, free in `map`, and not occupied by a
/// teammate or a dynamic obstacle. `Stay` is always included.
pub fn feasible_actions(map: &GridMap, pose: Cell, others: &[Cell], obstacles: &[Cell]) -> ActionSet {
    let mut set = ActionSet::empty();
    set.insert(Action::Stay);
    for a in Action::MOVES {
        let Some(target) = pose.step(a) else { continue };
        if map.is_free(target) && !others.contains(&target) && !obstacles.contains(&target) {
            set.insert(a);
        }
    }
    set
}

/// Probability of keeping the current heading on a move step.
pub const HEADING_PERSISTENCE: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct DynamicObstacle {
    pub cell: Cell,
    pub heading: Action,
    rng: ChaCha8Rng,
}

/// Moving obstacles with a shared speed ratio relative to robots.
///
/// Motion rule: an obstacle is due on step `t` when `floor(t * ratio)`
/// advances (so ratio 0.5 moves on even steps). On a due step each obstacle,
/// in index order, keeps its heading with probability
/// [`HEADING_PERSISTENCE`] and otherwise draws a new heading uniformly from
/// the four moves; it then moves one cell unless the target is out of
/// bounds, not free in the ground truth, held by another obstacle, or
/// occupied by a robot.
#[derive(Debug, Clone)]
pub struct DynamicObstacleSet {
    speed_ratio: f64,
    obstacles: Vec<DynamicObstacle>,
}

impl DynamicObstacleSet {
    pub fn new(cells: &[Cell], speed_ratio: f64, seed: u64) -> Result<Self> {
        if !(speed_ratio > 0.0 && speed_ratio <= 1.0) {
            return Err(Error::Config(format!("obstacle speed ratio must be in (0, 1], got {speed_ratio}")));
        }
        let obstacles = cells
            .iter()
            .enumerate()
            .map(|(k, &cell)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64 + 1);
                let heading = Action::MOVES[rng.gen_range(0..4)];
                DynamicObstacle { cell, heading, rng }
            })
            .collect();
        Ok(DynamicObstacleSet { speed_ratio, obstacles })
    }

    pub fn empty() -> Self {
        DynamicObstacleSet { speed_ratio: 0.5, obstacles: Vec::new() }
    }

    pub fn speed_ratio(&self) -> f64 {
        self.speed_ratio
    }

    pub fn len(&self) -> usize {
        self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn obstacles(&self) -> &[DynamicObstacle] {
        &self.obstacles
    }

    pub fn positions(&self) -> impl Iterator<Item = Cell> + '_ {
        self.obstacles.iter().map(|o| o.cell)
    }

    pub fn contains(&self, c: Cell) -> bool {
        self.obstacles.iter().any(|o| o.cell == c)
    }

    /// Obstacles within the Chebyshev window of `radius` around `center`.
    pub fn visible_from(&self, center: Cell, radius: usize) -> Vec<Cell> {
        self.positions().filter(|o| o.chebyshev(center) <= radius).collect()
    }

    pub fn is_due(&self, t: usize) -> bool {
        t == 0 || (t as f64 * self.speed_ratio).floor() > ((t - 1) as f64 * self.speed_ratio).floor()
    }

    /// Advances every obstacle by one step of the motion rule.
    pub fn step(&mut self, truth: &GridMap, robots: &[Cell], t: usize) {
        if !self.is_due(t) {
            return;
        }
        for k in 0..self.obstacles.len() {
            let obstacle = &mut self.obstacles[k];
            if obstacle.rng.gen::<f64>() >= HEADING_PERSISTENCE {
                obstacle.heading = Action::MOVES[obstacle.rng.gen_range(0..4)];
            }
            let Some(target) = obstacle.cell.step(obstacle.heading) else { continue };
            if !truth.is_free(target) || robots.contains(&target) {
                continue;
            }
            if self.obstacles.iter().any(|o| o.cell == target) {
                continue;
            }
            self.obstacles[k].cell = target;
        }
    }
}

/// Functional form of [`DynamicObstacleSet::step`].
pub fn step_dynamic_obstacles(
    obstacles: &DynamicObstacleSet,
    truth: &GridMap,
    robots: &[Cell],
    t: usize,
) -> DynamicObstacleSet {
    let mut next = obstacles.clone();
    next.step(truth, robots, t);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, p_occ: f64, p_unk: f64) -> GridMap {
        let mut m = GridMap::new(w, h, CellState::Free).unwrap();
        for c in m.clone().cells() {
            let x: f64 = rng.gen();
            let s = if x < p_occ {
                CellState::Occ
            } else if x < p_occ + p_unk {
                CellState::Unk
            } else {
                CellState::Free
            };
            m.set(c, s);
        }
        m
    }

    #[test]
    fn sensing_center_of_unknown_map() {
        let mut shared = GridMap::new(5, 5, CellState::Unk).unwrap();
        let truth = GridMap::new(5, 5, CellState::Free).unwrap();
        let n = sense_and_fuse(&mut shared, &truth, &DynamicObstacleSet::empty(), Cell::new(2, 2), 1).unwrap();
        assert_eq!(n, 9);
        assert_eq!(shared.to_ascii(), "?????\n?...?\n?...?\n?...?\n?????\n");
    }

    #[test]
    fn sensing_is_idempotent_without_obstacles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_map(&mut rng, 10, 10, 0.3, 0.0);
        let mut shared = GridMap::new(10, 10, CellState::Unk).unwrap();
        let empty = DynamicObstacleSet::empty();
        sense_and_fuse(&mut shared, &truth, &empty, Cell::new(4, 6), 2).unwrap();
        let once = shared.clone();
        assert_eq!(sense_and_fuse(&mut shared, &truth, &empty, Cell::new(4, 6), 2).unwrap(), 0);
        assert_eq!(shared, once);
    }

    #[test]
    fn sensing_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let truth = random_map(&mut rng, 10, 10, 0.3, 0.0);
            let before = random_map(&mut rng, 10, 10, 0.1, 0.6);
            let pose = Cell::new(rng.gen_range(0..10), rng.gen_range(0..10));
            let mut shared = before.clone();
            sense_and_fuse(&mut shared, &truth, &DynamicObstacleSet::empty(), pose, 3).unwrap();
            for r in 0..10 {
                for c in 0..10 {
                    let dr = (r as i64 - pose.row as i64).abs();
                    let dc = (c as i64 - pose.col as i64).abs();
                    let cell = Cell::new(r, c);
                    let expected = if dr <= 3 && dc <= 3 { truth.get(cell) } else { before.get(cell) };
                    assert_eq!(shared.get(cell), expected);
                }
            }
        }
    }

    #[test]
    fn sensing_marks_visible_obstacles_only() {
        let truth = GridMap::new(9, 1, CellState::Free).unwrap();
        let mut shared = GridMap::new(9, 1, CellState::Unk).unwrap();
        let obstacles = DynamicObstacleSet::new(&[Cell::new(0, 2), Cell::new(0, 8)], 0.5, 1).unwrap();
        sense_and_fuse(&mut shared, &truth, &obstacles, Cell::new(0, 0), 3).unwrap();
        assert_eq!(shared.to_ascii(), "..#.?????\n");
    }

    #[test]
    fn sensing_rejects_mismatched_maps() {
        let mut shared = GridMap::new(4, 4, CellState::Unk).unwrap();
        let truth = GridMap::new(5, 4, CellState::Free).unwrap();
        let err = sense_and_fuse(&mut shared, &truth, &DynamicObstacleSet::empty(), Cell::new(0, 0), 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn frontiers_around_unknown_center() {
        let m = GridMap::from_ascii("...\n.?.\n...\n").unwrap();
        assert_eq!(
            extract_frontiers(&m),
            vec![Cell::new(0, 1), Cell::new(1, 0), Cell::new(1, 2), Cell::new(2, 1)]
        );
    }

    #[test]
    fn known_map_has_no_frontiers() {
        let m = GridMap::from_ascii("..#\n#..\n").unwrap();
        assert!(extract_frontiers(&m).is_empty());
        assert!(!has_frontier(&m));
    }

    #[test]
    fn frontiers_match_definition_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = random_map(&mut rng, 20, 20, 0.2, 0.3);
            let mut expected = Vec::new();
            for r in 0..20i64 {
                for c in 0..20i64 {
                    if m.get(Cell::new(r as usize, c as usize)) != CellState::Free {
                        continue;
                    }
                    let unk = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
                        let (nr, nc) = (r + dr, c + dc);
                        (0..20).contains(&nr)
                            && (0..20).contains(&nc)
                            && m.get(Cell::new(nr as usize, nc as usize)) == CellState::Unk
                    });
                    if unk {
                        expected.push(Cell::new(r as usize, c as usize));
                    }
                }
            }
            assert_eq!(extract_frontiers(&m), expected);
            assert_eq!(has_frontier(&m), !expected.is_empty());
        }
    }

    #[test]
    fn bfs_corridor() {
        let m = GridMap::from_ascii(".....\n").unwrap();
        let f = bfs_distance_field(&m, Cell::new(0, 0)).unwrap();
        let d: Vec<_> = (0..5).map(|c| f.get(Cell::new(0, c))).collect();
        assert_eq!(d, vec![Some(0), Some(1), Some(2), Some(3), Some(4)]);
    }

    #[test]
    fn bfs_wall_separates_region() {
        let m = GridMap::from_ascii("..#..\n..#..\n").unwrap();
        let f = bfs_distance_field(&m, Cell::new(0, 0)).unwrap();
        assert_eq!(f.get(Cell::new(1, 1)), Some(2));
        assert_eq!(f.get(Cell::new(0, 3)), None);
        assert_eq!(f.get(Cell::new(1, 4)), None);
        assert_eq!(f.get(Cell::new(0, 2)), None);
    }

    #[test]
    fn bfs_rejects_non_free_source() {
        let m = GridMap::from_ascii(".?#\n").unwrap();
        assert!(matches!(bfs_distance_field(&m, Cell::new(0, 1)), Err(Error::InvalidSource(_))));
        assert!(matches!(bfs_distance_field(&m, Cell::new(0, 2)), Err(Error::InvalidSource(_))));
    }

    fn dijkstra(m: &GridMap, s: Cell) -> Vec<Option<u32>> {
        let mut best = vec![None; m.len()];
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0u32, s.row, s.col)));
        while let Some(Reverse((d, r, c))) = heap.pop() {
            let i = r * m.width() + c;
            if best[i].is_some() {
                continue;
            }
            best[i] = Some(d);
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= m.height() as i64 || nc >= m.width() as i64 {
                    continue;
                }
                if m.get(Cell::new(nr as usize, nc as usize)) == CellState::Free {
                    heap.push(Reverse((d + 1, nr as usize, nc as usize)));
                }
            }
        }
        best
    }

    #[test]
    fn bfs_matches_dijkstra() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let m = random_map(&mut rng, 15, 15, 0.3, 0.1);
            let Some(s) = m.cells().find(|c| m.get(*c) == CellState::Free) else { continue };
            let f = bfs_distance_field(&m, s).unwrap();
            let oracle = dijkstra(&m, s);
            for c in m.cells() {
                assert_eq!(f.get(c), oracle[m.index(c)], "cell {c}");
            }
        }
    }

    #[test]
    fn obstacles_idle_on_odd_steps() {
        let truth = GridMap::new(10, 10, CellState::Free).unwrap();
        let mut set = DynamicObstacleSet::new(&[Cell::new(5, 5), Cell::new(2, 2)], 0.5, 4).unwrap();
        let before: Vec<_> = set.positions().collect();
        for t in [1, 3, 5, 99] {
            set.step(&truth, &[], t);
            assert_eq!(set.positions().collect::<Vec<_>>(), before);
        }
        assert!(set.is_due(0) && set.is_due(2) && !set.is_due(1));
    }

    #[test]
    fn boxed_in_obstacle_never_moves() {
        let truth = GridMap::from_ascii("###\n#.#\n###\n").unwrap();
        let mut set = DynamicObstacleSet::new(&[Cell::new(1, 1)], 0.5, 8).unwrap();
        for t in 0..50 {
            set.step(&truth, &[], t);
            assert_eq!(set.positions().next(), Some(Cell::new(1, 1)));
        }
    }

    #[test]
    fn obstacles_do_not_enter_robot_cells() {
        let truth = GridMap::from_ascii("...\n").unwrap();
        let mut set = DynamicObstacleSet::new(&[Cell::new(0, 1)], 1.0, 2).unwrap();
        for t in 0..100 {
            set.step(&truth, &[Cell::new(0, 0), Cell::new(0, 2)], t);
            assert_eq!(set.positions().next(), Some(Cell::new(0, 1)));
        }
    }

    /// Independent transcription of the documented motion rule.
    fn replay(truth: &GridMap, start: &[Cell], seed: u64, steps: usize) -> Vec<Vec<Cell>> {
        let moves = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
        let mut rngs: Vec<ChaCha8Rng> = (0..start.len())
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(k as u64 + 1);
                r
            })
            .collect();
        let mut heading: Vec<usize> = rngs.iter_mut().map(|r| r.gen_range(0..4)).collect();
        let mut pos: Vec<(i64, i64)> = start.iter().map(|c| (c.row as i64, c.col as i64)).collect();
        let mut out = Vec::new();
        for t in 0..steps {
            if t % 2 == 0 {
                for k in 0..pos.len() {
                    if rngs[k].gen::<f64>() >= 0.8 {
                        heading[k] = rngs[k].gen_range(0..4);
                    }
                    let (dr, dc) = moves[heading[k]];
                    let (nr, nc) = (pos[k].0 + dr, pos[k].1 + dc);
                    let inside = nr >= 0 && nc >= 0 && nr < truth.height() as i64 && nc < truth.width() as i64;
                    if !inside || truth.get(Cell::new(nr as usize, nc as usize)) != CellState::Free {
                        continue;
                    }
                    if pos.contains(&(nr, nc)) {
                        continue;
                    }
                    pos[k] = (nr, nc);
                }
            }
            out.push(pos.iter().map(|&(r, c)| Cell::new(r as usize, c as usize)).collect());
        }
        out
    }

    #[test]
    fn obstacle_trajectory_matches_replay() {
        let mut truth = GridMap::new(10, 10, CellState::Free).unwrap();
        truth.set(Cell::new(4, 4), CellState::Occ);
        truth.set(Cell::new(4, 5), CellState::Occ);
        let start = [Cell::new(0, 0), Cell::new(5, 5), Cell::new(9, 9), Cell::new(3, 4)];
        let expected = replay(&truth, &start, 77, 100);
        let mut set = DynamicObstacleSet::new(&start, 0.5, 77).unwrap();
        for (t, want) in expected.iter().enumerate() {
            set.step(&truth, &[], t);
            assert_eq!(&set.positions().collect::<Vec<_>>(), want, "step {t}");
            for p in set.positions() {
                assert!(truth.is_free(p));
            }
        }
    }

    #[test]
    fn feasible_in_open_space() {
        let m = GridMap::new(5, 5, CellState::Free).unwrap();
        assert_eq!(feasible_actions(&m, Cell::new(2, 2), &[], &[]), ActionSet::all());
    }

    #[test]
    fn feasible_in_dead_end() {
        let m = GridMap::from_ascii("###\n#.#\n#.#\n").unwrap();
        let set = feasible_actions(&m, Cell::new(1, 1), &[], &[]);
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![Action::Down, Action::Stay]);
    }

    #[test]
    fn feasible_matches_rule_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let m = random_map(&mut rng, 6, 6, 0.25, 0.15);
            let pose = Cell::new(rng.gen_range(0..6), rng.gen_range(0..6));
            let others: Vec<Cell> = (0..4).map(|_| Cell::new(rng.gen_range(0..6), rng.gen_range(0..6))).collect();
            let obs: Vec<Cell> = (0..3).map(|_| Cell::new(rng.gen_range(0..6), rng.gen_range(0..6))).collect();
            let set = feasible_actions(&m, pose, &others, &obs);
            for (a, (dr, dc)) in [(Action::Up, (-1i64, 0i64)), (Action::Down, (1, 0)), (Action::Left, (0, -1)), (Action::Right, (0, 1))] {
                let (r, c) = (pose.row as i64 + dr, pose.col as i64 + dc);
                let ok = r >= 0
                    && c >= 0
                    && r < 6
                    && c < 6
                    && m.get(Cell::new(r as usize, c as usize)) == CellState::Free
                    && !others.contains(&Cell::new(r as usize, c as usize))
                    && !obs.contains(&Cell::new(r as usize, c as usize));
                assert_eq!(set.contains(a), ok);
            }
            assert!(set.contains(Action::Stay));
        }
    }

    #[test]
    fn ascii_round_trip() {
        let text = "..#?\n#??.\n....\n";
        let m = GridMap::from_ascii(text).unwrap();
        assert_eq!((m.width(), m.height()), (4, 3));
        assert_eq!(m.to_ascii(), text);
        assert!(GridMap::from_ascii("..\n...\n").is_err());
        assert!(GridMap::from_ascii("..x\n").is_err());
        assert!(GridMap::from_ascii("").is_err());
    }
}
