//! Known-space bookkeeping and search shared by the merge and explore
//! planners: per-frame occupancy beliefs built from scans, surface and
//! frontier sets, line-of-sight tests, fine-grid A*, and the coarse roadmap
//! used for routing distances.
//!
//! Everything here operates on *believed* maps (what some agent or sub-map
//! has observed), never on the ground-truth world.

use std::collections::{BTreeSet, BinaryHeap};

use crate::world::{GridCell, Pose2, Scan, Transform2};

pub const UNKNOWN: u8 = 0;
pub const KNOWN_FREE: u8 = 1;
pub const KNOWN_OBSTACLE: u8 = 2;

/// Index of a planning subspace (see [`crate::explore`]).
pub type SubspaceIdx = (i32, i32);

/// Dense, growable byte grid addressed by signed cell coordinates.
///
/// Local frames are anchored at the agent spawn pose, so coordinates can be
/// negative; the grid grows on demand.
#[derive(Debug, Clone)]
pub struct DenseGrid {
    min: (i32, i32),
    width: i32,
    height: i32,
    data: Vec<u8>,
}

impl DenseGrid {
    pub fn new() -> Self {
        DenseGrid {
            min: (0, 0),
            width: 0,
            height: 0,
            data: Vec::new(),
        }
    }

    pub fn get(&self, cell: GridCell) -> u8 {
        let (x, y) = (cell.0 - self.min.0, cell.1 - self.min.1);
        if x < 0 || y < 0 || x >= self.width || y >= self.height {
            return UNKNOWN;
        }
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, cell: GridCell, value: u8) {
        self.ensure(cell);
        let (x, y) = (cell.0 - self.min.0, cell.1 - self.min.1);
        self.data[(y * self.width + x) as usize] = value;
    }

    /// Inclusive-exclusive cell bounds currently backed by storage.
    pub fn bounds(&self) -> ((i32, i32), (i32, i32)) {
        (self.min, (self.min.0 + self.width, self.min.1 + self.height))
    }

    fn ensure(&mut self, cell: GridCell) {
        let inside = cell.0 >= self.min.0
            && cell.1 >= self.min.1
            && cell.0 < self.min.0 + self.width
            && cell.1 < self.min.1 + self.height;
        if inside {
            return;
        }
        const PAD: i32 = 32;
        let new_min = (self.min.0.min(cell.0 - PAD), self.min.1.min(cell.1 - PAD));
        let new_max = (
            (self.min.0 + self.width).max(cell.0 + 1 + PAD),
            (self.min.1 + self.height).max(cell.1 + 1 + PAD),
        );
        let new_w = new_max.0 - new_min.0;
        let new_h = new_max.1 - new_min.1;
        let mut data = vec![UNKNOWN; (new_w * new_h) as usize];
        for y in 0..self.height {
            let src = (y * self.width) as usize;
            let dy = y + self.min.1 - new_min.1;
            let dst = (dy * new_w + (self.min.0 - new_min.0)) as usize;
            data[dst..dst + self.width as usize]
                .copy_from_slice(&self.data[src..src + self.width as usize]);
        }
        self.min = new_min;
        self.width = new_w;
        self.height = new_h;
        self.data = data;
    }
}

impl Default for DenseGrid {
    fn default() -> Self {
        Self::new()
    }
}

/// Occupancy belief over one planar frame plus the derived surface, frontier,
/// and coverage bookkeeping the planners read.
///
/// - surface: known-free cells 4-adjacent to a known obstacle.
/// - frontier: known-free cells 4-adjacent to unknown space.
/// - covered: surface cells already seen from some viewpoint with line of
///   sight within coverage range.
///
/// The planner treats `(surface - covered) + frontier` as the outstanding
/// work; a subspace with none of it left is done.
#[derive(Debug, Clone)]
pub struct CoverageMap {
    resolution: f64,
    subspace_m: f64,
    grid: DenseGrid,
    surface: BTreeSet<GridCell>,
    frontier: BTreeSet<GridCell>,
    covered: BTreeSet<GridCell>,
    observed_subspaces: BTreeSet<SubspaceIdx>,
}

impl CoverageMap {
    pub fn new(resolution: f64, subspace_m: f64) -> Self {
        CoverageMap {
            resolution,
            subspace_m,
            grid: DenseGrid::new(),
            surface: BTreeSet::new(),
            frontier: BTreeSet::new(),
            covered: BTreeSet::new(),
            observed_subspaces: BTreeSet::new(),
        }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn subspace_m(&self) -> f64 {
        self.subspace_m
    }

    pub fn belief(&self, cell: GridCell) -> u8 {
        self.grid.get(cell)
    }

    pub fn is_known_free(&self, cell: GridCell) -> bool {
        self.grid.get(cell) == KNOWN_FREE
    }

    pub fn cell_of(&self, point: (f64, f64)) -> GridCell {
        (
            (point.0 / self.resolution).floor() as i32,
            (point.1 / self.resolution).floor() as i32,
        )
    }

    pub fn center_of(&self, cell: GridCell) -> (f64, f64) {
        (
            (cell.0 as f64 + 0.5) * self.resolution,
            (cell.1 as f64 + 0.5) * self.resolution,
        )
    }

    pub fn subspace_of(&self, cell: GridCell) -> SubspaceIdx {
        let per = (self.subspace_m / self.resolution).round() as i32;
        (cell.0.div_euclid(per), cell.1.div_euclid(per))
    }

    pub fn surface(&self) -> &BTreeSet<GridCell> {
        &self.surface
    }

    pub fn frontier(&self) -> &BTreeSet<GridCell> {
        &self.frontier
    }

    pub fn covered(&self) -> &BTreeSet<GridCell> {
        &self.covered
    }

    pub fn observed_subspaces(&self) -> &BTreeSet<SubspaceIdx> {
        &self.observed_subspaces
    }

    pub fn bounds(&self) -> ((i32, i32), (i32, i32)) {
        self.grid.bounds()
    }

    /// Rasterize a scan taken at `pose` (expressed in this map's frame) into
    /// the belief grid. Obstacle marks win over free marks.
    pub fn integrate_scan(&mut self, pose: &Pose2, scan: &Scan) {
        let res = self.resolution;
        for (k, &range) in scan.ranges.iter().enumerate() {
            let angle = pose.theta + scan.beam_angle(k);
            let (s, c) = angle.sin_cos();
            // Free cells along the beam.
            let mut t = res * 0.5;
            while t < range {
                let cell = self.cell_of((pose.x + t * c, pose.y + t * s));
                if self.grid.get(cell) == UNKNOWN {
                    self.mark(cell, KNOWN_FREE);
                }
                t += res * 0.5;
            }
            // Hit cell, if the beam hit.
            if range < scan.max_range {
                let t_hit = range + res * 0.25;
                let cell = self.cell_of((pose.x + t_hit * c, pose.y + t_hit * s));
                if self.grid.get(cell) != KNOWN_OBSTACLE {
                    self.mark(cell, KNOWN_OBSTACLE);
                }
            }
        }
    }

    /// Force a single cell belief (used when fusing maps).
    pub fn mark(&mut self, cell: GridCell, value: u8) {
        debug_assert!(value == KNOWN_FREE || value == KNOWN_OBSTACLE);
        let old = self.grid.get(cell);
        if old == value || (old == KNOWN_OBSTACLE && value == KNOWN_FREE) {
            return;
        }
        self.grid.set(cell, value);
        self.observed_subspaces.insert(self.subspace_of(cell));
        self.refresh_derived(cell);
        for d in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            self.refresh_derived((cell.0 + d.0, cell.1 + d.1));
        }
    }

    fn refresh_derived(&mut self, cell: GridCell) {
        if self.grid.get(cell) != KNOWN_FREE {
            self.surface.remove(&cell);
            self.frontier.remove(&cell);
            self.covered.remove(&cell);
            return;
        }
        let mut any_obstacle = false;
        let mut any_unknown = false;
        for d in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            match self.grid.get((cell.0 + d.0, cell.1 + d.1)) {
                KNOWN_OBSTACLE => any_obstacle = true,
                UNKNOWN => any_unknown = true,
                _ => {}
            }
        }
        if any_obstacle {
            self.surface.insert(cell);
        } else {
            self.surface.remove(&cell);
            self.covered.remove(&cell);
        }
        if any_unknown {
            self.frontier.insert(cell);
        } else {
            self.frontier.remove(&cell);
        }
    }

    /// Mark as covered every currently uncovered surface cell visible from
    /// `origin` within `range`, and return the newly covered cells.
    pub fn sweep_cover(&mut self, origin: (f64, f64), range: f64) -> Vec<GridCell> {
        let mut newly = Vec::new();
        let lo = self.cell_of((origin.0 - range, origin.1 - range));
        let hi = self.cell_of((origin.0 + range, origin.1 + range));
        let candidates: Vec<GridCell> = self
            .surface
            .iter()
            .filter(|c| c.0 >= lo.0 && c.0 <= hi.0 && c.1 >= lo.1 && c.1 <= hi.1)
            .filter(|c| !self.covered.contains(*c))
            .copied()
            .collect();
        for cell in candidates {
            if self.visible(origin, cell, range) {
                self.covered.insert(cell);
                newly.push(cell);
            }
        }
        newly
    }

    /// True when the straight segment from `origin` to the center of `target`
    /// stays within known-free space (the target cell itself may be surface).
    pub fn visible(&self, origin: (f64, f64), target: GridCell, range: f64) -> bool {
        let center = self.center_of(target);
        let dx = center.0 - origin.0;
        let dy = center.1 - origin.1;
        let dist = (dx * dx + dy * dy).sqrt();
        if dist > range {
            return false;
        }
        if dist < self.resolution {
            return true;
        }
        let steps = (dist / (self.resolution * 0.5)).ceil() as usize;
        for i in 1..steps {
            let t = i as f64 / steps as f64;
            let cell = self.cell_of((origin.0 + t * dx, origin.1 + t * dy));
            if cell == target {
                break;
            }
            if self.grid.get(cell) != KNOWN_FREE {
                return false;
            }
        }
        true
    }

    /// Copy another map into this one through `transform` (cells of `other`
    /// are re-expressed in this map's frame). Obstacle wins on conflict.
    pub fn absorb(&mut self, other: &CoverageMap, transform: &Transform2) {
        let ((min_x, min_y), (max_x, max_y)) = other.grid.bounds();
        for y in min_y..max_y {
            for x in min_x..max_x {
                let v = other.grid.get((x, y));
                if v == UNKNOWN {
                    continue;
                }
                let p = transform.apply_point(other.center_of((x, y)));
                self.mark(self.cell_of(p), v);
            }
        }
        for cell in &other.covered {
            let p = transform.apply_point(other.center_of(*cell));
            let here = self.cell_of(p);
            self.mark_covered(here);
        }
    }

    /// Record an externally computed cover mark (used when replaying another
    /// agent's viewpoint into a fused map). Ignored unless the cell is
    /// currently a surface cell.
    pub fn mark_covered(&mut self, cell: GridCell) {
        if self.surface.contains(&cell) {
            self.covered.insert(cell);
        }
    }

    /// Outstanding work in one subspace: uncovered surface plus frontier.
    pub fn uncovered_in(&self, subspace: SubspaceIdx) -> usize {
        let per = (self.subspace_m / self.resolution).round() as i32;
        let x0 = subspace.0 * per;
        let y0 = subspace.1 * per;
        let in_box =
            |c: &GridCell| c.0 >= x0 && c.0 < x0 + per && c.1 >= y0 && c.1 < y0 + per;
        let unc = self
            .surface
            .iter()
            .filter(|c| in_box(c) && !self.covered.contains(*c))
            .count();
        let fr = self.frontier.iter().filter(|c| in_box(c)).count();
        unc + fr
    }

    /// All outstanding cells (uncovered surface and frontier), sorted.
    pub fn uncovered_cells(&self) -> Vec<GridCell> {
        let mut out: Vec<GridCell> = self
            .surface
            .iter()
            .filter(|c| !self.covered.contains(*c))
            .chain(self.frontier.iter())
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// What an A* query may walk through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Passable {
    /// Only known-free cells.
    KnownFree,
    /// Known-free or unknown cells (optimistic planning into space that has
    /// not been observed yet).
    Optimistic,
}

fn passable(map: &CoverageMap, mode: Passable, cell: GridCell) -> bool {
    match mode {
        Passable::KnownFree => map.belief(cell) == KNOWN_FREE,
        Passable::Optimistic => map.belief(cell) != KNOWN_OBSTACLE,
    }
}

#[derive(PartialEq)]
struct QueueEntry {
    priority: f64,
    cost: f64,
    cell: GridCell,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap by priority; ties broken by cell for determinism.
        other
            .priority
            .partial_cmp(&self.priority)
            .unwrap()
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// A fine-grid A* path between two cells. Returns cell waypoints including
/// both endpoints and the metric path length, or `None` when unreachable
/// (or when the search exceeds `node_budget` expansions).
pub fn astar_fine(
    map: &CoverageMap,
    mode: Passable,
    start: GridCell,
    goal: GridCell,
    node_budget: usize,
) -> Option<(Vec<GridCell>, f64)> {
    if !passable(map, mode, start) || !passable(map, mode, goal) {
        return None;
    }
    let res = map.resolution();
    let h = |c: GridCell| {
        let dx = (c.0 - goal.0).abs() as f64;
        let dy = (c.1 - goal.1).abs() as f64;
        res * (dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy))
    };
    let mut open = BinaryHeap::new();
    let mut best: std::collections::HashMap<GridCell, f64> = std::collections::HashMap::new();
    let mut parent: std::collections::HashMap<GridCell, GridCell> =
        std::collections::HashMap::new();
    best.insert(start, 0.0);
    open.push(QueueEntry {
        priority: h(start),
        cost: 0.0,
        cell: start,
    });
    let mut expanded = 0usize;
    while let Some(entry) = open.pop() {
        let cur = entry.cell;
        if entry.cost > best.get(&cur).copied().unwrap_or(f64::INFINITY) + 1e-12 {
            continue;
        }
        if cur == goal {
            let mut path = vec![goal];
            let mut c = goal;
            while let Some(&p) = parent.get(&c) {
                path.push(p);
                c = p;
            }
            path.reverse();
            return Some((path, entry.cost));
        }
        expanded += 1;
        if expanded > node_budget {
            return None;
        }
        for dy in -1..=1i32 {
            for dx in -1..=1i32 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let next = (cur.0 + dx, cur.1 + dy);
                if !passable(map, mode, next) {
                    continue;
                }
                if dx != 0 && dy != 0 {
                    // No cutting obstacle corners.
                    if !passable(map, mode, (cur.0 + dx, cur.1))
                        || !passable(map, mode, (cur.0, cur.1 + dy))
                    {
                        continue;
                    }
                }
                let step = if dx != 0 && dy != 0 {
                    res * std::f64::consts::SQRT_2
                } else {
                    res
                };
                let cost = entry.cost + step;
                if cost + 1e-12 < best.get(&next).copied().unwrap_or(f64::INFINITY) {
                    best.insert(next, cost);
                    parent.insert(next, cur);
                    open.push(QueueEntry {
                        priority: cost + h(next),
                        cost,
                        cell: next,
                    });
                }
            }
        }
    }
    None
}

/// Coarse traversability graph rebuilt from a [`CoverageMap`] each planning
/// cycle. Routing distances (the planner's distance matrix) come from
/// Dijkstra floods over this graph.
#[derive(Debug, Clone)]
pub struct Roadmap {
    coarse_m: f64,
    nodes: BTreeSet<GridCell>,
}

impl Roadmap {
    /// A coarse cell becomes a node when it contains at least one known-free
    /// fine cell and no known obstacle.
    pub fn build(map: &CoverageMap, coarse_m: f64) -> Roadmap {
        let fine_per_coarse = (coarse_m / map.resolution()).round().max(1.0) as i32;
        let ((min_x, min_y), (max_x, max_y)) = map.bounds();
        let cmin = (
            min_x.div_euclid(fine_per_coarse),
            min_y.div_euclid(fine_per_coarse),
        );
        let cmax = (
            max_x.div_euclid(fine_per_coarse),
            max_y.div_euclid(fine_per_coarse),
        );
        let mut nodes = BTreeSet::new();
        for cy in cmin.1..=cmax.1 {
            for cx in cmin.0..=cmax.0 {
                let mut free = false;
                let mut obstacle = false;
                'cell: for fy in 0..fine_per_coarse {
                    for fx in 0..fine_per_coarse {
                        match map.belief((cx * fine_per_coarse + fx, cy * fine_per_coarse + fy)) {
                            KNOWN_FREE => free = true,
                            KNOWN_OBSTACLE => {
                                obstacle = true;
                                break 'cell;
                            }
                            _ => {}
                        }
                    }
                }
                if free && !obstacle {
                    nodes.insert((cx, cy));
                }
            }
        }
        Roadmap { coarse_m, nodes }
    }

    pub fn coarse_m(&self) -> f64 {
        self.coarse_m
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_of_point(&self, point: (f64, f64)) -> GridCell {
        (
            (point.0 / self.coarse_m).floor() as i32,
            (point.1 / self.coarse_m).floor() as i32,
        )
    }

    pub fn center_of(&self, node: GridCell) -> (f64, f64) {
        (
            (node.0 as f64 + 0.5) * self.coarse_m,
            (node.1 as f64 + 0.5) * self.coarse_m,
        )
    }

    pub fn contains(&self, node: GridCell) -> bool {
        self.nodes.contains(&node)
    }

    /// Nearest node to a metric point by euclidean distance to node centers;
    /// ties broken by node ordering. `None` on an empty roadmap.
    pub fn nearest_node(&self, point: (f64, f64)) -> Option<GridCell> {
        let direct = self.node_of_point(point);
        if self.nodes.contains(&direct) {
            return Some(direct);
        }
        let mut best: Option<(f64, GridCell)> = None;
        for &n in &self.nodes {
            let c = self.center_of(n);
            let d2 = (c.0 - point.0).powi(2) + (c.1 - point.1).powi(2);
            match best {
                Some((bd, _)) if bd <= d2 => {}
                _ => best = Some((d2, n)),
            }
        }
        best.map(|(_, n)| n)
    }

    fn neighbors(&self, cur: GridCell) -> impl Iterator<Item = (GridCell, f64)> + '_ {
        let coarse = self.coarse_m;
        let steps: [(i32, i32); 8] = [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ];
        steps.into_iter().filter_map(move |(dx, dy)| {
            let next = (cur.0 + dx, cur.1 + dy);
            if !self.nodes.contains(&next) {
                return None;
            }
            if dx != 0 && dy != 0 {
                if !self.nodes.contains(&(cur.0 + dx, cur.1))
                    || !self.nodes.contains(&(cur.0, cur.1 + dy))
                {
                    return None;
                }
            }
            let step = if dx != 0 && dy != 0 {
                coarse * std::f64::consts::SQRT_2
            } else {
                coarse
            };
            Some((next, step))
        })
    }

    /// Dijkstra distances (meters) from `src` to every reachable node.
    pub fn flood(&self, src: GridCell) -> std::collections::BTreeMap<GridCell, f64> {
        let mut dist = std::collections::BTreeMap::new();
        if !self.nodes.contains(&src) {
            return dist;
        }
        let mut open = BinaryHeap::new();
        dist.insert(src, 0.0);
        open.push(QueueEntry {
            priority: 0.0,
            cost: 0.0,
            cell: src,
        });
        while let Some(entry) = open.pop() {
            let cur = entry.cell;
            if entry.cost > dist.get(&cur).copied().unwrap_or(f64::INFINITY) + 1e-12 {
                continue;
            }
            for (next, step) in self.neighbors(cur) {
                let cost = entry.cost + step;
                if cost + 1e-12 < dist.get(&next).copied().unwrap_or(f64::INFINITY) {
                    dist.insert(next, cost);
                    open.push(QueueEntry {
                        priority: cost,
                        cost,
                        cell: next,
                    });
                }
            }
        }
        dist
    }

    /// Shortest coarse path between two metric points (snapped to nearest
    /// nodes), as metric waypoints plus length.
    pub fn path_between(&self, from: (f64, f64), to: (f64, f64)) -> Option<(Vec<(f64, f64)>, f64)> {
        let a = self.nearest_node(from)?;
        let b = self.nearest_node(to)?;
        let mut dist = std::collections::BTreeMap::new();
        let mut parent: std::collections::BTreeMap<GridCell, GridCell> =
            std::collections::BTreeMap::new();
        let mut open = BinaryHeap::new();
        dist.insert(a, 0.0);
        open.push(QueueEntry {
            priority: 0.0,
            cost: 0.0,
            cell: a,
        });
        while let Some(entry) = open.pop() {
            let cur = entry.cell;
            if entry.cost > dist.get(&cur).copied().unwrap_or(f64::INFINITY) + 1e-12 {
                continue;
            }
            if cur == b {
                break;
            }
            for (next, step) in self.neighbors(cur) {
                let cost = entry.cost + step;
                if cost + 1e-12 < dist.get(&next).copied().unwrap_or(f64::INFINITY) {
                    dist.insert(next, cost);
                    parent.insert(next, cur);
                    open.push(QueueEntry {
                        priority: cost,
                        cost,
                        cell: next,
                    });
                }
            }
        }
        let total = *dist.get(&b)?;
        let mut nodes = vec![b];
        let mut c = b;
        while let Some(&p) = parent.get(&c) {
            nodes.push(p);
            c = p;
        }
        nodes.reverse();
        Some((nodes.into_iter().map(|n| self.center_of(n)).collect(), total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_world, raycast};

    fn open_map(side_m: f64, res: f64) -> CoverageMap {
        let n = (side_m / res) as usize;
        let text = format!("{}\n", ".".repeat(n)).repeat(n);
        let world = load_world(&text, res).unwrap();
        let mut map = CoverageMap::new(res, 10.0);
        let pose = Pose2::new(side_m / 2.0, side_m / 2.0, 0.0);
        let scan = raycast(&world, &pose, 360, 100.0).unwrap();
        map.integrate_scan(&pose, &scan);
        map
    }

    #[test]
    fn scan_integration_builds_surface() {
        let map = open_map(10.0, 0.25);
        assert!(!map.surface().is_empty());
        // A single center scan of a small closed room sees every wall; only
        // corner shadows may remain as frontier.
        assert!(map.frontier().len() < map.surface().len() / 4);
    }

    #[test]
    fn sweep_cover_covers_visible_surface() {
        let mut map = open_map(10.0, 0.25);
        let newly = map.sweep_cover((5.0, 5.0), 30.0);
        assert_eq!(newly.len(), map.covered().len());
        assert!(map.covered().len() > map.surface().len() * 9 / 10);
        // Second sweep from the same spot adds nothing.
        assert!(map.sweep_cover((5.0, 5.0), 30.0).is_empty());
    }

    #[test]
    fn astar_routes_around_walls() {
        // Two rooms joined by a gap in the dividing wall.
        let mut text = String::new();
        for r in 0..40 {
            for c in 0..40 {
                let wall = c == 20 && !(18..=22).contains(&r);
                text.push(if wall { '#' } else { '.' });
            }
            text.push('\n');
        }
        let world = load_world(&text, 0.5).unwrap();
        let mut map = CoverageMap::new(0.5, 10.0);
        for pose in [
            Pose2::new(5.0, 10.0, 0.0),
            Pose2::new(10.0, 10.0, 0.0),
            Pose2::new(15.0, 10.0, 0.0),
        ] {
            let scan = raycast(&world, &pose, 720, 100.0).unwrap();
            map.integrate_scan(&pose, &scan);
        }
        let start = map.cell_of((5.0, 5.0));
        let goal = map.cell_of((15.0, 5.0));
        let (path, len) = astar_fine(&map, Passable::KnownFree, start, goal, 100_000)
            .expect("rooms are connected through the gap");
        assert!(path.first() == Some(&start) && path.last() == Some(&goal));
        // Any route must detour through the gap near y = 10.
        assert!(len > 10.0);
        assert!(path.iter().any(|c| {
            let (_, y) = map.center_of(*c);
            (9.0..=11.5).contains(&y)
        }));
    }

    #[test]
    fn roadmap_distances_match_straight_line_in_open_space() {
        let map = open_map(20.0, 0.25);
        let roadmap = Roadmap::build(&map, 1.0);
        let a = roadmap.nearest_node((3.0, 3.0)).unwrap();
        let b = roadmap.nearest_node((17.0, 3.0)).unwrap();
        let dist = roadmap.flood(a).get(&b).copied().unwrap();
        assert!((dist - 14.0).abs() < 1.5);
    }

    #[test]
    fn roadmap_excludes_walls() {
        let mut text = String::new();
        for r in 0..40 {
            for c in 0..40 {
                let wall = (16..20).contains(&c) && r >= 8;
                text.push(if wall { '#' } else { '.' });
            }
            text.push('\n');
        }
        let world = load_world(&text, 0.25).unwrap();
        let mut map = CoverageMap::new(0.25, 10.0);
        for pose in [Pose2::new(2.0, 1.0, 0.0), Pose2::new(8.0, 1.0, 0.0)] {
            let scan = raycast(&world, &pose, 720, 100.0).unwrap();
            map.integrate_scan(&pose, &scan);
        }
        let roadmap = Roadmap::build(&map, 1.0);
        // The wall occupies x in [4 m, 5 m), y >= 2 m: no node may sit on it.
        assert!(roadmap.contains((2, 1)));
        assert!(!roadmap.contains((4, 5)));
    }
}
