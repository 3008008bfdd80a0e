//! Hierarchical cooperative exploration planning per sub-map: subspace
//! status bookkeeping, viewpoint sampling with greedy set cover, local TSP
//! coverage paths, and min-max multi-depot vehicle routing over the
//! exploring subspaces.

pub mod mdvrp;
mod planner;
pub mod tsp;

pub use mdvrp::{
    solve_minmax_mdvrp, solve_minmax_mdvrp_exact, DistanceMatrix, GlobalPlan, MdvrpError,
    EXACT_MAX_AGENTS, EXACT_MAX_CELLS,
};
pub use planner::{
    build_distance_matrix, hierarchical_plan, plan_local_path, sample_viewpoints, ExploreAgent,
    ExploreParams, HierarchicalOutcome, LocalPath, PlannedPath, SubmapPlanInfo, Viewpoint,
};

use std::collections::BTreeMap;

use crate::nav::{CoverageMap, SubspaceIdx};

/// Coverage status of one subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SubspaceStatus {
    Unexplored,
    Exploring,
    Explored,
}

#[derive(Debug, Clone)]
pub struct SubspaceCell {
    pub status: SubspaceStatus,
    /// Outstanding work: uncovered surface plus unresolved frontier cells.
    pub uncovered: usize,
}

/// Even division of a sub-map's frame into square planning subspaces.
///
/// Statuses move only forward: a subspace that reaches Explored stays
/// Explored for the lifetime of its sub-map, even if later observations add
/// surface inside it (neighbors' viewpoints mop that up).
#[derive(Debug, Clone)]
pub struct SubspaceGrid {
    cell_m: f64,
    cells: BTreeMap<SubspaceIdx, SubspaceCell>,
}

impl SubspaceGrid {
    pub fn new(cell_m: f64) -> Self {
        SubspaceGrid {
            cell_m,
            cells: BTreeMap::new(),
        }
    }

    pub fn cell_m(&self) -> f64 {
        self.cell_m
    }

    pub fn status(&self, idx: SubspaceIdx) -> SubspaceStatus {
        self.cells
            .get(&idx)
            .map(|c| c.status)
            .unwrap_or(SubspaceStatus::Unexplored)
    }

    pub fn uncovered(&self, idx: SubspaceIdx) -> usize {
        self.cells.get(&idx).map(|c| c.uncovered).unwrap_or(0)
    }

    /// Center of a subspace in the sub-map frame, meters.
    pub fn centroid(&self, idx: SubspaceIdx) -> (f64, f64) {
        (
            (idx.0 as f64 + 0.5) * self.cell_m,
            (idx.1 as f64 + 0.5) * self.cell_m,
        )
    }

    pub fn exploring_cells(&self) -> Vec<SubspaceIdx> {
        self.cells
            .iter()
            .filter(|(_, c)| c.status == SubspaceStatus::Exploring)
            .map(|(idx, _)| *idx)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SubspaceIdx, &SubspaceCell)> {
        self.cells.iter()
    }

    /// Recompute statuses and uncovered counters from the map.
    pub fn refresh(&mut self, map: &CoverageMap) {
        for &s in map.observed_subspaces() {
            let uncovered = map.uncovered_in(s);
            let entry = self.cells.entry(s).or_insert(SubspaceCell {
                status: SubspaceStatus::Unexplored,
                uncovered: 0,
            });
            entry.uncovered = uncovered;
            entry.status = match entry.status {
                SubspaceStatus::Explored => SubspaceStatus::Explored,
                _ => {
                    if uncovered > 0 {
                        SubspaceStatus::Exploring
                    } else {
                        SubspaceStatus::Explored
                    }
                }
            };
        }
    }
}

/// Fold freshly integrated observations into the subspace statuses.
pub fn update_subspace_status(grid: &mut SubspaceGrid, map: &CoverageMap) {
    grid.refresh(map);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_world, raycast, Pose2};

    #[test]
    fn initial_state_all_unexplored() {
        let grid = SubspaceGrid::new(10.0);
        assert_eq!(grid.status((0, 0)), SubspaceStatus::Unexplored);
        assert!(grid.exploring_cells().is_empty());
    }

    #[test]
    fn single_viewpoint_explores_small_room() {
        // An 8 m room inside one 10 m subspace: one central scan sees and
        // covers every wall.
        let n = 32;
        let text = format!("{}\n", ".".repeat(n)).repeat(n);
        let world = load_world(&text, 0.25).unwrap();
        let mut map = CoverageMap::new(0.25, 10.0);
        let pose = Pose2::new(4.0, 4.0, 0.0);
        let scan = raycast(&world, &pose, 720, 30.0).unwrap();
        map.integrate_scan(&pose, &scan);
        map.sweep_cover((4.0, 4.0), 30.0);

        let mut grid = SubspaceGrid::new(10.0);
        update_subspace_status(&mut grid, &map);
        assert_eq!(grid.status((0, 0)), SubspaceStatus::Explored);
    }

    #[test]
    fn partial_coverage_is_exploring_and_explored_is_sticky() {
        // A 20 m x 8 m strip spanning two subspaces; scan and cover only the
        // left end.
        let text = format!("{}\n", ".".repeat(80)).repeat(32);
        let world = load_world(&text, 0.25).unwrap();
        let mut map = CoverageMap::new(0.25, 10.0);
        let pose = Pose2::new(3.0, 4.0, 0.0);
        let scan = raycast(&world, &pose, 720, 8.0).unwrap();
        map.integrate_scan(&pose, &scan);
        map.sweep_cover((3.0, 4.0), 4.0);

        let mut grid = SubspaceGrid::new(10.0);
        update_subspace_status(&mut grid, &map);
        assert_eq!(grid.status((0, 0)), SubspaceStatus::Exploring);

        // Cover everything seen so far: the subspace flips to Explored...
        map.sweep_cover((3.0, 4.0), 8.0);
        let scan = raycast(&world, &pose, 720, 30.0).unwrap();
        map.integrate_scan(&pose, &scan);
        map.sweep_cover((3.0, 4.0), 30.0);
        update_subspace_status(&mut grid, &map);
        let settled = grid.status((0, 0));
        // ...and never goes back, whatever is observed later.
        let pose2 = Pose2::new(17.0, 4.0, 0.0);
        let scan2 = raycast(&world, &pose2, 720, 30.0).unwrap();
        map.integrate_scan(&pose2, &scan2);
        update_subspace_status(&mut grid, &map);
        if settled == SubspaceStatus::Explored {
            assert_eq!(grid.status((0, 0)), SubspaceStatus::Explored);
        }
    }
}
