//! Viewpoint sampling, local coverage paths, the routing distance matrix,
//! and the per-cycle hierarchical plan that splices local paths into the
//! global min-max routes.

use std::collections::{BTreeMap, BTreeSet};

use super::mdvrp::{solve_minmax_mdvrp, DistanceMatrix};
use super::tsp::nn_two_opt_open;
use super::GlobalPlan;
use crate::merge::SubMap;
use crate::nav::{astar_fine, CoverageMap, Passable, Roadmap, SubspaceIdx};
use crate::perception::AgentId;
use crate::world::{GridCell, Pose2};

/// Tunables of the exploration planner.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExploreParams {
    /// Side length of the square planning subspaces, meters.
    pub subspace_m: f64,
    /// Coverage range: a surface cell is covered once seen with line of
    /// sight within this range.
    pub sensor_range: f64,
    /// Spacing of the candidate viewpoint lattice, meters.
    pub lattice_m: f64,
    /// Fraction of the currently visible uncovered surface a viewpoint set
    /// must cover before sampling stops.
    pub coverage_goal: f64,
    /// How far beyond the subspace to gather uncovered cells when scoring
    /// viewpoints.
    pub local_margin_m: f64,
    /// Coarse roadmap cell size, meters.
    pub roadmap_coarse_m: f64,
}

impl Default for ExploreParams {
    fn default() -> Self {
        ExploreParams {
            subspace_m: 10.0,
            sensor_range: 30.0,
            lattice_m: 2.0,
            coverage_goal: 0.99,
            local_margin_m: 5.0,
            roadmap_coarse_m: 1.0,
        }
    }
}

/// A sampled sensor pose and the uncovered cells it would see.
#[derive(Debug, Clone)]
pub struct Viewpoint {
    pub pose: Pose2,
    pub covered_surface: BTreeSet<GridCell>,
}

/// Greedy set-cover viewpoint sampling for one exploring subspace.
///
/// Candidates sit on a lattice over the subspace (plus one lattice step of
/// margin) restricted to known-free cells; each is scored by the uncovered
/// cells it newly sees, and selection stops once `coverage_goal` of the
/// visible uncovered set is covered or no candidate adds anything.
pub fn sample_viewpoints(
    map: &CoverageMap,
    cell: SubspaceIdx,
    params: &ExploreParams,
) -> Vec<Viewpoint> {
    if map.uncovered_in(cell) == 0 {
        return Vec::new();
    }
    let sub_m = map.subspace_m();
    let x0 = cell.0 as f64 * sub_m;
    let y0 = cell.1 as f64 * sub_m;

    // Outstanding cells near this subspace.
    let margin = params.local_margin_m;
    let uncovered: Vec<GridCell> = map
        .uncovered_cells()
        .into_iter()
        .filter(|c| {
            let (px, py) = map.center_of(*c);
            px >= x0 - margin
                && px < x0 + sub_m + margin
                && py >= y0 - margin
                && py < y0 + sub_m + margin
        })
        .collect();
    if uncovered.is_empty() {
        return Vec::new();
    }

    // Candidate poses on the lattice, known-free only.
    let step = params.lattice_m;
    let lo_kx = ((x0 - step) / step).floor() as i32;
    let hi_kx = ((x0 + sub_m + step) / step).ceil() as i32;
    let lo_ky = ((y0 - step) / step).floor() as i32;
    let hi_ky = ((y0 + sub_m + step) / step).ceil() as i32;
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for ky in lo_ky..hi_kx.max(hi_ky) {
        for kx in lo_kx..hi_kx {
            if ky < lo_ky || ky >= hi_ky {
                continue;
            }
            let p = ((kx as f64 + 0.5) * step, (ky as f64 + 0.5) * step);
            if map.is_known_free(map.cell_of(p)) {
                candidates.push(p);
            }
        }
    }
    if candidates.is_empty() {
        return Vec::new();
    }

    // Visibility sets, computed once per candidate.
    let vis: Vec<BTreeSet<GridCell>> = candidates
        .iter()
        .map(|&p| {
            uncovered
                .iter()
                .filter(|&&c| map.visible(p, c, params.sensor_range))
                .copied()
                .collect()
        })
        .collect();
    let mut visible_any: BTreeSet<GridCell> = BTreeSet::new();
    for v in &vis {
        visible_any.extend(v.iter().copied());
    }
    if visible_any.is_empty() {
        return Vec::new();
    }
    let target = (params.coverage_goal * visible_any.len() as f64).ceil() as usize;

    let mut chosen: Vec<Viewpoint> = Vec::new();
    let mut covered: BTreeSet<GridCell> = BTreeSet::new();
    let mut used = vec![false; candidates.len()];
    while covered.len() < target {
        let mut best: Option<(usize, usize)> = None; // (gain, candidate)
        for (k, v) in vis.iter().enumerate() {
            if used[k] {
                continue;
            }
            let gain = v.difference(&covered).count();
            if gain > 0 && best.is_none_or(|(bg, _)| gain > bg) {
                best = Some((gain, k));
            }
        }
        let Some((_, k)) = best else { break };
        used[k] = true;
        covered.extend(vis[k].iter().copied());
        chosen.push(Viewpoint {
            pose: Pose2::new(candidates[k].0, candidates[k].1, 0.0),
            covered_surface: vis[k].clone(),
        });
    }
    chosen
}

/// An ordered coverage path through a set of viewpoints, in the sub-map
/// frame.
#[derive(Debug, Clone, Default)]
pub struct LocalPath {
    pub waypoints: Vec<Pose2>,
    /// Indices into the input viewpoint list, visit order.
    pub order: Vec<usize>,
    pub length: f64,
    /// Viewpoints dropped because no known-free path reaches them.
    pub dropped: Vec<usize>,
}

const LOCAL_ASTAR_BUDGET: usize = 120_000;

fn cells_to_poses(map: &CoverageMap, cells: &[GridCell]) -> Vec<Pose2> {
    let mut out = Vec::with_capacity(cells.len().saturating_sub(1));
    for w in cells.windows(2) {
        let a = map.center_of(w[0]);
        let b = map.center_of(w[1]);
        out.push(Pose2::new(b.0, b.1, (b.1 - a.1).atan2(b.0 - a.0)));
    }
    out
}

/// Open TSP from the agent pose through all reachable viewpoints:
/// nearest-neighbor construction plus 2-opt, with legs realized by A* over
/// known free space.
pub fn plan_local_path(
    map: &CoverageMap,
    agent_pose: &Pose2,
    viewpoints: &[Viewpoint],
) -> LocalPath {
    if viewpoints.is_empty() {
        return LocalPath::default();
    }
    let start = map.cell_of(agent_pose.position());
    let mut reachable: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    let mut to_cell = Vec::with_capacity(viewpoints.len());
    for (k, vp) in viewpoints.iter().enumerate() {
        let cell = map.cell_of(vp.pose.position());
        to_cell.push(cell);
        if astar_fine(map, Passable::KnownFree, start, cell, LOCAL_ASTAR_BUDGET).is_some() {
            reachable.push(k);
        } else {
            dropped.push(k);
        }
    }
    if reachable.is_empty() {
        return LocalPath {
            dropped,
            ..LocalPath::default()
        };
    }

    // Pairwise legs among {agent} + reachable viewpoints.
    let n = reachable.len() + 1;
    let mut dist = vec![vec![0.0; n]; n];
    let mut legs: BTreeMap<(usize, usize), Vec<GridCell>> = BTreeMap::new();
    let node_cell = |idx: usize| -> GridCell {
        if idx == 0 {
            start
        } else {
            to_cell[reachable[idx - 1]]
        }
    };
    for a in 0..n {
        for b in (a + 1)..n {
            let (cells, len) = astar_fine(
                map,
                Passable::KnownFree,
                node_cell(a),
                node_cell(b),
                LOCAL_ASTAR_BUDGET,
            )
            .expect("viewpoints verified reachable share the free component");
            dist[a][b] = len;
            dist[b][a] = len;
            legs.insert((a, b), cells);
        }
    }

    let (order, length) = nn_two_opt_open(&dist);
    let mut waypoints = Vec::new();
    let mut prev = 0usize;
    for &node in &order {
        let key = (prev.min(node), prev.max(node));
        let cells = legs.get(&key).unwrap();
        if prev < node {
            waypoints.extend(cells_to_poses(map, cells));
        } else {
            let rev: Vec<GridCell> = cells.iter().rev().copied().collect();
            waypoints.extend(cells_to_poses(map, &rev));
        }
        prev = node;
    }
    LocalPath {
        waypoints,
        order: order.into_iter().map(|idx| reachable[idx - 1]).collect(),
        length,
        dropped,
    }
}

/// Pairwise roadmap distances over `{agents} + {cells}`; unreachable pairs
/// are infinity. Each point is represented by the roadmap node nearest it.
pub fn build_distance_matrix(
    roadmap: &Roadmap,
    agent_points: &[(f64, f64)],
    cell_points: &[(f64, f64)],
) -> DistanceMatrix {
    let mut d = DistanceMatrix::new(agent_points.len(), cell_points.len());
    let all: Vec<(f64, f64)> = agent_points.iter().chain(cell_points.iter()).copied().collect();
    let nodes: Vec<Option<GridCell>> = all.iter().map(|&p| roadmap.nearest_node(p)).collect();
    let n = all.len();
    for x in 0..n {
        d.entries[x][x] = 0.0;
        let Some(src) = nodes[x] else { continue };
        let field = roadmap.flood(src);
        for y in (x + 1)..n {
            let dist = nodes[y]
                .and_then(|ny| field.get(&ny).copied())
                .unwrap_or(f64::INFINITY);
            d.entries[x][y] = dist;
            d.entries[y][x] = dist;
        }
    }
    d
}

/// What the exploration planner needs to know about each agent this cycle.
#[derive(Debug, Clone)]
pub struct ExploreAgent {
    pub id: AgentId,
    /// Index into the submaps/roadmaps slices.
    pub submap: usize,
    /// Pose in the sub-map frame.
    pub pose_submap: Pose2,
    /// Under a merge directive this cycle: excluded from the depot set.
    pub busy: bool,
}

/// Planned motion for one agent, in its sub-map frame.
#[derive(Debug, Clone, Default)]
pub struct PlannedPath {
    pub waypoints: Vec<Pose2>,
    /// Assigned subspace route (global plan share).
    pub route: Vec<SubspaceIdx>,
    /// Route length under the distance matrix.
    pub makespan_est: f64,
    pub dropped_viewpoints: usize,
}

/// Per-sub-map summary of one planning cycle.
#[derive(Debug, Clone)]
pub struct SubmapPlanInfo {
    pub submap: usize,
    pub exploring_cells: usize,
    pub makespan: f64,
    pub unreachable_cells: usize,
}

#[derive(Debug, Clone, Default)]
pub struct HierarchicalOutcome {
    pub paths: BTreeMap<AgentId, PlannedPath>,
    pub submaps: Vec<SubmapPlanInfo>,
}

/// One hierarchical planning cycle over every sub-map.
///
/// Per sub-map: route the non-busy member agents over the exploring
/// subspaces with the min-max MDVRP solver (or independently per agent when
/// `independent` is set), then for each agent splice the local coverage path
/// of its first subspace in front of the coarse continuation.
pub fn hierarchical_plan(
    submaps: &[SubMap],
    roadmaps: &[Roadmap],
    agents: &[ExploreAgent],
    params: &ExploreParams,
    independent: bool,
) -> HierarchicalOutcome {
    let mut outcome = HierarchicalOutcome::default();
    for (m_idx, submap) in submaps.iter().enumerate() {
        let roadmap = &roadmaps[m_idx];
        let depots: Vec<&ExploreAgent> = agents
            .iter()
            .filter(|a| a.submap == m_idx && !a.busy)
            .collect();
        if depots.is_empty() {
            continue;
        }
        let exploring = submap.subspaces.exploring_cells();
        if exploring.is_empty() {
            for a in &depots {
                outcome.paths.insert(a.id, PlannedPath::default());
            }
            outcome.submaps.push(SubmapPlanInfo {
                submap: m_idx,
                exploring_cells: 0,
                makespan: 0.0,
                unreachable_cells: 0,
            });
            continue;
        }
        let cell_points: Vec<(f64, f64)> = exploring
            .iter()
            .map(|&c| submap.subspaces.centroid(c))
            .collect();

        let mut makespan = 0.0f64;
        let mut unreachable_cells = 0usize;
        if independent {
            // Baseline: every agent plans alone over the full exploring set.
            for a in &depots {
                let d = build_distance_matrix(roadmap, &[a.pose_submap.position()], &cell_points);
                let plan = solve_minmax_mdvrp(&d);
                unreachable_cells = unreachable_cells.max(plan.unreachable.len());
                makespan = makespan.max(plan.makespan);
                let route = plan.routes[0].clone();
                let planned = assemble_path(submap, roadmap, a, &route, &exploring, &d, 0, params);
                outcome.paths.insert(a.id, planned);
            }
        } else {
            let agent_points: Vec<(f64, f64)> =
                depots.iter().map(|a| a.pose_submap.position()).collect();
            let d = build_distance_matrix(roadmap, &agent_points, &cell_points);
            let plan = solve_minmax_mdvrp(&d);
            unreachable_cells = plan.unreachable.len();
            makespan = plan.makespan;
            for (depot_idx, a) in depots.iter().enumerate() {
                let route = plan.routes[depot_idx].clone();
                let planned =
                    assemble_path(submap, roadmap, a, &route, &exploring, &d, depot_idx, params);
                outcome.paths.insert(a.id, planned);
            }
        }
        outcome.submaps.push(SubmapPlanInfo {
            submap: m_idx,
            exploring_cells: exploring.len(),
            makespan,
            unreachable_cells,
        });
    }
    outcome
}

#[allow(clippy::too_many_arguments)]
fn assemble_path(
    submap: &SubMap,
    roadmap: &Roadmap,
    agent: &ExploreAgent,
    route: &[usize],
    exploring: &[SubspaceIdx],
    d: &DistanceMatrix,
    depot_idx: usize,
    params: &ExploreParams,
) -> PlannedPath {
    let route_cells: Vec<SubspaceIdx> = route.iter().map(|&c| exploring[c]).collect();
    if route_cells.is_empty() {
        return PlannedPath::default();
    }
    let first = route_cells[0];
    let viewpoints = sample_viewpoints(&submap.map, first, params);
    let local = plan_local_path(&submap.map, &agent.pose_submap, &viewpoints);
    let mut waypoints = local.waypoints;
    if waypoints.is_empty() {
        // No usable viewpoint yet: approach the subspace along the roadmap
        // and let the next cycle resample.
        if let Some((pts, _)) = roadmap.path_between(
            agent.pose_submap.position(),
            submap.subspaces.centroid(first),
        ) {
            waypoints.extend(points_to_poses(&pts));
        }
    } else if route_cells.len() > 1 {
        // Coarse continuation toward the next subspace; the receding horizon
        // replans before anything past it executes.
        let cursor = waypoints.last().map(|p| p.position()).unwrap();
        if let Some((pts, _)) =
            roadmap.path_between(cursor, submap.subspaces.centroid(route_cells[1]))
        {
            waypoints.extend(points_to_poses(&pts));
        }
    }
    PlannedPath {
        waypoints,
        route: route_cells,
        makespan_est: GlobalPlan::route_length(d, depot_idx, route),
        dropped_viewpoints: local.dropped.len(),
    }
}

fn points_to_poses(points: &[(f64, f64)]) -> Vec<Pose2> {
    let mut out = Vec::with_capacity(points.len().saturating_sub(1));
    for w in points.windows(2) {
        out.push(Pose2::new(
            w[1].0,
            w[1].1,
            (w[1].1 - w[0].1).atan2(w[1].0 - w[0].0),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_world, raycast};

    fn observed_map(text: &str, res: f64, poses: &[(f64, f64)]) -> CoverageMap {
        let world = load_world(text, res).unwrap();
        let mut map = CoverageMap::new(res, 10.0);
        for &(x, y) in poses {
            let pose = Pose2::new(x, y, 0.0);
            let scan = raycast(&world, &pose, 720, 30.0).unwrap();
            map.integrate_scan(&pose, &scan);
        }
        map
    }

    #[test]
    fn one_viewpoint_covers_open_cell() {
        // 10 m room = one subspace, sensor range 30 m: a single viewpoint
        // suffices.
        let text = format!("{}\n", ".".repeat(40)).repeat(40);
        let map = observed_map(&text, 0.25, &[(5.0, 5.0)]);
        let params = ExploreParams::default();
        let vps = sample_viewpoints(&map, (0, 0), &params);
        assert_eq!(vps.len(), 1);
        assert!(!vps[0].covered_surface.is_empty());
    }

    #[test]
    fn covered_cell_yields_no_viewpoints() {
        let text = format!("{}\n", ".".repeat(40)).repeat(40);
        let mut map = observed_map(&text, 0.25, &[(5.0, 5.0)]);
        map.sweep_cover((5.0, 5.0), 30.0);
        // Force full resolution of frontier corners with more scans.
        let world = load_world(&text, 0.25).unwrap();
        for &(x, y) in &[(2.0, 2.0), (8.0, 2.0), (2.0, 8.0), (8.0, 8.0)] {
            let pose = Pose2::new(x, y, 0.0);
            let scan = raycast(&world, &pose, 720, 30.0).unwrap();
            map.integrate_scan(&pose, &scan);
            map.sweep_cover((x, y), 30.0);
        }
        if map.uncovered_in((0, 0)) == 0 {
            assert!(sample_viewpoints(&map, (0, 0), &ExploreParams::default()).is_empty());
        }
    }

    #[test]
    fn bisected_cell_needs_viewpoints_on_both_sides() {
        // A 10 m cell bisected by a wall with a 2 m door near the top; the
        // two half-rooms cannot be fully seen from one side.
        let mut text = String::new();
        for r in 0..40 {
            for c in 0..40 {
                let wall = (19..=20).contains(&c) && r > 8;
                text.push(if wall { '#' } else { '.' });
            }
            text.push('\n');
        }
        let map = observed_map(&text, 0.25, &[(2.5, 1.0), (2.5, 5.0), (7.5, 5.0), (7.5, 1.0)]);
        let params = ExploreParams::default();
        let vps = sample_viewpoints(&map, (0, 0), &params);
        assert!(vps.len() >= 2, "got {} viewpoints", vps.len());
        let sides: BTreeSet<bool> = vps.iter().map(|v| v.pose.x < 4.875).collect();
        assert_eq!(sides.len(), 2, "viewpoints must fall on both sides");
    }

    #[test]
    fn local_path_square_corners_perimeter_order() {
        let text = format!("{}\n", ".".repeat(80)).repeat(80);
        let map = observed_map(&text, 0.25, &[(10.0, 10.0)]);
        let corners = [(4.0, 4.0), (16.0, 4.0), (16.0, 16.0), (4.0, 16.0)];
        let vps: Vec<Viewpoint> = corners
            .iter()
            .map(|&(x, y)| Viewpoint {
                pose: Pose2::new(x, y, 0.0),
                covered_surface: BTreeSet::from([(0, 0)]),
            })
            .collect();
        let agent = Pose2::new(4.0, 4.0, 0.0);
        let path = plan_local_path(&map, &agent, &vps);
        // Perimeter order from the starting corner: length about 3 sides
        // (first corner is the agent's own position).
        assert!(path.dropped.is_empty());
        assert!((path.length - 36.0).abs() < 2.0, "length {}", path.length);
    }

    #[test]
    fn distance_matrix_symmetric_with_unreachable_infinity() {
        // Two chambers with no connection between them.
        let mut text = String::new();
        for r in 0..40 {
            for c in 0..80 {
                let wall = (38..=41).contains(&c);
                text.push(if wall { '#' } else { '.' });
            }
            text.push('\n');
        }
        let map = observed_map(&text, 0.25, &[(4.0, 5.0), (16.0, 5.0)]);
        let roadmap = Roadmap::build(&map, 1.0);
        let d = build_distance_matrix(&roadmap, &[(4.0, 5.0)], &[(7.0, 5.0), (16.0, 5.0)]);
        assert!(d.agent_cell(0, 0).is_finite());
        assert!(!d.agent_cell(0, 1).is_finite());
        for x in 0..3 {
            for y in 0..3 {
                assert_eq!(d.entries[x][y].to_bits(), d.entries[y][x].to_bits());
            }
            assert_eq!(d.entries[x][x], 0.0);
        }
    }
}
