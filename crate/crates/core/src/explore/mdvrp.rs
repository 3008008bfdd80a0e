//! Min-max multi-depot vehicle routing over the planner's distance matrix:
//! assign every exploring cell to exactly one agent and order each agent's
//! cells so the longest route across the team is as short as possible.
//!
//! The heuristic is a balanced nearest-depot sweep, per-route 2-opt, and a
//! critical-route improvement loop; the exact solver enumerates assignments
//! with Held-Karp orderings and exists as the test oracle for small
//! instances.

use thiserror::Error;

use super::tsp::{held_karp_open, nn_two_opt_open};

#[derive(Debug, Error)]
pub enum MdvrpError {
    #[error("instance above the exact solver cap ({cells} cells, {agents} agents)")]
    AboveExactCap { cells: usize, agents: usize },
}

/// Symmetric travel distances between depots (agents) and targets (cells).
/// Row/column layout: agents first, then cells; `INFINITY` = unreachable.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub agents: usize,
    pub cells: usize,
    pub entries: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn new(agents: usize, cells: usize) -> Self {
        let n = agents + cells;
        DistanceMatrix {
            agents,
            cells,
            entries: vec![vec![f64::INFINITY; n]; n],
        }
    }

    pub fn agent_cell(&self, agent: usize, cell: usize) -> f64 {
        self.entries[agent][self.agents + cell]
    }

    pub fn cell_cell(&self, a: usize, b: usize) -> f64 {
        self.entries[self.agents + a][self.agents + b]
    }
}

/// One route per agent (cell indices, visit order) plus the makespan: the
/// longest route length under the distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPlan {
    pub routes: Vec<Vec<usize>>,
    pub makespan: f64,
    /// Cells no agent could reach; excluded from every route.
    pub unreachable: Vec<usize>,
}

impl GlobalPlan {
    pub fn route_length(d: &DistanceMatrix, agent: usize, route: &[usize]) -> f64 {
        let mut len = 0.0;
        let mut prev: Option<usize> = None;
        for &cell in route {
            len += match prev {
                None => d.agent_cell(agent, cell),
                Some(p) => d.cell_cell(p, cell),
            };
            prev = Some(cell);
        }
        len
    }

    fn makespan_of(d: &DistanceMatrix, routes: &[Vec<usize>]) -> f64 {
        routes
            .iter()
            .enumerate()
            .map(|(agent, route)| Self::route_length(d, agent, route))
            .fold(0.0, f64::max)
    }
}

/// Sub-matrix for one agent and a set of cells, laid out for the TSP
/// routines (node 0 = the agent).
fn tsp_matrix(d: &DistanceMatrix, agent: usize, cells: &[usize]) -> Vec<Vec<f64>> {
    let n = cells.len() + 1;
    let mut m = vec![vec![0.0; n]; n];
    for (x, &cx) in cells.iter().enumerate() {
        m[0][x + 1] = d.agent_cell(agent, cx);
        m[x + 1][0] = m[0][x + 1];
        for (y, &cy) in cells.iter().enumerate() {
            m[x + 1][y + 1] = d.cell_cell(cx, cy);
        }
    }
    m
}

fn route_for(d: &DistanceMatrix, agent: usize, cells: &[usize]) -> Vec<usize> {
    let m = tsp_matrix(d, agent, cells);
    let (order, _) = nn_two_opt_open(&m);
    order.into_iter().map(|idx| cells[idx - 1]).collect()
}

/// Route lengths sorted longest first; the improvement loop minimizes this
/// lexicographically (its head is the makespan).
fn load_profile(d: &DistanceMatrix, routes: &[Vec<usize>]) -> Vec<f64> {
    let mut lengths: Vec<f64> = routes
        .iter()
        .enumerate()
        .map(|(a, r)| GlobalPlan::route_length(d, a, r))
        .collect();
    lengths.sort_by(|x, y| y.partial_cmp(x).unwrap());
    lengths
}

fn profile_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x + 1e-9 < *y {
            return true;
        }
        if *x > y + 1e-9 {
            return false;
        }
    }
    false
}

fn consider(d: &DistanceMatrix, candidate: Vec<Vec<usize>>, best: &mut Option<(Vec<f64>, Vec<Vec<usize>>)>) {
    let profile = load_profile(d, &candidate);
    match best {
        Some((bp, _)) if !profile_less(&profile, bp) => {}
        _ => *best = Some((profile, candidate)),
    }
}

const IMPROVEMENT_CAP: usize = 500;

/// Heuristic min-max MDVRP solver; deterministic, with ties broken by
/// (cell index, agent index).
pub fn solve_minmax_mdvrp(d: &DistanceMatrix) -> GlobalPlan {
    let k = d.agents;
    let mut reachable: Vec<usize> = Vec::new();
    let mut unreachable: Vec<usize> = Vec::new();
    for c in 0..d.cells {
        if (0..k).any(|a| d.agent_cell(a, c).is_finite()) {
            reachable.push(c);
        } else {
            unreachable.push(c);
        }
    }
    if k == 0 {
        return GlobalPlan {
            routes: Vec::new(),
            makespan: 0.0,
            unreachable,
        };
    }

    // Initial assignment: balanced nearest-agent sweep. Small instances also
    // try an uncapped nearest sweep and round-robin rotations, keeping the
    // best improved result; large ones stay single-start for speed.
    let mut starts: Vec<Vec<Vec<usize>>> = vec![
        sweep_assignment(d, k, &reachable, Some(reachable.len().div_ceil(k).max(1))),
    ];
    if reachable.len() <= 12 {
        starts.push(sweep_assignment(d, k, &reachable, None));
        for r in 0..k {
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (pos, &cell) in reachable.iter().enumerate() {
                let mut a = (pos + r) % k;
                if !d.agent_cell(a, cell).is_finite() {
                    a = (0..k)
                        .find(|&x| d.agent_cell(x, cell).is_finite())
                        .unwrap();
                }
                groups[a].push(cell);
            }
            starts.push(groups);
        }
    }

    let mut best_routes: Option<(Vec<f64>, Vec<Vec<usize>>)> = None;
    for assigned in starts {
        let routes = improve(d, k, assigned);
        consider(d, routes, &mut best_routes);
    }
    let routes = best_routes.expect("at least one start").1;

    let makespan = GlobalPlan::makespan_of(d, &routes);
    GlobalPlan {
        routes,
        makespan,
        unreachable,
    }
}

/// Nearest-depot sweep over cells ordered by increasing nearest-depot
/// distance; an optional per-depot capacity keeps the assignment balanced.
fn sweep_assignment(
    d: &DistanceMatrix,
    k: usize,
    reachable: &[usize],
    cap: Option<usize>,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = reachable.to_vec();
    order.sort_by(|&x, &y| {
        let dx = (0..k).map(|a| d.agent_cell(a, x)).fold(f64::INFINITY, f64::min);
        let dy = (0..k).map(|a| d.agent_cell(a, y)).fold(f64::INFINITY, f64::min);
        dx.partial_cmp(&dy).unwrap().then(x.cmp(&y))
    });
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for cell in order {
        let mut depots: Vec<usize> = (0..k).collect();
        depots.sort_by(|&a, &b| {
            d.agent_cell(a, cell)
                .partial_cmp(&d.agent_cell(b, cell))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut placed = false;
        if let Some(cap) = cap {
            for &a in &depots {
                if d.agent_cell(a, cell).is_finite() && assigned[a].len() < cap {
                    assigned[a].push(cell);
                    placed = true;
                    break;
                }
            }
        }
        if !placed {
            for &a in &depots {
                if d.agent_cell(a, cell).is_finite() {
                    assigned[a].push(cell);
                    break;
                }
            }
        }
    }
    assigned
}

/// Critical-route improvement: move or swap one cell between the longest
/// route and another whenever that improves the load profile (sorted route
/// lengths compared lexicographically from the longest), which never
/// increases the makespan and escapes plateaus where only the second-longest
/// route can shrink. Best improving candidate first; candidate enumeration
/// ordered by (cell index, agent index).
fn improve(d: &DistanceMatrix, k: usize, mut assigned: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for cells in assigned.iter_mut() {
        cells.sort_unstable();
    }
    let mut routes: Vec<Vec<usize>> = (0..k).map(|a| route_for(d, a, &assigned[a])).collect();
    for _ in 0..IMPROVEMENT_CAP {
        let profile = load_profile(d, &routes);
        let critical = routes
            .iter()
            .enumerate()
            .map(|(a, r)| (GlobalPlan::route_length(d, a, r), a))
            .max_by(|(x, ai), (y, bi)| x.partial_cmp(y).unwrap().then(bi.cmp(ai)))
            .map(|(_, a)| a)
            .unwrap();

        let mut my_cells = routes[critical].clone();
        my_cells.sort_unstable();
        let mut best: Option<(Vec<f64>, Vec<Vec<usize>>)> = None;
        for &cell in &my_cells {
            for other in 0..k {
                if other == critical {
                    continue;
                }
                // Move `cell` to `other`.
                if d.agent_cell(other, cell).is_finite() {
                    let src: Vec<usize> =
                        my_cells.iter().copied().filter(|&c| c != cell).collect();
                    let mut dst: Vec<usize> = routes[other].clone();
                    dst.push(cell);
                    dst.sort_unstable();
                    let mut candidate = routes.clone();
                    candidate[critical] = route_for(d, critical, &src);
                    candidate[other] = route_for(d, other, &dst);
                    consider(d, candidate, &mut best);
                }
                // Swap `cell` with each of `other`'s cells.
                let mut others = routes[other].clone();
                others.sort_unstable();
                for &theirs in &others {
                    if !d.agent_cell(critical, theirs).is_finite()
                        || !d.agent_cell(other, cell).is_finite()
                    {
                        continue;
                    }
                    let mut src: Vec<usize> =
                        my_cells.iter().copied().filter(|&c| c != cell).collect();
                    src.push(theirs);
                    src.sort_unstable();
                    let mut dst: Vec<usize> =
                        others.iter().copied().filter(|&c| c != theirs).collect();
                    dst.push(cell);
                    dst.sort_unstable();
                    let mut candidate = routes.clone();
                    candidate[critical] = route_for(d, critical, &src);
                    candidate[other] = route_for(d, other, &dst);
                    consider(d, candidate, &mut best);
                }
            }
        }
        match best {
            Some((best_profile, best_routes)) if profile_less(&best_profile, &profile) => {
                routes = best_routes;
            }
            _ => break,
        }
    }
    routes
}

pub const EXACT_MAX_CELLS: usize = 8;
pub const EXACT_MAX_AGENTS: usize = 3;

/// Exact min-max MDVRP by exhaustive assignment enumeration with Held-Karp
/// route orderings. The independent oracle for the heuristic on small
/// instances.
pub fn solve_minmax_mdvrp_exact(d: &DistanceMatrix) -> Result<GlobalPlan, MdvrpError> {
    let k = d.agents;
    if d.cells > EXACT_MAX_CELLS || k > EXACT_MAX_AGENTS {
        return Err(MdvrpError::AboveExactCap {
            cells: d.cells,
            agents: k,
        });
    }
    let mut reachable: Vec<usize> = Vec::new();
    let mut unreachable: Vec<usize> = Vec::new();
    for c in 0..d.cells {
        if (0..k).any(|a| d.agent_cell(a, c).is_finite()) {
            reachable.push(c);
        } else {
            unreachable.push(c);
        }
    }
    if reachable.is_empty() || k == 0 {
        return Ok(GlobalPlan {
            routes: vec![Vec::new(); k],
            makespan: 0.0,
            unreachable,
        });
    }

    let m = reachable.len();
    let combos = (k as u64).pow(m as u32);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for code in 0..combos {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut c = code;
        for &cell in &reachable {
            groups[(c % k as u64) as usize].push(cell);
            c /= k as u64;
        }
        let mut makespan = 0.0;
        let mut routes: Vec<Vec<usize>> = Vec::with_capacity(k);
        let mut feasible = true;
        for (agent, cells) in groups.iter().enumerate() {
            let matrix = tsp_matrix(d, agent, cells);
            match held_karp_open(&matrix, EXACT_MAX_CELLS) {
                Some((order, len)) if len.is_finite() => {
                    makespan = f64::max(makespan, len);
                    routes.push(order.into_iter().map(|idx| cells[idx - 1]).collect());
                }
                _ => {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| makespan + 1e-12 < *b) {
            best = Some((makespan, routes));
        }
    }
    let (makespan, routes) = best.expect("at least one assignment is feasible");
    Ok(GlobalPlan {
        routes,
        makespan,
        unreachable,
    })
}
