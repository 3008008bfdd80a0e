//! Deterministic tick-based multi-agent simulation: agent motion and
//! sensing, the per-cycle central server (matching, adaptive merging,
//! hierarchical planning), strategy variants, and metrics.
//!
//! Every agent keeps exact odometry in a private frame anchored at its
//! (hidden) spawn pose. Nothing on the planning side ever reads a true pose
//! or a frame offset; ground truth is used only to simulate the sensor and
//! to score runs.

pub mod metrics;
pub mod scenario;

pub use metrics::{AgentTick, MergeEvent, MetricsLog, RunMeta, RunSummary, TickRow};
pub use scenario::{Scenario, ScenarioError, Strategy};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::explore::{hierarchical_plan, update_subspace_status, ExploreAgent};
use crate::merge::{
    active_merge_plan, adaptive_overlap_step, merge_submaps, resolve_exhausted_verification,
    ActiveMergeContext, AgentStatus, AgentView, ConnState, FactorGraph, MergeDirective, SubMap,
    SubMapId, VerificationPolicy,
};
use crate::nav::Roadmap;
use crate::perception::{extract_descriptor, AgentId, Keyframe, MatchIndex, Segment};
use crate::world::{load_world, raycast, GridCell, GridWorld, Pose2, Transform2, WorldError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("simulation fault at t={t:.2}s: agent {agent} left traversable space at ({x:.2}, {y:.2})")]
    Fault {
        t: f64,
        agent: usize,
        x: f64,
        y: f64,
        log: Box<MetricsLog>,
    },
}

fn mix_seed(seed: u64, agent: u64, item: u64) -> u64 {
    let mut x = seed
        ^ agent.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ item.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

#[derive(Debug, Clone)]
struct MergeTask {
    pair: (AgentId, AgentId),
    other: AgentId,
    transform_other_to_self: Transform2,
    dist: f64,
    visited: BTreeSet<usize>,
    overlap_other: BTreeSet<usize>,
    own_overlap_positions: Vec<(f64, f64)>,
}

#[derive(Debug)]
struct Agent {
    id: AgentId,
    /// Local frame -> world frame; the hidden spawn offset.
    frame: Transform2,
    true_pose: Pose2,
    local_pose: Pose2,
    status: AgentStatus,
    waypoints: VecDeque<Pose2>,
    segment: Segment,
    odometer: f64,
    duplicated: f64,
    dist_since_kf: f64,
    kf_count: u64,
    task: Option<MergeTask>,
    verify_travel: f64,
    in_duplicated_cell: bool,
    current_cell: GridCell,
}

/// Ground-truth scoring state; never visible to planners.
struct TruthSide {
    reachable_surface_count: usize,
    /// Uncovered reachable surface cells, bucketed by 10 m tile for the
    /// per-tick visibility sweeps.
    uncovered: BTreeMap<(i32, i32), BTreeSet<GridCell>>,
    covered_count: usize,
    trail: BTreeSet<GridCell>,
}

const TRUTH_BUCKET_M: f64 = 10.0;

impl TruthSide {
    fn new(world: &GridWorld, spawns: &[Pose2]) -> Self {
        let mut reachable: BTreeSet<GridCell> = BTreeSet::new();
        for spawn in spawns {
            reachable.extend(world.reachable_free(world.cell_of(spawn.position())));
        }
        let per = (TRUTH_BUCKET_M / world.resolution()).round() as i32;
        let mut uncovered: BTreeMap<(i32, i32), BTreeSet<GridCell>> = BTreeMap::new();
        let mut count = 0;
        for &cell in world.surface() {
            if reachable.contains(&cell) {
                let bucket = (cell.0.div_euclid(per), cell.1.div_euclid(per));
                uncovered.entry(bucket).or_default().insert(cell);
                count += 1;
            }
        }
        TruthSide {
            reachable_surface_count: count,
            uncovered,
            covered_count: 0,
            trail: BTreeSet::new(),
        }
    }

    fn covered_fraction(&self) -> f64 {
        if self.reachable_surface_count == 0 {
            return 1.0;
        }
        self.covered_count as f64 / self.reachable_surface_count as f64
    }

    fn sweep(&mut self, world: &GridWorld, origin: (f64, f64), range: f64) {
        let per = (TRUTH_BUCKET_M / world.resolution()).round() as i32;
        let lo = world.cell_of((origin.0 - range, origin.1 - range));
        let hi = world.cell_of((origin.0 + range, origin.1 + range));
        let b_lo = (lo.0.div_euclid(per), lo.1.div_euclid(per));
        let b_hi = (hi.0.div_euclid(per), hi.1.div_euclid(per));
        for bx in b_lo.0..=b_hi.0 {
            for by in b_lo.1..=b_hi.1 {
                let Some(bucket) = self.uncovered.get_mut(&(bx, by)) else {
                    continue;
                };
                let mut seen: Vec<GridCell> = Vec::new();
                for &cell in bucket.iter() {
                    if truth_visible(world, origin, cell, range) {
                        seen.push(cell);
                    }
                }
                for cell in seen {
                    bucket.remove(&cell);
                    self.covered_count += 1;
                }
            }
        }
    }
}

/// Line-of-sight over the true world, mirroring the believed-map visibility
/// rule: the segment to the target cell's center must cross free cells only.
fn truth_visible(world: &GridWorld, origin: (f64, f64), target: GridCell, range: f64) -> bool {
    let center = world.center_of(target);
    let dx = center.0 - origin.0;
    let dy = center.1 - origin.1;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist > range {
        return false;
    }
    let res = world.resolution();
    if dist < res {
        return true;
    }
    let steps = (dist / (res * 0.5)).ceil() as usize;
    for i in 1..steps {
        let t = i as f64 / steps as f64;
        let cell = world.cell_of((origin.0 + t * dx, origin.1 + t * dy));
        if cell == target {
            break;
        }
        if !world.is_free(cell) {
            return false;
        }
    }
    true
}

pub struct Simulation {
    world: GridWorld,
    scenario: Scenario,
    agents: Vec<Agent>,
    submaps: Vec<SubMap>,
    agent_submap: Vec<usize>,
    roadmaps: Vec<Roadmap>,
    graph: FactorGraph,
    matcher: BTreeMap<(AgentId, AgentId), MatchIndex>,
    policy: VerificationPolicy,
    tick: u64,
    cycle_ticks: u64,
    next_submap_id: usize,
    finished: bool,
    log: MetricsLog,
    truth: TruthSide,
    pending_events: Vec<MergeEvent>,
    pending_keyframes: Vec<(usize, f64, f64)>,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let world = load_world(&scenario.map_text, scenario.resolution)?;
        scenario.validate(&world)?;
        let policy = match scenario.strategy {
            Strategy::Mui | Strategy::Mtare => VerificationPolicy::Adaptive,
            Strategy::Trust => VerificationPolicy::FixedDistance(scenario.d_fix),
            Strategy::Smmr => VerificationPolicy::ImmediateMerge,
        };
        let mut agents = Vec::with_capacity(scenario.spawns.len());
        let mut submaps = Vec::with_capacity(scenario.spawns.len());
        for (idx, spawn) in scenario.spawns.iter().enumerate() {
            let id = AgentId(idx);
            let frame = Transform2::from_pose(spawn);
            agents.push(Agent {
                id,
                frame,
                true_pose: *spawn,
                local_pose: Pose2::new(0.0, 0.0, 0.0),
                status: AgentStatus::Exploring,
                waypoints: VecDeque::new(),
                segment: Segment::new(id),
                odometer: 0.0,
                duplicated: 0.0,
                dist_since_kf: 0.0,
                kf_count: 0,
                task: None,
                verify_travel: 0.0,
                in_duplicated_cell: false,
                current_cell: world.cell_of(spawn.position()),
            });
            submaps.push(SubMap::singleton(
                SubMapId(idx),
                id,
                scenario.resolution,
                scenario.explore.subspace_m,
            ));
        }
        let mut truth = TruthSide::new(&world, &scenario.spawns);
        for agent in &agents {
            mark_trail(&world, &mut truth.trail, world.cell_of(agent.true_pose.position()));
        }
        let meta = RunMeta {
            scenario: scenario.name.clone(),
            strategy: scenario.strategy.to_string(),
            seed: scenario.seed,
            agent_count: agents.len(),
            resolution: scenario.resolution,
            map_text: scenario.map_text.clone(),
        };
        let cycle_ticks = (scenario.cycle_s / scenario.tick_s).round().max(1.0) as u64;
        let n = agents.len();
        Ok(Simulation {
            world,
            scenario: scenario.clone(),
            agents,
            submaps,
            agent_submap: (0..n).collect(),
            roadmaps: Vec::new(),
            graph: FactorGraph::new(),
            matcher: BTreeMap::new(),
            policy,
            tick: 0,
            cycle_ticks,
            next_submap_id: n,
            finished: false,
            log: MetricsLog {
                meta,
                rows: Vec::new(),
                summary: None,
            },
            truth,
            pending_events: Vec::new(),
            pending_keyframes: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.scenario.tick_s
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn into_log(self) -> MetricsLog {
        self.log
    }

    pub fn submap_count(&self) -> usize {
        self.submaps.len()
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    /// Advance one tick: move, sense, serve (on cycle boundaries), score.
    pub fn step(&mut self) -> Result<(), SimError> {
        let t = self.time();
        for idx in 0..self.agents.len() {
            self.move_agent(idx, t)?;
        }
        for idx in 0..self.agents.len() {
            self.sense_agent(idx);
        }
        if self.tick % self.cycle_ticks == 0 {
            self.server_cycle(t);
        }
        self.append_row(t);
        self.tick += 1;

        let covered = self.truth.covered_fraction();
        if covered >= self.scenario.coverage_threshold || self.time() >= self.scenario.time_limit_s
        {
            self.finished = true;
            self.write_summary(covered >= self.scenario.coverage_threshold);
        }
        Ok(())
    }

    fn write_summary(&mut self, completed: bool) {
        let makespan = self
            .agents
            .iter()
            .map(|a| a.odometer)
            .fold(0.0, f64::max);
        self.log.summary = Some(RunSummary {
            scenario: self.scenario.name.clone(),
            strategy: self.scenario.strategy.to_string(),
            seed: self.scenario.seed,
            exploration_time_s: self.time(),
            makespan_m: makespan,
            total_dist_m: self.agents.iter().map(|a| a.odometer).sum(),
            duplicated_dist_m: self.agents.iter().map(|a| a.duplicated).sum(),
            final_submaps: self.submaps.len(),
            merge_rejections: self.graph.rejection_count(),
            covered_fraction: self.truth.covered_fraction(),
            completed,
        });
    }

    fn fault(&mut self, agent: usize, t: f64, x: f64, y: f64) -> SimError {
        self.write_summary(false);
        SimError::Fault {
            t,
            agent,
            x,
            y,
            log: Box::new(self.log.clone()),
        }
    }

    fn move_agent(&mut self, idx: usize, t: f64) -> Result<(), SimError> {
        let mut budget = self.scenario.v_max * self.scenario.tick_s;
        let res = self.world.resolution();
        while budget > 1e-9 {
            let Some(&target) = self.agents[idx].waypoints.front() else {
                break;
            };
            let agent = &self.agents[idx];
            let (px, py) = agent.local_pose.position();
            let dx = target.x - px;
            let dy = target.y - py;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < 1e-9 {
                let theta = target.theta;
                let agent = &mut self.agents[idx];
                agent.local_pose = Pose2::new(px, py, theta);
                agent.waypoints.pop_front();
                continue;
            }
            let step = dist.min(budget);
            let heading = dy.atan2(dx);
            let next_local = Pose2::new(
                px + step * heading.cos(),
                py + step * heading.sin(),
                heading,
            );
            // Guard against walking into space the agent's own map does not
            // mark free; unknown cells make it wait for sensing or replan.
            let submap = &self.submaps[self.agent_submap[idx]];
            let to_submap = submap.transforms[&agent.id];
            let sub_point = to_submap.apply_point(next_local.position());
            match submap.map.belief(submap.map.cell_of(sub_point)) {
                crate::nav::KNOWN_OBSTACLE => {
                    self.agents[idx].waypoints.clear();
                    break;
                }
                crate::nav::UNKNOWN => break,
                _ => {}
            }
            let next_true = agent.frame.apply_pose(&next_local);
            // Sub-sample the motion so a fast tick cannot hop a thin wall.
            let substeps = (step / (res * 0.5)).ceil().max(1.0) as usize;
            for s in 1..=substeps {
                let f = s as f64 / substeps as f64;
                let sx = agent.true_pose.x + f * (next_true.x - agent.true_pose.x);
                let sy = agent.true_pose.y + f * (next_true.y - agent.true_pose.y);
                if !self.world.is_traversable((sx, sy)) {
                    return Err(self.fault(idx, t, sx, sy));
                }
            }
            let agent = &mut self.agents[idx];
            agent.local_pose = next_local;
            agent.true_pose = next_true;
            agent.odometer += step;
            agent.dist_since_kf += step;
            if agent.status == AgentStatus::ActiveMerge {
                agent.verify_travel += step;
            }
            let cell = self.world.cell_of(agent.true_pose.position());
            if cell != agent.current_cell {
                agent.in_duplicated_cell = self.truth.trail.contains(&cell);
                agent.current_cell = cell;
                mark_trail(&self.world, &mut self.truth.trail, cell);
            }
            if agent.in_duplicated_cell {
                agent.duplicated += step;
            }
            budget -= step;
            if step >= dist - 1e-9 {
                self.agents[idx].waypoints.pop_front();
            }
        }
        Ok(())
    }

    fn sense_agent(&mut self, idx: usize) {
        let agent = &self.agents[idx];
        let scan = raycast(
            &self.world,
            &agent.true_pose,
            self.scenario.beam_count,
            self.scenario.max_range,
        )
        .expect("agent stays in traversable space");

        let submap_idx = self.agent_submap[idx];
        let submap = &mut self.submaps[submap_idx];
        let to_submap = submap.transforms[&agent.id];
        let pose_sub = to_submap.apply_pose(&agent.local_pose);
        submap.map.integrate_scan(&pose_sub, &scan);
        submap
            .map
            .sweep_cover(pose_sub.position(), self.scenario.explore.sensor_range);

        self.truth.sweep(
            &self.world,
            agent.true_pose.position(),
            self.scenario.explore.sensor_range,
        );

        // Keyframe when the spacing is due (and at the very start). Revisited
        // places are not keyframed again: one feature per place keeps the
        // matched runs contiguous when an agent retraces a trajectory.
        let agent = &mut self.agents[idx];
        let spacing = self.scenario.perception.keyframe_spacing;
        let novel = agent.segment.keyframes.iter().all(|kf| {
            agent.local_pose.distance(&kf.pose_local) >= spacing * 0.75
        });
        let due = agent.segment.is_empty() || (agent.dist_since_kf >= spacing && novel);
        if due {
            let noise_seed = mix_seed(self.scenario.seed, agent.id.0 as u64, agent.kf_count);
            let descriptor = extract_descriptor(&scan, &self.scenario.perception, noise_seed);
            let mut points = Vec::new();
            for (k, &range) in scan.ranges.iter().enumerate() {
                if range < scan.max_range {
                    let a = agent.local_pose.theta + scan.beam_angle(k);
                    points.push((
                        agent.local_pose.x + range * a.cos(),
                        agent.local_pose.y + range * a.sin(),
                    ));
                }
            }
            let index = agent.segment.len();
            agent.segment.keyframes.push(Keyframe {
                index,
                pose_local: agent.local_pose,
                descriptor,
                points,
                odometric_distance: agent.odometer,
            });
            agent.dist_since_kf = 0.0;
            agent.kf_count += 1;
            self.pending_keyframes
                .push((idx, agent.true_pose.x, agent.true_pose.y));
        }

        // Mark counterpart key poses reached during verification.
        if let Some(task) = self.agents[idx].task.clone() {
            let other_seg = self.agents[task.other.0].segment.clone_poses();
            let me = &mut self.agents[idx];
            for (kf_index, pos) in other_seg {
                if task.visited.contains(&kf_index) {
                    continue;
                }
                let p = task.transform_other_to_self.apply_point(pos);
                let d = (p.0 - me.local_pose.x).hypot(p.1 - me.local_pose.y);
                if d <= self.scenario.perception.keyframe_spacing * 0.5 {
                    if let Some(task) = me.task.as_mut() {
                        task.visited.insert(kf_index);
                    }
                }
            }
        }
    }

    fn rebuild_roadmaps(&mut self) {
        self.roadmaps = self
            .submaps
            .iter()
            .map(|s| Roadmap::build(&s.map, self.scenario.explore.roadmap_coarse_m))
            .collect();
    }

    fn server_cycle(&mut self, t: f64) {
        for submap in &mut self.submaps {
            update_subspace_status(&mut submap.subspaces, &submap.map);
        }
        self.rebuild_roadmaps();

        // Sequence matching across sub-maps.
        let mut sequences = BTreeMap::new();
        let n = self.agents.len();
        {
            let agents = &self.agents;
            let matcher = &mut self.matcher;
            for i in 0..n {
                for j in (i + 1)..n {
                    if self.agent_submap[i] == self.agent_submap[j] {
                        continue;
                    }
                    let (seg_i, seg_j) = (&agents[i].segment, &agents[j].segment);
                    if seg_i.is_empty() || seg_j.is_empty() {
                        continue;
                    }
                    let index = matcher
                        .entry((AgentId(i), AgentId(j)))
                        .or_insert_with(MatchIndex::new);
                    index.update(seg_i, seg_j);
                    let seqs = index.sequences(seg_i, seg_j, &self.scenario.perception);
                    if !seqs.is_empty() {
                        sequences.insert((AgentId(i), AgentId(j)), seqs);
                    }
                }
            }
        }

        // Snapshot edge instances for event diffing.
        let before: BTreeMap<(usize, usize), (ConnState, f64)> = self
            .graph
            .edges()
            .map(|e| ((e.i.0, e.j.0), (e.state, e.t0)))
            .collect();

        let directives = {
            let views = agent_views(&self.agents, &self.agent_submap, &self.submaps);
            adaptive_overlap_step(
                &mut self.graph,
                &self.roadmaps,
                &views,
                &sequences,
                &self.policy,
                t,
                &self.scenario.merge,
                &self.scenario.perception,
            )
        };
        self.apply_directives(&directives, t);
        self.plan_merge_paths(t);
        self.diff_graph_events(&before, &directives);
        self.assign_explore_paths();

        debug_assert_eq!(
            self.submaps.iter().map(|s| s.members.len()).sum::<usize>(),
            self.agents.len()
        );
    }


    fn apply_directives(&mut self, directives: &[MergeDirective], t: f64) {
        let _ = t;
        for directive in directives {
            match directive {
                MergeDirective::SubmapMerge { pair, transform } => {
                    self.do_merge(*pair, transform);
                }
                MergeDirective::ActiveMerge {
                    pair,
                    agent,
                    other,
                    transform,
                    dist,
                } => {
                    let idx = agent.0;
                    if self.agent_submap[idx] == self.agent_submap[other.0] {
                        continue;
                    }
                    // One verification at a time per agent; a directive for a
                    // different pair waits until the current task resolves.
                    if self
                        .agents[idx]
                        .task
                        .as_ref()
                        .is_some_and(|task| task.pair != *pair)
                    {
                        continue;
                    }
                    let (overlap_other, own_positions) = self.overlap_sets(*pair, *agent);
                    let me = &mut self.agents[idx];
                    if me.task.is_none() {
                        me.status = AgentStatus::BackToOverlap;
                        me.verify_travel = 0.0;
                        me.waypoints.clear();
                        me.task = Some(MergeTask {
                            pair: *pair,
                            other: *other,
                            transform_other_to_self: *transform,
                            dist: *dist,
                            visited: BTreeSet::new(),
                            overlap_other,
                            own_overlap_positions: own_positions,
                        });
                    } else if let Some(task) = me.task.as_mut() {
                        task.transform_other_to_self = *transform;
                        task.dist = *dist;
                        task.overlap_other = overlap_other;
                        task.own_overlap_positions = own_positions;
                    }
                }
                MergeDirective::AbortVerification { agent, .. } => {
                    let me = &mut self.agents[agent.0];
                    me.task = None;
                    me.status = AgentStatus::Exploring;
                    me.waypoints.clear();
                }
            }
        }
    }

    /// Counterpart keyframe indices inside the current overlap, and the
    /// verifying agent's own matched keyframe positions.
    fn overlap_sets(&self, pair: (AgentId, AgentId), agent: AgentId) -> (BTreeSet<usize>, Vec<(f64, f64)>) {
        let Some(edge) = self.graph.edge(pair.0, pair.1) else {
            return (BTreeSet::new(), Vec::new());
        };
        let Some(seq) = &edge.best_seq else {
            return (BTreeSet::new(), Vec::new());
        };
        let own_is_i = agent == pair.0;
        let mut overlap_other = BTreeSet::new();
        let mut own_positions = Vec::new();
        let own_seg = &self.agents[agent.0].segment;
        for &(a, b) in &seq.pairs {
            let (own_idx, other_idx) = if own_is_i { (a, b) } else { (b, a) };
            overlap_other.insert(other_idx);
            let kf = &own_seg.keyframes[own_idx];
            own_positions.push((kf.pose_local.x, kf.pose_local.y));
        }
        (overlap_other, own_positions)
    }

    fn do_merge(&mut self, pair: (AgentId, AgentId), transform_j_to_i: &Transform2) {
        let (i, j) = (pair.0 .0, pair.1 .0);
        let (mi, mj) = (self.agent_submap[i], self.agent_submap[j]);
        if mi == mj {
            return;
        }
        let a = self.submaps[mi].transforms[&pair.0];
        let b = self.submaps[mj].transforms[&pair.1];
        let v = a.compose(transform_j_to_i).compose(&b.invert());
        let new_id = SubMapId(self.next_submap_id);
        self.next_submap_id += 1;
        let merged = merge_submaps(&self.submaps[mi], &self.submaps[mj], &v, new_id)
            .expect("registry keeps sub-maps disjoint");

        // Ground-truth transform error, for the log only.
        let truth = self.agents[i]
            .frame
            .invert()
            .compose(&self.agents[j].frame);
        let err = transform_j_to_i.compose(&truth.invert());
        let edge = self.graph.edge(pair.0, pair.1);
        self.pending_events.push(MergeEvent::Confirmation {
            i,
            j,
            omega: edge.map(|e| e.omega).unwrap_or(f64::NAN),
            residual: edge.map(|e| e.fitness).unwrap_or(f64::NAN),
            transform: *transform_j_to_i,
            translation_error_m: err.translation.0.hypot(err.translation.1),
            rotation_error_rad: err.rotation.abs(),
        });

        let keep = mi.min(mj);
        let drop = mi.max(mj);
        self.submaps[keep] = merged;
        self.submaps.remove(drop);
        self.roadmaps.clear();
        for (agent_idx, slot) in self.agent_submap.iter_mut().enumerate() {
            *slot = self
                .submaps
                .iter()
                .position(|s| s.contains(AgentId(agent_idx)))
                .expect("every agent belongs to one sub-map");
        }
        self.rebuild_roadmaps();

        // Verifications made moot by the merge resolve to plain exploring.
        for agent in self.agents.iter_mut() {
            if let Some(task) = &agent.task {
                if self.agent_submap[task.pair.0 .0] == self.agent_submap[task.pair.1 .0] {
                    agent.task = None;
                    if agent.status != AgentStatus::Exploring {
                        agent.status = AgentStatus::Exploring;
                        agent.waypoints.clear();
                    }
                }
            }
        }
    }

    fn plan_merge_paths(&mut self, t: f64) {
        for idx in 0..self.agents.len() {
            let Some(task) = self.agents[idx].task.clone() else {
                continue;
            };
            let pair = task.pair;
            let plan = self.plan_one_merge_path(idx, &task);
            if plan.exhausted {
                let directives =
                    resolve_exhausted_verification(&mut self.graph, pair, &self.policy, &self.scenario.merge);
                self.apply_directives(&directives, t);
                continue;
            }
            if self.agents[idx].status == AgentStatus::BackToOverlap && plan.waypoints.is_empty() {
                // Arrived at the overlap: switch to the look-ahead phase.
                self.agents[idx].status = AgentStatus::ActiveMerge;
                self.agents[idx].verify_travel = 0.0;
                self.graph.note_active_phase(pair.0, pair.1, t);
                let plan = self.plan_one_merge_path(idx, &task);
                if plan.exhausted {
                    let directives = resolve_exhausted_verification(
                        &mut self.graph,
                        pair,
                        &self.policy,
                        &self.scenario.merge,
                    );
                    self.apply_directives(&directives, t);
                    continue;
                }
                self.agents[idx].waypoints = plan.waypoints.into();
            } else {
                self.agents[idx].waypoints = plan.waypoints.into();
            }
        }
    }

    fn plan_one_merge_path(&self, idx: usize, task: &MergeTask) -> crate::merge::MergePlan {
        let views = agent_views(&self.agents, &self.agent_submap, &self.submaps);
        let submap = &self.submaps[self.agent_submap[idx]];
        let ctx = ActiveMergeContext {
            agent: &views[idx],
            map: &submap.map,
            roadmap: &self.roadmaps[self.agent_submap[idx]],
            transform_other_to_agent: task.transform_other_to_self,
            dist: task.dist,
            other_segment: &self.agents[task.other.0].segment,
            overlap_other: &task.overlap_other,
            own_overlap_positions: &task.own_overlap_positions,
            visited: &task.visited,
            arrival_radius: self.scenario.perception.keyframe_spacing * 0.5,
        };
        active_merge_plan(&ctx)
    }

    fn diff_graph_events(
        &mut self,
        before: &BTreeMap<(usize, usize), (ConnState, f64)>,
        directives: &[MergeDirective],
    ) {
        let after: Vec<(usize, usize, ConnState, f64, f64, usize, Option<usize>)> = self
            .graph
            .edges()
            .map(|e| {
                (
                    e.i.0,
                    e.j.0,
                    e.state,
                    e.t0,
                    e.omega,
                    e.best_seq.as_ref().map(|s| s.overlap_len).unwrap_or(0),
                    e.verifying_agent.map(|a| a.0),
                )
            })
            .collect();
        for (i, j, state, t0, omega, overlap_len, verifier) in after {
            let prev = before.get(&(i, j));
            let _ = t0;
            let fresh = match prev {
                None => true,
                // A rejected edge replaced by a fresh candidate instance.
                Some(&(old_state, _)) => {
                    old_state == ConnState::Rejected && state != ConnState::Rejected
                }
            };
            if fresh {
                self.pending_events.push(MergeEvent::Detection {
                    i,
                    j,
                    omega,
                    overlap_len,
                });
            }
            let old_state = prev.map(|&(s, _)| s);
            if state == ConnState::Verifying && old_state != Some(ConnState::Verifying) {
                let dist = directives
                    .iter()
                    .find_map(|d| match d {
                        MergeDirective::ActiveMerge { pair, dist, .. }
                            if pair.0 .0 == i && pair.1 .0 == j =>
                        {
                            Some(*dist)
                        }
                        _ => None,
                    })
                    .unwrap_or(0.0);
                self.pending_events.push(MergeEvent::VerificationStarted {
                    i,
                    j,
                    agent: verifier.unwrap_or(i),
                    omega,
                    dist,
                });
            }
            if state == ConnState::Rejected && old_state != Some(ConnState::Rejected) {
                self.pending_events.push(MergeEvent::Rejection { i, j, omega });
            }
        }
    }

    fn assign_explore_paths(&mut self) {
        let views: Vec<ExploreAgent> = self
            .agents
            .iter()
            .enumerate()
            .map(|(idx, a)| {
                let to_submap = self.submaps[self.agent_submap[idx]].transforms[&a.id];
                ExploreAgent {
                    id: a.id,
                    submap: self.agent_submap[idx],
                    pose_submap: to_submap.apply_pose(&a.local_pose),
                    busy: a.status != AgentStatus::Exploring,
                }
            })
            .collect();
        let outcome = hierarchical_plan(
            &self.submaps,
            &self.roadmaps,
            &views,
            &self.scenario.explore,
            self.scenario.strategy == Strategy::Mtare,
        );
        for (id, planned) in outcome.paths {
            let idx = id.0;
            if self.agents[idx].status != AgentStatus::Exploring {
                continue;
            }
            if planned.dropped_viewpoints > 0 {
                self.pending_events.push(MergeEvent::ViewpointDropped {
                    agent: idx,
                    count: planned.dropped_viewpoints,
                });
            }
            let from_submap = self.submaps[self.agent_submap[idx]].transforms[&id].invert();
            self.agents[idx].waypoints = planned
                .waypoints
                .iter()
                .map(|p| from_submap.apply_pose(p))
                .collect();
        }
    }

    fn append_row(&mut self, t: f64) {
        let agents = self
            .agents
            .iter()
            .enumerate()
            .map(|(idx, a)| AgentTick {
                id: idx,
                x: a.true_pose.x,
                y: a.true_pose.y,
                odometer: a.odometer,
                submap: self.submaps[self.agent_submap[idx]].id.0,
                status: a.status,
            })
            .collect();
        self.log.rows.push(TickRow {
            t,
            agents,
            covered_fraction: self.truth.covered_fraction(),
            submap_count: self.submaps.len(),
            events: std::mem::take(&mut self.pending_events),
            keyframes: std::mem::take(&mut self.pending_keyframes),
        });
    }
}

fn agent_views<'a>(
    agents: &'a [Agent],
    agent_submap: &[usize],
    submaps: &[SubMap],
) -> Vec<AgentView<'a>> {
    agents
        .iter()
        .enumerate()
        .map(|(idx, a)| AgentView {
            id: a.id,
            submap: agent_submap[idx],
            pose_local: a.local_pose,
            to_submap: submaps[agent_submap[idx]].transforms[&a.id],
            status: a.status,
            segment: &a.segment,
            verify_travel: a.verify_travel,
        })
        .collect()
}

fn mark_trail(world: &GridWorld, trail: &mut BTreeSet<GridCell>, cell: GridCell) {
    // A 3x3 swath so a re-walk half a lane over still counts as repeat
    // coverage.
    for dy in -1..=1 {
        for dx in -1..=1 {
            let c = (cell.0 + dx, cell.1 + dy);
            if world.in_bounds(c) {
                trail.insert(c);
            }
        }
    }
}

trait SegmentPoses {
    fn clone_poses(&self) -> Vec<(usize, (f64, f64))>;
}

impl SegmentPoses for Segment {
    fn clone_poses(&self) -> Vec<(usize, (f64, f64))> {
        self.keyframes
            .iter()
            .map(|kf| (kf.index, (kf.pose_local.x, kf.pose_local.y)))
            .collect()
    }
}

/// Run a scenario to completion (coverage threshold or time limit).
pub fn run(scenario: &Scenario) -> Result<MetricsLog, SimError> {
    let mut sim = Simulation::new(scenario)?;
    while !sim.finished() {
        sim.step()?;
    }
    Ok(sim.into_log())
}
