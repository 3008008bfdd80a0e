//! Adaptive sub-map merging: the factor graph of inter-agent connection
//! weights, transform estimation between agent frames, the active
//! verification state machine, and sub-map fusion.
//!
//! A matched keyframe sequence between two agents yields a connection weight
//! that grows with overlap length and shrinks with descriptor residual. Weak
//! connections are not merged outright: the agent closer to the overlap is
//! sent back to it and then walked along the counterpart's trajectory, which
//! either grows the connection past the merge threshold or exposes a false
//! association through a stalling verification gain.

mod icp;

pub use icp::{estimate_transform, procrustes, IcpResult};

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::explore::SubspaceGrid;
use crate::nav::{astar_fine, CoverageMap, Passable, Roadmap};
use crate::perception::{
    is_match_valid, AgentId, MatchedSequence, PerceptionParams, Segment,
};
use crate::world::{Pose2, Transform2};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("omega {0} outside the open interval (0, 1)")]
    OmegaDomain(f64),
    #[error("verification gain requires t > t0 (t = {t}, t0 = {t0})")]
    GainTime { t: f64, t0: f64 },
    #[error("connection is not in the Verifying state")]
    NotVerifying,
    #[error("empty point sets for transform estimation")]
    EmptyPointSets,
    #[error("neither agent can reach the overlap on its roadmap")]
    OverlapUnreachable,
    #[error("agent {0} belongs to both sub-maps")]
    MemberOverlap(AgentId),
    #[error("forbidden connection transition {from:?} -> {to:?}")]
    ForbiddenTransition { from: ConnState, to: ConnState },
}

/// Hyper-parameters of the merge formulas and thresholds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MergeParams {
    pub c_w: f64,
    pub epsilon: f64,
    pub c_epsilon: f64,
    pub omega_thresh: f64,
    /// Minimum verification gain per second; below it the connection is
    /// rejected as a false association.
    pub gain_thresh: f64,
    /// Seconds of sim time between gain evaluations.
    pub gain_interval: f64,
}

impl Default for MergeParams {
    fn default() -> Self {
        MergeParams {
            c_w: 10.0,
            epsilon: 1e-6,
            c_epsilon: 0.01,
            omega_thresh: 0.8,
            gain_thresh: 0.005,
            gain_interval: 5.0,
        }
    }
}

/// How detected overlaps are verified before merging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VerificationPolicy {
    /// Verify adaptively: travel budget from the connection weight, confirm
    /// the moment the weight passes the threshold, reject on stalling gain.
    Adaptive,
    /// Verify every detection by retracing a fixed distance of the
    /// counterpart trajectory, then decide once by the weight threshold.
    FixedDistance(f64),
    /// Merge immediately on the first geometrically valid sequence.
    ImmediateMerge,
}

/// Agent status as seen by the merge machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AgentStatus {
    Exploring,
    BackToOverlap,
    ActiveMerge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Candidate,
    Verifying,
    Confirmed,
    Rejected,
}

/// One weighted edge of the factor graph between two agents' segments.
#[derive(Debug, Clone)]
pub struct InnerConnection {
    pub i: AgentId,
    pub j: AgentId,
    pub omega: f64,
    /// `(sim time, omega)` samples, timestamps strictly increasing.
    pub history: Vec<(f64, f64)>,
    /// Connection weight when active verification began.
    pub omega_t0: f64,
    pub t0: f64,
    pub state: ConnState,
    pub best_seq: Option<MatchedSequence>,
    /// Latest estimate mapping frame `j` into frame `i`.
    pub transform: Option<Transform2>,
    pub fitness: f64,
    pub low_confidence: bool,
    pub verifying_agent: Option<AgentId>,
    pub last_gain_eval: f64,
    pub updated_at: f64,
    /// The verifying agent has reached the overlap and is extending it.
    pub active_phase: bool,
}

impl InnerConnection {
    fn new(i: AgentId, j: AgentId, omega: f64, t: f64) -> Self {
        InnerConnection {
            i,
            j,
            omega,
            history: vec![(t, omega)],
            omega_t0: omega,
            t0: t,
            state: ConnState::Candidate,
            best_seq: None,
            transform: None,
            fitness: f64::INFINITY,
            low_confidence: false,
            verifying_agent: None,
            last_gain_eval: t,
            updated_at: t,
            active_phase: false,
        }
    }
}

/// Connection weight of a matched sequence (zero for a self match).
///
/// Grows toward `exp(-c_w / (2 L^2))` as the overlap length `L` grows, and
/// decays with the squared mean descriptor residual.
pub fn inner_connection(seq: &MatchedSequence, params: &MergeParams) -> f64 {
    if seq.i == seq.j {
        return 0.0;
    }
    let l = seq.overlap_len as f64;
    let r = seq.mean_residual;
    (-(r * r + params.c_w) / (2.0 * l * l + params.epsilon)).exp()
}

/// Estimated distance an agent must travel along the counterpart trajectory
/// to lift the connection weight from `omega_t` to the merge threshold.
/// Clamped to zero once the threshold is reached.
pub fn required_overlap_distance(omega_t: f64, params: &MergeParams) -> Result<f64, MergeError> {
    if !(omega_t > 0.0 && omega_t < 1.0) {
        return Err(MergeError::OmegaDomain(omega_t));
    }
    let dist = params.c_w * (1.0 / omega_t.ln() - 1.0 / params.omega_thresh.ln());
    Ok(dist.max(0.0))
}

/// Rate of connection-weight improvement per second of verification.
/// Negative when the weight dropped by more than `c_epsilon`.
pub fn verification_gain(
    conn: &InnerConnection,
    t: f64,
    params: &MergeParams,
) -> Result<f64, MergeError> {
    if conn.state != ConnState::Verifying {
        return Err(MergeError::NotVerifying);
    }
    if t <= conn.t0 {
        return Err(MergeError::GainTime { t, t0: conn.t0 });
    }
    Ok((conn.omega - conn.omega_t0 + params.c_epsilon) / ((t - conn.t0).abs() + params.epsilon))
}

#[derive(Debug, Clone)]
struct RejectedWindow {
    a: (usize, usize),
    b: (usize, usize),
}

/// The factor graph: at most one live edge per unordered agent pair, plus
/// the windows of previously rejected sequences so the same false match is
/// not re-admitted.
#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    edges: BTreeMap<(AgentId, AgentId), InnerConnection>,
    rejected_windows: BTreeMap<(AgentId, AgentId), Vec<RejectedWindow>>,
    rejection_count: usize,
}

fn pair_key(i: AgentId, j: AgentId) -> (AgentId, AgentId) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl FactorGraph {
    pub fn new() -> Self {
        FactorGraph::default()
    }

    pub fn edge(&self, i: AgentId, j: AgentId) -> Option<&InnerConnection> {
        self.edges.get(&pair_key(i, j))
    }

    pub fn edges(&self) -> impl Iterator<Item = &InnerConnection> {
        self.edges.values()
    }

    pub fn rejection_count(&self) -> usize {
        self.rejection_count
    }

    /// Legal state-machine moves: Candidate -> Verifying, Candidate ->
    /// Confirmed, Verifying -> Confirmed, Verifying -> Rejected. Confirmed
    /// and Rejected are terminal.
    pub fn try_transition(
        &mut self,
        i: AgentId,
        j: AgentId,
        to: ConnState,
    ) -> Result<(), MergeError> {
        let key = pair_key(i, j);
        let conn = self.edges.get_mut(&key).ok_or(MergeError::NotVerifying)?;
        let allowed = matches!(
            (conn.state, to),
            (ConnState::Candidate, ConnState::Verifying)
                | (ConnState::Candidate, ConnState::Confirmed)
                | (ConnState::Verifying, ConnState::Confirmed)
                | (ConnState::Verifying, ConnState::Rejected)
        );
        if !allowed {
            return Err(MergeError::ForbiddenTransition {
                from: conn.state,
                to,
            });
        }
        conn.state = to;
        if to == ConnState::Rejected {
            self.rejection_count += 1;
            if let Some(seq) = &conn.best_seq {
                let window = RejectedWindow {
                    a: (
                        seq.pairs.iter().map(|p| p.0).min().unwrap_or(0),
                        seq.pairs.iter().map(|p| p.0).max().unwrap_or(0),
                    ),
                    b: (
                        seq.pairs.iter().map(|p| p.1).min().unwrap_or(0),
                        seq.pairs.iter().map(|p| p.1).max().unwrap_or(0),
                    ),
                };
                self.rejected_windows.entry(key).or_default().push(window);
            }
        }
        Ok(())
    }

    /// True when more than half of the sequence's pairs fall inside a
    /// previously rejected index window on both sides.
    pub fn is_suppressed(&self, seq: &MatchedSequence) -> bool {
        let key = pair_key(seq.i, seq.j);
        let Some(windows) = self.rejected_windows.get(&key) else {
            return false;
        };
        for w in windows {
            let inside = seq
                .pairs
                .iter()
                .filter(|&&(a, b)| {
                    a >= w.a.0 && a <= w.a.1 && b >= w.b.0 && b <= w.b.1
                })
                .count();
            if inside * 2 > seq.pairs.len() {
                return true;
            }
        }
        false
    }

    /// Ingest this cycle's best admissible sequence for a pair, refreshing
    /// the edge weight and history. A rejected edge is replaced by a fresh
    /// candidate (the suppression windows already filtered lookalikes).
    pub fn observe(&mut self, seq: MatchedSequence, omega: f64, t: f64) {
        let key = pair_key(seq.i, seq.j);
        let fresh = match self.edges.get(&key) {
            None => true,
            Some(conn) => conn.state == ConnState::Rejected,
        };
        if fresh {
            let mut conn = InnerConnection::new(key.0, key.1, omega, t);
            conn.best_seq = Some(seq);
            self.edges.insert(key, conn);
            return;
        }
        let conn = self.edges.get_mut(&key).unwrap();
        if conn.state == ConnState::Confirmed {
            return;
        }
        conn.omega = omega;
        conn.best_seq = Some(seq);
        conn.updated_at = t;
        match conn.history.last() {
            Some(&(last_t, _)) if last_t >= t => {}
            _ => conn.history.push((t, omega)),
        }
    }

    /// Record that the verifying agent reached the overlap: the gain clock
    /// starts here.
    pub fn note_active_phase(&mut self, i: AgentId, j: AgentId, t: f64) {
        if let Some(conn) = self.edges.get_mut(&pair_key(i, j)) {
            if conn.state == ConnState::Verifying && !conn.active_phase {
                conn.active_phase = true;
                conn.t0 = t;
                conn.omega_t0 = conn.omega;
                conn.last_gain_eval = t;
            }
        }
    }
}

/// Partition agents into groups whose relative transforms are known:
/// connected components over Confirmed edges, singletons otherwise.
pub fn cluster_submaps(graph: &FactorGraph, agents: &[AgentId]) -> Vec<Vec<AgentId>> {
    let mut parent: BTreeMap<AgentId, AgentId> = agents.iter().map(|&a| (a, a)).collect();
    fn find(parent: &mut BTreeMap<AgentId, AgentId>, a: AgentId) -> AgentId {
        let mut root = a;
        while parent[&root] != root {
            root = parent[&root];
        }
        let mut cur = a;
        while parent[&cur] != root {
            let next = parent[&cur];
            parent.insert(cur, root);
            cur = next;
        }
        root
    }
    for conn in graph.edges() {
        if conn.state == ConnState::Confirmed {
            let (ri, rj) = (find(&mut parent, conn.i), find(&mut parent, conn.j));
            if ri != rj {
                let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                parent.insert(hi, lo);
            }
        }
    }
    let mut groups: BTreeMap<AgentId, Vec<AgentId>> = BTreeMap::new();
    for &a in agents {
        let root = find(&mut parent, a);
        groups.entry(root).or_default().push(a);
    }
    groups.into_values().collect()
}

/// Stable identity of a sub-map over its lifetime (merges create a new one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct SubMapId(pub usize);

/// A group of agents with mutually known transforms, their fused map, and
/// the subspace bookkeeping the explore planner works from.
#[derive(Debug, Clone)]
pub struct SubMap {
    pub id: SubMapId,
    /// Sorted member agent ids.
    pub members: Vec<AgentId>,
    /// The member whose frame is the sub-map frame (transform = identity).
    pub reference: AgentId,
    pub transforms: BTreeMap<AgentId, Transform2>,
    pub map: CoverageMap,
    pub subspaces: SubspaceGrid,
}

impl SubMap {
    pub fn singleton(id: SubMapId, agent: AgentId, resolution: f64, subspace_m: f64) -> SubMap {
        let mut transforms = BTreeMap::new();
        transforms.insert(agent, Transform2::identity());
        SubMap {
            id,
            members: vec![agent],
            reference: agent,
            transforms,
            map: CoverageMap::new(resolution, subspace_m),
            subspaces: SubspaceGrid::new(subspace_m),
        }
    }

    pub fn contains(&self, agent: AgentId) -> bool {
        self.members.binary_search(&agent).is_ok()
    }
}

/// Fuse two sub-maps given the transform mapping `m2`'s frame into `m1`'s
/// frame. `m1`'s reference frame becomes the merged frame; the fused grid is
/// the cell-wise union of known space with obstacle winning conflicts.
pub fn merge_submaps(
    m1: &SubMap,
    m2: &SubMap,
    transform: &Transform2,
    new_id: SubMapId,
) -> Result<SubMap, MergeError> {
    for member in &m2.members {
        if m1.contains(*member) {
            return Err(MergeError::MemberOverlap(*member));
        }
    }
    let mut members = m1.members.clone();
    members.extend_from_slice(&m2.members);
    members.sort_unstable();
    let mut transforms = m1.transforms.clone();
    for (agent, t) in &m2.transforms {
        transforms.insert(*agent, transform.compose(t));
    }
    let mut map = m1.map.clone();
    map.absorb(&m2.map, transform);
    let mut subspaces = SubspaceGrid::new(m1.subspaces.cell_m());
    subspaces.refresh(&map);
    Ok(SubMap {
        id: new_id,
        members,
        reference: m1.reference,
        transforms,
        map,
        subspaces,
    })
}

/// What the merge machinery needs to know about each agent per cycle.
#[derive(Debug)]
pub struct AgentView<'a> {
    pub id: AgentId,
    /// Index into the parallel `submaps` / `roadmaps` slices.
    pub submap: usize,
    pub pose_local: Pose2,
    /// Maps the agent's local frame into its sub-map frame.
    pub to_submap: Transform2,
    pub status: AgentStatus,
    pub segment: &'a Segment,
    /// Meters traveled since entering the ActiveMerge phase.
    pub verify_travel: f64,
}

/// Instructions produced by one adaptive merge cycle; the harness executes
/// them.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeDirective {
    /// Send `agent` to verify the overlap with `other`: return to the
    /// overlap, then extend it by up to `dist` meters along the
    /// counterpart's trajectory transformed by `transform`
    /// (other's local frame into agent's local frame).
    ActiveMerge {
        pair: (AgentId, AgentId),
        agent: AgentId,
        other: AgentId,
        transform: Transform2,
        dist: f64,
    },
    /// Merge the two agents' sub-maps; `transform` maps the second agent's
    /// local frame into the first agent's local frame.
    SubmapMerge {
        pair: (AgentId, AgentId),
        transform: Transform2,
    },
    /// The verification failed; the agent resumes exploring.
    AbortVerification {
        pair: (AgentId, AgentId),
        agent: AgentId,
    },
}

fn view<'a, 'b>(agents: &'b [AgentView<'a>], id: AgentId) -> &'b AgentView<'a> {
    agents
        .iter()
        .find(|a| a.id == id)
        .expect("agent view missing")
}

/// Pick the agent whose roadmap distance to its own side of the overlap is
/// shorter; ties go to the lower id. An agent that cannot reach its overlap
/// (a mapped dead end) defers to the other.
pub fn select_merging_agent(
    seq: &MatchedSequence,
    agents: &[AgentView],
    roadmaps: &[Roadmap],
) -> Result<AgentId, MergeError> {
    let dist_to_overlap = |id: AgentId, own_side_i: bool| -> f64 {
        let v = view(agents, id);
        let roadmap = &roadmaps[v.submap];
        let start = v.to_submap.apply_point(v.pose_local.position());
        let Some(src) = roadmap.nearest_node(start) else {
            return f64::INFINITY;
        };
        let field = roadmap.flood(src);
        let mut best = f64::INFINITY;
        for &(a, b) in &seq.pairs {
            let idx = if own_side_i { a } else { b };
            let kf = &v.segment.keyframes[idx];
            let p = v.to_submap.apply_point((kf.pose_local.x, kf.pose_local.y));
            if let Some(node) = roadmap.nearest_node(p) {
                if let Some(&d) = field.get(&node) {
                    best = best.min(d);
                }
            }
        }
        best
    };
    let di = dist_to_overlap(seq.i, true);
    let dj = dist_to_overlap(seq.j, false);
    match (di.is_finite(), dj.is_finite()) {
        (true, true) => {
            if di < dj || (di == dj && seq.i < seq.j) {
                Ok(seq.i)
            } else {
                Ok(seq.j)
            }
        }
        (true, false) => Ok(seq.i),
        (false, true) => Ok(seq.j),
        (false, false) => Err(MergeError::OverlapUnreachable),
    }
}

/// One server-side pass of the adaptive merge loop.
///
/// Ingests the cycle's matched sequences across distinct sub-maps, drops
/// geometrically invalid or previously rejected ones, scores the rest, and
/// advances every live connection through its state machine, emitting the
/// directives for the harness to execute.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_overlap_step(
    graph: &mut FactorGraph,
    roadmaps: &[Roadmap],
    agents: &[AgentView],
    sequences_by_pair: &BTreeMap<(AgentId, AgentId), Vec<MatchedSequence>>,
    policy: &VerificationPolicy,
    t: f64,
    params: &MergeParams,
    perception: &PerceptionParams,
) -> Vec<MergeDirective> {
    let mut directives = Vec::new();

    // Ingest the best admissible sequence per cross-sub-map pair.
    for (&(i, j), seqs) in sequences_by_pair {
        let (vi, vj) = (view(agents, i), view(agents, j));
        if vi.submap == vj.submap {
            continue;
        }
        let mut best: Option<(f64, &MatchedSequence)> = None;
        for seq in seqs {
            if graph.is_suppressed(seq) {
                continue;
            }
            if !is_match_valid(seq, vi.segment, vj.segment, perception.epsilon_geo) {
                continue;
            }
            let omega = inner_connection(seq, params);
            if best.as_ref().is_none_or(|(b, _)| omega > *b) {
                best = Some((omega, seq));
            }
        }
        if let Some((omega, seq)) = best {
            graph.observe(seq.clone(), omega, t);
        }
    }

    // Advance the state machine of every live edge, in pair order.
    let pairs: Vec<(AgentId, AgentId)> = graph.edges.keys().copied().collect();
    for (i, j) in pairs {
        let (vi, vj) = (view(agents, i), view(agents, j));
        if vi.submap == vj.submap {
            continue;
        }
        let conn = graph.edges.get(&(i, j)).unwrap();
        match conn.state {
            ConnState::Candidate => {
                let Some(seq) = conn.best_seq.clone() else {
                    continue;
                };
                let Ok(icp) = estimate_transform(&seq, vi.segment, vj.segment) else {
                    continue;
                };
                {
                    let conn = graph.edges.get_mut(&(i, j)).unwrap();
                    conn.transform = Some(icp.transform);
                    conn.fitness = icp.fitness;
                    conn.low_confidence = icp.low_confidence;
                }
                let omega = graph.edges[&(i, j)].omega;
                let confirm = match policy {
                    VerificationPolicy::ImmediateMerge => true,
                    _ => omega >= params.omega_thresh,
                };
                if confirm {
                    graph.try_transition(i, j, ConnState::Confirmed).unwrap();
                    directives.push(MergeDirective::SubmapMerge {
                        pair: (i, j),
                        transform: icp.transform,
                    });
                } else {
                    match select_merging_agent(&seq, agents, roadmaps) {
                        Ok(agent) => {
                            // An agent already verifying another connection
                            // finishes that first; this one stays a
                            // candidate.
                            if view(agents, agent).status != AgentStatus::Exploring {
                                continue;
                            }
                            graph.try_transition(i, j, ConnState::Verifying).unwrap();
                            let conn = graph.edges.get_mut(&(i, j)).unwrap();
                            conn.verifying_agent = Some(agent);
                            conn.t0 = t;
                            conn.omega_t0 = conn.omega;
                            directives.push(active_merge_directive(
                                (i, j),
                                agent,
                                &icp.transform,
                                omega,
                                policy,
                                params,
                            ));
                        }
                        // Neither side can reach the overlap yet: retry on a
                        // later cycle once the maps have grown.
                        Err(_) => continue,
                    }
                }
            }
            ConnState::Verifying => {
                // Re-estimate the transform whenever the sequence grew this
                // cycle: larger overlap sharpens it.
                if conn.updated_at == t {
                    if let Some(seq) = conn.best_seq.clone() {
                        if let Ok(icp) = estimate_transform(&seq, vi.segment, vj.segment) {
                            let conn = graph.edges.get_mut(&(i, j)).unwrap();
                            conn.transform = Some(icp.transform);
                            conn.fitness = icp.fitness;
                            conn.low_confidence = icp.low_confidence;
                        }
                    }
                }
                let conn = graph.edges.get(&(i, j)).unwrap();
                let agent = conn.verifying_agent.expect("verifying edge has an agent");
                let av = view(agents, agent);
                let omega = conn.omega;
                let transform = conn.transform.unwrap_or_else(Transform2::identity);

                let early_confirm = match policy {
                    VerificationPolicy::Adaptive => omega >= params.omega_thresh,
                    VerificationPolicy::FixedDistance(_) => false,
                    VerificationPolicy::ImmediateMerge => true,
                };
                if early_confirm {
                    graph.try_transition(i, j, ConnState::Confirmed).unwrap();
                    directives.push(MergeDirective::SubmapMerge {
                        pair: (i, j),
                        transform,
                    });
                    continue;
                }

                match policy {
                    VerificationPolicy::Adaptive => {
                        if av.status == AgentStatus::ActiveMerge
                            && conn.active_phase
                            && t - conn.last_gain_eval >= params.gain_interval
                            && t > conn.t0
                        {
                            {
                                let conn = graph.edges.get_mut(&(i, j)).unwrap();
                                conn.last_gain_eval = t;
                            }
                            let conn = graph.edges.get(&(i, j)).unwrap();
                            let gain = verification_gain(conn, t, params).unwrap();
                            if gain < params.gain_thresh {
                                graph.try_transition(i, j, ConnState::Rejected).unwrap();
                                directives.push(MergeDirective::AbortVerification {
                                    pair: (i, j),
                                    agent,
                                });
                                continue;
                            }
                        }
                    }
                    VerificationPolicy::FixedDistance(d_fix) => {
                        if av.status == AgentStatus::ActiveMerge && av.verify_travel >= *d_fix {
                            if omega >= params.omega_thresh {
                                graph.try_transition(i, j, ConnState::Confirmed).unwrap();
                                directives.push(MergeDirective::SubmapMerge {
                                    pair: (i, j),
                                    transform,
                                });
                            } else {
                                graph.try_transition(i, j, ConnState::Rejected).unwrap();
                                directives.push(MergeDirective::AbortVerification {
                                    pair: (i, j),
                                    agent,
                                });
                            }
                            continue;
                        }
                    }
                    VerificationPolicy::ImmediateMerge => unreachable!(),
                }

                directives.push(active_merge_directive(
                    (i, j),
                    agent,
                    &transform,
                    omega,
                    policy,
                    params,
                ));
            }
            ConnState::Confirmed | ConnState::Rejected => {}
        }
    }
    directives
}

fn active_merge_directive(
    pair: (AgentId, AgentId),
    agent: AgentId,
    transform_j_to_i: &Transform2,
    omega: f64,
    policy: &VerificationPolicy,
    params: &MergeParams,
) -> MergeDirective {
    let (other, transform) = if agent == pair.0 {
        (pair.1, *transform_j_to_i)
    } else {
        (pair.0, transform_j_to_i.invert())
    };
    let dist = match policy {
        VerificationPolicy::FixedDistance(d) => *d,
        _ => required_overlap_distance(omega, params).unwrap_or(0.0),
    };
    MergeDirective::ActiveMerge {
        pair,
        agent,
        other,
        transform,
        dist,
    }
}

/// Resolve a verification whose look-ahead targets ran out: under the fixed
/// distance policy the agent has repeated all it can and decides by weight;
/// otherwise exhaustion rejects the connection.
pub fn resolve_exhausted_verification(
    graph: &mut FactorGraph,
    pair: (AgentId, AgentId),
    policy: &VerificationPolicy,
    params: &MergeParams,
) -> Vec<MergeDirective> {
    let Some(conn) = graph.edges.get(&pair) else {
        return Vec::new();
    };
    if conn.state != ConnState::Verifying {
        return Vec::new();
    }
    let agent = conn.verifying_agent.expect("verifying edge has an agent");
    let omega = conn.omega;
    let transform = conn.transform.unwrap_or_else(Transform2::identity);
    let confirm = matches!(policy, VerificationPolicy::FixedDistance(_))
        && omega >= params.omega_thresh;
    if confirm {
        graph.try_transition(pair.0, pair.1, ConnState::Confirmed).unwrap();
        vec![MergeDirective::SubmapMerge { pair, transform }]
    } else {
        graph.try_transition(pair.0, pair.1, ConnState::Rejected).unwrap();
        vec![MergeDirective::AbortVerification { pair, agent }]
    }
}

/// Inputs for planning one verification path.
pub struct ActiveMergeContext<'a> {
    pub agent: &'a AgentView<'a>,
    /// Fused map of the agent's sub-map.
    pub map: &'a CoverageMap,
    pub roadmap: &'a Roadmap,
    /// Maps the counterpart's local frame into the agent's local frame.
    pub transform_other_to_agent: Transform2,
    /// Look-ahead budget in meters.
    pub dist: f64,
    pub other_segment: &'a Segment,
    /// Counterpart keyframe indices inside the current overlap.
    pub overlap_other: &'a BTreeSet<usize>,
    /// The agent's own matched keyframe positions, local frame.
    pub own_overlap_positions: &'a [(f64, f64)],
    /// Counterpart keyframe indices already visited during this
    /// verification.
    pub visited: &'a BTreeSet<usize>,
    pub arrival_radius: f64,
}

/// A verification path in the agent's local frame. `targets` lists the
/// counterpart keyframe indices the path chases, in order; `exhausted` is
/// set when no reachable unvisited key pose remains.
#[derive(Debug, Clone, Default)]
pub struct MergePlan {
    pub waypoints: Vec<Pose2>,
    pub targets: Vec<usize>,
    pub exhausted: bool,
}

const ASTAR_BUDGET: usize = 400_000;

/// Plan the next stretch of an active merge.
///
/// While returning to the overlap the agent follows its own mapped space to
/// the nearest matched keyframe. Once there, it greedily chases the closest
/// not-yet-visited counterpart key pose outside the overlap, transformed
/// into its own frame, accumulating legs until the look-ahead budget is
/// spent.
pub fn active_merge_plan(ctx: &ActiveMergeContext) -> MergePlan {
    match ctx.agent.status {
        AgentStatus::BackToOverlap => plan_back_to_overlap(ctx),
        AgentStatus::ActiveMerge => plan_look_ahead(ctx),
        AgentStatus::Exploring => MergePlan::default(),
    }
}

fn local_to_map_cell(ctx: &ActiveMergeContext, p: (f64, f64)) -> (i32, i32) {
    ctx.map.cell_of(ctx.agent.to_submap.apply_point(p))
}

fn waypoints_from_cells(ctx: &ActiveMergeContext, cells: &[(i32, i32)]) -> Vec<Pose2> {
    let back = ctx.agent.to_submap.invert();
    let mut out = Vec::with_capacity(cells.len());
    for window in cells.windows(2) {
        let a = ctx.map.center_of(window[0]);
        let b = ctx.map.center_of(window[1]);
        let p = back.apply_point(b);
        let heading = (b.1 - a.1).atan2(b.0 - a.0) + back.rotation;
        out.push(Pose2::new(p.0, p.1, heading));
    }
    out
}

fn plan_back_to_overlap(ctx: &ActiveMergeContext) -> MergePlan {
    let pose = ctx.agent.pose_local;
    // Choose the matched keyframe nearest by roadmap distance.
    let start_sub = ctx.agent.to_submap.apply_point(pose.position());
    let field = ctx
        .roadmap
        .nearest_node(start_sub)
        .map(|src| ctx.roadmap.flood(src))
        .unwrap_or_default();
    let mut best: Option<(f64, (f64, f64))> = None;
    for &p in ctx.own_overlap_positions {
        let sub = ctx.agent.to_submap.apply_point(p);
        let d = ctx
            .roadmap
            .nearest_node(sub)
            .and_then(|n| field.get(&n).copied())
            .unwrap_or(f64::INFINITY);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, p));
        }
    }
    let Some((dist, target)) = best else {
        return MergePlan {
            exhausted: true,
            ..MergePlan::default()
        };
    };
    if !dist.is_finite() {
        return MergePlan {
            exhausted: true,
            ..MergePlan::default()
        };
    }
    let dx = target.0 - pose.x;
    let dy = target.1 - pose.y;
    if (dx * dx + dy * dy).sqrt() <= ctx.arrival_radius {
        // Already at the overlap entrance.
        return MergePlan::default();
    }
    let start = local_to_map_cell(ctx, pose.position());
    let goal = local_to_map_cell(ctx, target);
    match astar_fine(ctx.map, Passable::KnownFree, start, goal, ASTAR_BUDGET) {
        Some((cells, _)) => MergePlan {
            waypoints: waypoints_from_cells(ctx, &cells),
            targets: Vec::new(),
            exhausted: false,
        },
        None => MergePlan {
            exhausted: true,
            ..MergePlan::default()
        },
    }
}

fn plan_look_ahead(ctx: &ActiveMergeContext) -> MergePlan {
    // Candidate key poses of the counterpart, transformed into this agent's
    // local frame: unvisited, outside the overlap, not in known obstacles.
    let mut candidates: Vec<(usize, (f64, f64))> = Vec::new();
    for kf in &ctx.other_segment.keyframes {
        if ctx.visited.contains(&kf.index) || ctx.overlap_other.contains(&kf.index) {
            continue;
        }
        let local = ctx
            .transform_other_to_agent
            .apply_point((kf.pose_local.x, kf.pose_local.y));
        let cell = local_to_map_cell(ctx, local);
        if ctx.map.belief(cell) == crate::nav::KNOWN_OBSTACLE {
            continue;
        }
        candidates.push((kf.index, local));
    }
    if candidates.is_empty() {
        return MergePlan {
            exhausted: true,
            ..MergePlan::default()
        };
    }

    let mut waypoints = Vec::new();
    let mut targets = Vec::new();
    let mut spent = 0.0;
    let mut cursor = ctx.agent.pose_local.position();
    let mut remaining = candidates;
    let mut any_reachable = false;
    while spent < ctx.dist && !remaining.is_empty() {
        // Greedy: euclidean-closest next key pose.
        remaining.sort_by(|x, y| {
            let dx = (x.1 .0 - cursor.0).powi(2) + (x.1 .1 - cursor.1).powi(2);
            let dy = (y.1 .0 - cursor.0).powi(2) + (y.1 .1 - cursor.1).powi(2);
            dx.partial_cmp(&dy).unwrap().then(x.0.cmp(&y.0))
        });
        let (idx, target) = remaining.remove(0);
        let start = local_to_map_cell(ctx, cursor);
        let goal = local_to_map_cell(ctx, target);
        let Some((cells, len)) = astar_fine(ctx.map, Passable::Optimistic, start, goal, ASTAR_BUDGET)
        else {
            continue;
        };
        any_reachable = true;
        if spent + len > ctx.dist && !targets.is_empty() {
            break;
        }
        waypoints.extend(waypoints_from_cells(ctx, &cells));
        targets.push(idx);
        spent += len;
        cursor = target;
    }
    if !any_reachable {
        return MergePlan {
            exhausted: true,
            ..MergePlan::default()
        };
    }
    MergePlan {
        waypoints,
        targets,
        exhausted: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(i: usize, j: usize, l: usize, residual: f64) -> MatchedSequence {
        MatchedSequence {
            i: AgentId(i),
            j: AgentId(j),
            pairs: (0..l).map(|k| (k, k)).collect(),
            overlap_len: l,
            mean_residual: residual,
        }
    }

    #[test]
    fn inner_connection_matches_closed_form() {
        let params = MergeParams::default();
        let omega = inner_connection(&seq(0, 1, 5, 0.0), &params);
        assert!((omega - 0.8187307563529048).abs() < 1e-12);
        assert!((omega - 0.81873).abs() < 1e-4);
    }

    #[test]
    fn inner_connection_self_is_zero() {
        let params = MergeParams::default();
        assert_eq!(inner_connection(&seq(2, 2, 5, 0.0), &params), 0.0);
    }

    #[test]
    fn inner_connection_monotonicity() {
        let params = MergeParams::default();
        let base = inner_connection(&seq(0, 1, 5, 0.3), &params);
        assert!(inner_connection(&seq(0, 1, 10, 0.3), &params) > base);
        assert!(inner_connection(&seq(0, 1, 5, 0.6), &params) < base);
        // Bounded inside (0, 1).
        for l in 1..40 {
            for r in [0.0, 0.2, 1.0] {
                let w = inner_connection(&seq(0, 1, l, r), &params);
                assert!(w > 0.0 && w < 1.0);
            }
        }
    }

    #[test]
    fn required_distance_matches_closed_form() {
        let params = MergeParams::default();
        assert_eq!(required_overlap_distance(0.8, &params).unwrap(), 0.0);
        let d = required_overlap_distance(0.5, &params).unwrap();
        assert!((d - 30.387250768355877).abs() < 1e-9);
        assert!((d - 30.39).abs() < 5e-3);
        // Monotone decreasing below the threshold, clamped above it.
        assert!(
            required_overlap_distance(0.6, &params).unwrap()
                < required_overlap_distance(0.5, &params).unwrap()
        );
        assert_eq!(required_overlap_distance(0.95, &params).unwrap(), 0.0);
        assert!(required_overlap_distance(0.0, &params).is_err());
        assert!(required_overlap_distance(1.0, &params).is_err());
        assert!(required_overlap_distance(-0.2, &params).is_err());
    }

    fn verifying_conn(omega_t0: f64, omega: f64, t0: f64) -> InnerConnection {
        let mut conn = InnerConnection::new(AgentId(0), AgentId(1), omega_t0, t0);
        conn.state = ConnState::Verifying;
        conn.omega = omega;
        conn.omega_t0 = omega_t0;
        conn.t0 = t0;
        conn
    }

    #[test]
    fn verification_gain_matches_closed_form() {
        let params = MergeParams::default();
        let conn = verifying_conn(0.3, 0.5, 0.0);
        let g = verification_gain(&conn, 10.0, &params).unwrap();
        assert!((g - 0.020999997900000213).abs() < 1e-12);
        assert!((g - 0.021).abs() < 1e-4);
    }

    #[test]
    fn verification_gain_sign_and_errors() {
        let mut params = MergeParams::default();
        params.c_epsilon = 0.0;
        let conn = verifying_conn(0.4, 0.4, 0.0);
        assert_eq!(verification_gain(&conn, 5.0, &params).unwrap(), 0.0);

        params.c_epsilon = 0.01;
        let dropped = verifying_conn(0.4, 0.35, 0.0);
        assert!(verification_gain(&dropped, 5.0, &params).unwrap() < 0.0);

        assert!(matches!(
            verification_gain(&conn, 0.0, &params),
            Err(MergeError::GainTime { .. })
        ));
        let mut candidate = verifying_conn(0.4, 0.5, 0.0);
        candidate.state = ConnState::Candidate;
        assert!(matches!(
            verification_gain(&candidate, 5.0, &params),
            Err(MergeError::NotVerifying)
        ));
    }

    #[test]
    fn state_machine_allows_only_legal_transitions() {
        let mut graph = FactorGraph::new();
        graph.observe(seq(0, 1, 3, 0.0), 0.5, 1.0);
        // Candidate -> Rejected is forbidden.
        assert!(matches!(
            graph.try_transition(AgentId(0), AgentId(1), ConnState::Rejected),
            Err(MergeError::ForbiddenTransition { .. })
        ));
        graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Verifying)
            .unwrap();
        assert!(graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Candidate)
            .is_err());
        graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Rejected)
            .unwrap();
        // Terminal.
        assert!(graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Confirmed)
            .is_err());
        assert_eq!(graph.rejection_count(), 1);
    }

    #[test]
    fn rejected_windows_suppress_lookalikes_but_not_new_overlaps() {
        let mut graph = FactorGraph::new();
        graph.observe(seq(0, 1, 5, 0.0), 0.5, 1.0);
        graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Verifying)
            .unwrap();
        graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Rejected)
            .unwrap();
        // Same window again: suppressed.
        assert!(graph.is_suppressed(&seq(0, 1, 5, 0.0)));
        // A sequence over disjoint keyframes is admissible.
        let fresh = MatchedSequence {
            i: AgentId(0),
            j: AgentId(1),
            pairs: (20..26).map(|k| (k, k)).collect(),
            overlap_len: 6,
            mean_residual: 0.0,
        };
        assert!(!graph.is_suppressed(&fresh));
        // Observing it replaces the rejected edge with a fresh candidate.
        graph.observe(fresh, 0.9, 2.0);
        assert_eq!(
            graph.edge(AgentId(0), AgentId(1)).unwrap().state,
            ConnState::Candidate
        );
        graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Confirmed)
            .unwrap();
        let clusters = cluster_submaps(&graph, &[AgentId(0), AgentId(1), AgentId(2)]);
        assert_eq!(clusters, vec![vec![AgentId(0), AgentId(1)], vec![AgentId(2)]]);
    }

    #[test]
    fn clustering_components() {
        let agents: Vec<AgentId> = (0..3).map(AgentId).collect();
        let graph = FactorGraph::new();
        let clusters = cluster_submaps(&graph, &agents);
        assert_eq!(clusters.len(), 3);

        let mut graph = FactorGraph::new();
        graph.observe(seq(0, 1, 5, 0.0), 0.9, 1.0);
        graph
            .try_transition(AgentId(0), AgentId(1), ConnState::Confirmed)
            .unwrap();
        graph.observe(seq(1, 2, 5, 0.0), 0.9, 1.0);
        graph
            .try_transition(AgentId(1), AgentId(2), ConnState::Confirmed)
            .unwrap();
        let clusters = cluster_submaps(&graph, &agents);
        assert_eq!(clusters, vec![vec![AgentId(0), AgentId(1), AgentId(2)]]);
    }

    #[test]
    fn merge_submaps_reference_and_union() {
        let m1 = SubMap::singleton(SubMapId(0), AgentId(1), 0.5, 10.0);
        let m2 = SubMap::singleton(SubMapId(1), AgentId(2), 0.5, 10.0);
        let mut m1 = m1;
        let mut m2 = m2;
        for x in 0..10 {
            m1.map.mark((x, 0), crate::nav::KNOWN_FREE);
            m2.map.mark((x, 0), if x == 5 { crate::nav::KNOWN_OBSTACLE } else { crate::nav::KNOWN_FREE });
        }
        let t = Transform2::new(0.0, (0.0, 2.0));
        let merged = merge_submaps(&m1, &m2, &t, SubMapId(2)).unwrap();
        assert_eq!(merged.members, vec![AgentId(1), AgentId(2)]);
        assert_eq!(merged.reference, AgentId(1));
        assert_eq!(
            merged.transforms[&AgentId(1)],
            Transform2::identity()
        );
        assert_eq!(merged.transforms[&AgentId(2)], t);
        // Known area of the merged map covers both inputs.
        for x in 0..10 {
            assert_ne!(merged.map.belief((x, 0)), crate::nav::UNKNOWN);
            let p = t.apply_point(m2.map.center_of((x, 0)));
            assert_ne!(merged.map.belief(merged.map.cell_of(p)), crate::nav::UNKNOWN);
        }
        // Merging overlapping membership is refused.
        assert!(matches!(
            merge_submaps(&merged, &m2, &t, SubMapId(3)),
            Err(MergeError::MemberOverlap(_))
        ));
    }

    #[test]
    fn idle_step_emits_nothing() {
        let mut graph = FactorGraph::new();
        let seg0 = Segment::new(AgentId(0));
        let seg1 = Segment::new(AgentId(1));
        let submap_map = CoverageMap::new(0.25, 10.0);
        let roadmaps = vec![Roadmap::build(&submap_map, 1.0), Roadmap::build(&submap_map, 1.0)];
        let agents = vec![
            AgentView {
                id: AgentId(0),
                submap: 0,
                pose_local: Pose2::new(0.0, 0.0, 0.0),
                to_submap: Transform2::identity(),
                status: AgentStatus::Exploring,
                segment: &seg0,
                verify_travel: 0.0,
            },
            AgentView {
                id: AgentId(1),
                submap: 1,
                pose_local: Pose2::new(0.0, 0.0, 0.0),
                to_submap: Transform2::identity(),
                status: AgentStatus::Exploring,
                segment: &seg1,
                verify_travel: 0.0,
            },
        ];
        let directives = adaptive_overlap_step(
            &mut graph,
            &roadmaps,
            &agents,
            &BTreeMap::new(),
            &VerificationPolicy::Adaptive,
            1.0,
            &MergeParams::default(),
            &PerceptionParams::default(),
        );
        assert!(directives.is_empty());
    }

}
