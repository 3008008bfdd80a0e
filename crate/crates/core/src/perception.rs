//! Place-recognition front end: turns range scans into yaw-invariant
//! descriptors, maintains each agent's keyframe segment, and finds matched
//! keyframe sequences between two agents' segments.
//!
//! The descriptor is engineered rather than learned so tests can dial
//! perceptual aliasing up and down: geometrically identical places collide by
//! construction, and injectable noise controls how quickly they separate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::world::{Pose2, Scan};

/// Identity of one agent; densely allocated from zero by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct AgentId(pub usize);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "agent{}", self.0)
    }
}

/// Tunables for descriptor extraction and sequence matching.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PerceptionParams {
    /// Descriptor length; half histogram, half autocorrelation signature.
    pub descriptor_bins: usize,
    /// Mutual-nearest-neighbor descriptor distance below which two keyframes
    /// are considered the same place.
    pub theta_match: f64,
    /// Standard deviation of the additive descriptor noise.
    pub sigma_d: f64,
    /// Minimum run length for a matched sequence to be reported.
    pub l_min: usize,
    /// Odometric distance between consecutive keyframes, meters.
    pub keyframe_spacing: f64,
    /// Tolerance on inter-pose distance agreement in `is_match_valid`, m.
    pub epsilon_geo: f64,
}

impl Default for PerceptionParams {
    fn default() -> Self {
        PerceptionParams {
            descriptor_bins: 32,
            theta_match: 0.18,
            sigma_d: 0.005,
            l_min: 3,
            keyframe_spacing: 2.0,
            epsilon_geo: 0.5,
        }
    }
}

/// Unit-norm place signature, invariant to sensor yaw by construction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Descriptor {
    pub bins: Vec<f64>,
}

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> f64 {
        debug_assert_eq!(self.bins.len(), other.bins.len());
        self.bins
            .iter()
            .zip(&other.bins)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Extract the place descriptor of a scan.
///
/// The first half of the vector is a histogram of ranges over
/// `[0, max_range]`; the second half samples the circular autocorrelation of
/// the normalized range sequence, which is invariant to cyclic shifts (and
/// therefore to sensor yaw at multiples of the beam spacing). Zero-mean
/// gaussian noise of deviation `sigma_d` is added per bin, bins are clamped
/// nonnegative, and the result is L2-normalized.
pub fn extract_descriptor(scan: &Scan, params: &PerceptionParams, noise_seed: u64) -> Descriptor {
    let half = params.descriptor_bins / 2;
    let n = scan.ranges.len();
    let mut bins = vec![0.0; params.descriptor_bins];

    // Range histogram (mass, so the total count cancels).
    for &r in &scan.ranges {
        let idx = ((r / scan.max_range) * half as f64).floor() as usize;
        bins[idx.min(half - 1)] += 1.0 / n as f64;
    }

    // Circular autocorrelation of the normalized range sequence at `half`
    // evenly spread lags.
    let normed: Vec<f64> = scan.ranges.iter().map(|&r| r / scan.max_range).collect();
    for j in 0..half {
        let lag = ((j + 1) * n) / (2 * half + 2);
        let mut acc = 0.0;
        for k in 0..n {
            acc += normed[k] * normed[(k + lag) % n];
        }
        bins[half + j] = acc / n as f64;
    }

    if params.sigma_d > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, params.sigma_d).unwrap();
        for b in bins.iter_mut() {
            *b = (*b + normal.sample(&mut rng)).max(0.0);
        }
    }

    let norm = bins.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm > 0.0 {
        for b in bins.iter_mut() {
            *b /= norm;
        }
    }
    Descriptor { bins }
}

/// One node of an agent's trajectory: pose in the agent's private frame, the
/// place descriptor, and the scan endpoints used for registration.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub index: usize,
    pub pose_local: Pose2,
    pub descriptor: Descriptor,
    pub points: Vec<(f64, f64)>,
    pub odometric_distance: f64,
}

/// The ordered keyframe trajectory of one agent, in its private frame.
#[derive(Debug, Clone, Default)]
pub struct Segment {
    pub agent_id: AgentId,
    pub frame_id: String,
    pub keyframes: Vec<Keyframe>,
}

impl Default for AgentId {
    fn default() -> Self {
        AgentId(0)
    }
}

impl Segment {
    pub fn new(agent_id: AgentId) -> Self {
        Segment {
            agent_id,
            frame_id: format!("{agent_id}/local"),
            keyframes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }
}

/// A maximal run of mutually matched keyframes, consecutive in both segments.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSequence {
    pub i: AgentId,
    pub j: AgentId,
    /// `(keyframe index in segment i, keyframe index in segment j)`.
    pub pairs: Vec<(usize, usize)>,
    /// Overlap length: the number of matched pairs.
    pub overlap_len: usize,
    /// Mean per-pair descriptor distance over the run.
    pub mean_residual: f64,
}

impl MatchedSequence {
    fn from_run(i: AgentId, j: AgentId, run: Vec<(usize, usize, f64)>) -> Self {
        let overlap_len = run.len();
        let mean_residual = run.iter().map(|p| p.2).sum::<f64>() / overlap_len as f64;
        MatchedSequence {
            i,
            j,
            pairs: run.into_iter().map(|(a, b, _)| (a, b)).collect(),
            overlap_len,
            mean_residual,
        }
    }
}

/// Incremental mutual-nearest-neighbor matcher for one (ordered) pair of
/// segments. Feeding keyframes in batches yields exactly the same sequences
/// as matching the full segments from scratch.
#[derive(Debug, Clone, Default)]
pub struct MatchIndex {
    // Best counterpart (index, distance) for each keyframe on either side.
    nn_i: Vec<(usize, f64)>,
    nn_j: Vec<(usize, f64)>,
}

impl MatchIndex {
    pub fn new() -> Self {
        MatchIndex::default()
    }

    /// Absorb keyframes appended to either segment since the last call.
    pub fn update(&mut self, seg_i: &Segment, seg_j: &Segment) {
        let old_i = self.nn_i.len();
        let old_j = self.nn_j.len();
        let kfs_i = &seg_i.keyframes;
        let kfs_j = &seg_j.keyframes;

        for a in old_i..kfs_i.len() {
            self.nn_i.push(nearest(&kfs_i[a].descriptor, kfs_j, 0));
        }
        for b in old_j..kfs_j.len() {
            self.nn_j.push(nearest(&kfs_j[b].descriptor, kfs_i, 0));
        }
        // New arrivals may beat the cached nearest of older keyframes.
        if kfs_j.len() > old_j {
            for a in 0..old_i {
                let cand = nearest(&kfs_i[a].descriptor, kfs_j, old_j);
                if cand.1 < self.nn_i[a].1 {
                    self.nn_i[a] = cand;
                }
            }
        }
        if kfs_i.len() > old_i {
            for b in 0..old_j {
                let cand = nearest(&kfs_j[b].descriptor, kfs_i, old_i);
                if cand.1 < self.nn_j[b].1 {
                    self.nn_j[b] = cand;
                }
            }
        }
    }

    /// Matched sequences under the current caches; sorted by overlap length
    /// descending.
    pub fn sequences(
        &self,
        seg_i: &Segment,
        seg_j: &Segment,
        params: &PerceptionParams,
    ) -> Vec<MatchedSequence> {
        // Mutual pairs under the matching threshold, ordered by the i-side.
        let mut mutual: Vec<(usize, usize, f64)> = Vec::new();
        for (a, &(b, d)) in self.nn_i.iter().enumerate() {
            if d < params.theta_match && self.nn_j.get(b).is_some_and(|&(a2, _)| a2 == a) {
                mutual.push((a, b, d));
            }
        }

        let mut runs: Vec<Vec<(usize, usize, f64)>> = Vec::new();
        let mut current: Vec<(usize, usize, f64)> = Vec::new();
        let mut direction = 0i32;
        for pair in mutual {
            if let Some(&(pa, pb, _)) = current.last() {
                let da = pair.0 as i32 - pa as i32;
                let db = pair.1 as i32 - pb as i32;
                // Consecutive in both segments with at most one skipped
                // keyframe, advancing monotonically on the j side.
                let chained = (1..=2).contains(&da)
                    && (1..=2).contains(&db.abs())
                    && (direction == 0 || db.signum() == direction);
                if chained {
                    direction = db.signum();
                    current.push(pair);
                    continue;
                }
                runs.push(std::mem::take(&mut current));
                direction = 0;
            }
            current.push(pair);
        }
        if !current.is_empty() {
            runs.push(current);
        }

        let mut out: Vec<MatchedSequence> = runs
            .into_iter()
            .filter(|r| r.len() >= params.l_min)
            .map(|r| MatchedSequence::from_run(seg_i.agent_id, seg_j.agent_id, r))
            .collect();
        out.sort_by(|x, y| {
            y.overlap_len
                .cmp(&x.overlap_len)
                .then_with(|| x.pairs[0].cmp(&y.pairs[0]))
        });
        out
    }
}

fn nearest(desc: &Descriptor, others: &[Keyframe], from: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (idx, kf) in others.iter().enumerate().skip(from) {
        let d = desc.distance(&kf.descriptor);
        if d < best.1 {
            best = (idx, d);
        }
    }
    best
}

/// Match two segments from scratch: mutual-nearest-neighbor keyframe pairs
/// under `theta_match`, chained into maximal runs consecutive in both
/// segments; runs shorter than `l_min` are discarded.
pub fn match_sequences(
    seg_i: &Segment,
    seg_j: &Segment,
    params: &PerceptionParams,
) -> Vec<MatchedSequence> {
    if seg_i.is_empty() || seg_j.is_empty() {
        return Vec::new();
    }
    let mut index = MatchIndex::new();
    index.update(seg_i, seg_j);
    index.sequences(seg_i, seg_j, params)
}

/// Geometric consistency check: the distance between every two matched poses
/// on the i side must agree with the corresponding distance on the j side,
/// for at least 90% of pose pairs.
pub fn is_match_valid(seq: &MatchedSequence, seg_i: &Segment, seg_j: &Segment, epsilon_geo: f64) -> bool {
    let mut consistent = 0usize;
    let mut total = 0usize;
    for x in 0..seq.pairs.len() {
        for y in (x + 1)..seq.pairs.len() {
            let (ax, bx) = seq.pairs[x];
            let (ay, by) = seq.pairs[y];
            let di = seg_i.keyframes[ax]
                .pose_local
                .distance(&seg_i.keyframes[ay].pose_local);
            let dj = seg_j.keyframes[bx]
                .pose_local
                .distance(&seg_j.keyframes[by].pose_local);
            total += 1;
            if (di - dj).abs() < epsilon_geo {
                consistent += 1;
            }
        }
    }
    if total == 0 {
        return true;
    }
    consistent as f64 >= 0.9 * total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_world, raycast, GridWorld};

    fn params_noiseless() -> PerceptionParams {
        PerceptionParams {
            sigma_d: 0.0,
            ..PerceptionParams::default()
        }
    }

    fn fixture_world() -> GridWorld {
        // Two differently shaped rooms joined by a corridor: a wide square
        // room on the left, a cluttered narrow room on the right.
        let mut text = String::new();
        for r in 0..60 {
            for c in 0..120 {
                let corridor = (26..=33).contains(&r) && (40..80).contains(&c);
                let left = c < 40;
                let right = c >= 80;
                let pillar = (10..=16).contains(&r) && (96..=102).contains(&c);
                let ch = if corridor || (left && !pillar) || (right && !pillar) {
                    '.'
                } else {
                    '#'
                };
                text.push(ch);
            }
            text.push('\n');
        }
        load_world(&text, 0.25).unwrap()
    }

    fn descriptor_at(world: &GridWorld, x: f64, y: f64, theta: f64, params: &PerceptionParams) -> Descriptor {
        let pose = Pose2::new(x, y, theta);
        let scan = raycast(world, &pose, 360, 30.0).unwrap();
        extract_descriptor(&scan, params, 7)
    }

    #[test]
    fn descriptor_deterministic_at_zero_noise() {
        let world = fixture_world();
        let p = params_noiseless();
        let a = descriptor_at(&world, 5.0, 7.5, 0.4, &p);
        let b = descriptor_at(&world, 5.0, 7.5, 0.4, &p);
        assert_eq!(a.distance(&b), 0.0);
        assert!((a.bins.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn descriptor_yaw_invariant() {
        let world = fixture_world();
        let p = params_noiseless();
        let a = descriptor_at(&world, 5.0, 7.5, 0.0, &p);
        let b = descriptor_at(&world, 5.0, 7.5, std::f64::consts::FRAC_PI_2, &p);
        assert!(a.distance(&b) < 1e-6);
    }

    #[test]
    fn descriptor_separates_distinct_rooms() {
        let world = fixture_world();
        let p = params_noiseless();
        // Left room center vs right room, > 20 m apart, different shapes.
        let a = descriptor_at(&world, 5.0, 7.5, 0.0, &p);
        let b = descriptor_at(&world, 27.0, 7.5, 0.0, &p);
        assert!(a.distance(&b) > p.theta_match);
    }

    #[test]
    fn noise_seed_changes_descriptor_but_stays_normalized() {
        let world = fixture_world();
        let mut p = params_noiseless();
        p.sigma_d = 0.005;
        let pose = Pose2::new(5.0, 7.5, 0.0);
        let scan = raycast(&world, &pose, 360, 30.0).unwrap();
        let a = extract_descriptor(&scan, &p, 1);
        let b = extract_descriptor(&scan, &p, 2);
        assert!(a.distance(&b) > 0.0);
        assert!(a.bins.iter().all(|&v| v >= 0.0));
        assert!((a.bins.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        // Same place under default noise stays far below theta_match
        // (max observed over 20 seed pairs on this fixture: 0.072).
        assert!(a.distance(&b) < 0.1);
    }

    /// Build a segment with keyframes every 2 m along a straight corridor
    /// sweep of the fixture world, expressed in an arbitrary private frame.
    fn corridor_segment(world: &GridWorld, id: usize, count: usize, reversed: bool) -> Segment {
        let p = params_noiseless();
        let mut seg = Segment::new(AgentId(id));
        for k in 0..count {
            let step = if reversed { count - 1 - k } else { k };
            let x = 10.5 + 2.0 * step as f64;
            let pose = Pose2::new(x, 7.4, 0.0);
            let scan = raycast(world, &pose, 360, 30.0).unwrap();
            let desc = extract_descriptor(&scan, &p, 0);
            seg.keyframes.push(Keyframe {
                index: k,
                pose_local: Pose2::new(x - 10.0 * id as f64, 7.4, 0.0),
                descriptor: desc,
                points: Vec::new(),
                odometric_distance: 2.0 * k as f64,
            });
        }
        seg
    }

    #[test]
    fn self_match_covers_whole_segment() {
        let world = fixture_world();
        // Descriptors along the corridor must be distinct enough that each
        // keyframe's nearest neighbor is its own twin.
        let seg_a = corridor_segment(&world, 0, 8, false);
        let mut seg_b = corridor_segment(&world, 1, 8, false);
        seg_b.agent_id = AgentId(1);
        let seqs = match_sequences(&seg_a, &seg_b, &params_noiseless());
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].overlap_len, 8);
        assert!(seqs[0].mean_residual < 1e-9);
        assert_eq!(seqs[0].pairs, (0..8).map(|k| (k, k)).collect::<Vec<_>>());
    }

    #[test]
    fn reversed_traversal_matches_with_descending_j() {
        let world = fixture_world();
        let seg_a = corridor_segment(&world, 0, 8, false);
        let seg_b = corridor_segment(&world, 1, 8, true);
        let seqs = match_sequences(&seg_a, &seg_b, &params_noiseless());
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].overlap_len, 8);
        let pairs = &seqs[0].pairs;
        for w in pairs.windows(2) {
            assert_eq!(w[1].0 as i32 - w[0].0 as i32, 1);
            assert_eq!(w[1].1 as i32 - w[0].1 as i32, -1);
        }
    }

    #[test]
    fn disjoint_places_yield_no_sequences() {
        let world = fixture_world();
        let p = params_noiseless();
        let mut seg_a = Segment::new(AgentId(0));
        let mut seg_b = Segment::new(AgentId(1));
        for k in 0..5 {
            let pose_a = Pose2::new(3.0 + 1.5 * k as f64, 4.0, 0.0);
            let pose_b = Pose2::new(22.0 + 1.0 * k as f64, 11.5, 0.0);
            let scan_a = raycast(&world, &pose_a, 360, 30.0).unwrap();
            let scan_b = raycast(&world, &pose_b, 360, 30.0).unwrap();
            seg_a.keyframes.push(Keyframe {
                index: k,
                pose_local: pose_a,
                descriptor: extract_descriptor(&scan_a, &p, 0),
                points: Vec::new(),
                odometric_distance: 1.5 * k as f64,
            });
            seg_b.keyframes.push(Keyframe {
                index: k,
                pose_local: pose_b,
                descriptor: extract_descriptor(&scan_b, &p, 0),
                points: Vec::new(),
                odometric_distance: 1.0 * k as f64,
            });
        }
        assert!(match_sequences(&seg_a, &seg_b, &p).is_empty());
    }

    #[test]
    fn incremental_index_matches_batch() {
        let world = fixture_world();
        let p = params_noiseless();
        let seg_a = corridor_segment(&world, 0, 10, false);
        let seg_b = corridor_segment(&world, 1, 10, false);

        let batch = match_sequences(&seg_a, &seg_b, &p);

        let mut index = MatchIndex::new();
        let mut partial_a = Segment::new(AgentId(0));
        let mut partial_b = Segment::new(AgentId(1));
        for k in 0..10 {
            partial_a.keyframes.push(seg_a.keyframes[k].clone());
            index.update(&partial_a, &partial_b);
            if k % 2 == 0 {
                partial_b.keyframes.push(seg_b.keyframes[k / 2].clone());
                index.update(&partial_a, &partial_b);
            }
        }
        for k in 5..10 {
            partial_b.keyframes.push(seg_b.keyframes[k].clone());
        }
        index.update(&partial_a, &partial_b);

        let incremental = index.sequences(&partial_a, &partial_b, &p);
        assert_eq!(batch, incremental);
    }

    #[test]
    fn match_symmetry() {
        let world = fixture_world();
        let p = params_noiseless();
        let seg_a = corridor_segment(&world, 0, 8, false);
        let seg_b = corridor_segment(&world, 1, 8, true);
        let fwd = match_sequences(&seg_a, &seg_b, &p);
        let rev = match_sequences(&seg_b, &seg_a, &p);
        assert_eq!(fwd.len(), rev.len());
        for f in &fwd {
            let swapped: Vec<(usize, usize)> = {
                let mut v: Vec<(usize, usize)> =
                    f.pairs.iter().map(|&(a, b)| (b, a)).collect();
                v.sort_unstable();
                v
            };
            assert!(rev.iter().any(|r| {
                let mut v = r.pairs.clone();
                v.sort_unstable();
                v == swapped
            }));
        }
    }

    #[test]
    fn geometric_validity_accepts_true_and_rejects_shuffled() {
        let world = fixture_world();
        let p = params_noiseless();
        let seg_a = corridor_segment(&world, 0, 8, false);
        let seg_b = corridor_segment(&world, 1, 8, false);
        let seqs = match_sequences(&seg_a, &seg_b, &p);
        assert!(is_match_valid(&seqs[0], &seg_a, &seg_b, p.epsilon_geo));

        let mut shuffled = seqs[0].clone();
        let n = shuffled.pairs.len();
        for k in 0..n {
            shuffled.pairs[k].1 = (shuffled.pairs[k].1 * 5 + 3) % n;
        }
        assert!(!is_match_valid(&shuffled, &seg_a, &seg_b, p.epsilon_geo));
    }

    #[test]
    fn sequence_invariants_hold() {
        let world = fixture_world();
        let p = params_noiseless();
        let seg_a = corridor_segment(&world, 0, 9, false);
        let seg_b = corridor_segment(&world, 1, 9, false);
        for seq in match_sequences(&seg_a, &seg_b, &p) {
            assert_eq!(seq.overlap_len, seq.pairs.len());
            for w in seq.pairs.windows(2) {
                let da = w[1].0 as i32 - w[0].0 as i32;
                let db = w[1].1 as i32 - w[0].1 as i32;
                assert!((1..=2).contains(&da));
                assert!((1..=2).contains(&db.abs()));
            }
        }
    }
}
