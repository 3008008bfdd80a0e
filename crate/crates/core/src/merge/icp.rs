//! 2D point-to-point ICP for estimating the rigid transform between two
//! agents' frames, seeded by the closed-form alignment of matched keyframe
//! positions.

use std::collections::HashMap;

use super::MergeError;
use crate::perception::{MatchedSequence, Segment};
use crate::world::Transform2;

/// Result of a transform estimation: `transform` maps points in the second
/// (j) frame into the first (i) frame.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: Transform2,
    /// Mean nearest-neighbor residual after convergence, meters.
    pub fitness: f64,
    /// Set when the geometry cannot pin the transform down (collinear point
    /// sets) or too few points support it.
    pub low_confidence: bool,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 50;
const CONVERGENCE_DELTA: f64 = 1e-6;
const MIN_POINTS_PER_SIDE: usize = 50;

/// Closed-form least-squares rigid alignment mapping `src` onto `dst`
/// (paired by index).
pub fn procrustes(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Transform2 {
    debug_assert_eq!(src.len(), dst.len());
    debug_assert!(!src.is_empty());
    let n = src.len() as f64;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        sx += s.0;
        sy += s.1;
        dx += d.0;
        dy += d.1;
    }
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);
    let mut dot = 0.0;
    let mut cross = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (px, py) = (s.0 - sx, s.1 - sy);
        let (qx, qy) = (d.0 - dx, d.1 - dy);
        dot += qx * px + qy * py;
        cross += qy * px - qx * py;
    }
    let rotation = cross.atan2(dot);
    let (sin, cos) = rotation.sin_cos();
    Transform2::new(
        rotation,
        (dx - (cos * sx - sin * sy), dy - (sin * sx + cos * sy)),
    )
}

/// Uniform-grid nearest-neighbor index over a fixed point set.
struct GridIndex {
    cell: f64,
    points: Vec<(f64, f64)>,
    buckets: HashMap<(i32, i32), Vec<u32>>,
}

impl GridIndex {
    fn build(points: Vec<(f64, f64)>, cell: f64) -> Self {
        let mut buckets: HashMap<(i32, i32), Vec<u32>> = HashMap::new();
        for (idx, p) in points.iter().enumerate() {
            let key = ((p.0 / cell).floor() as i32, (p.1 / cell).floor() as i32);
            buckets.entry(key).or_default().push(idx as u32);
        }
        GridIndex {
            cell,
            points,
            buckets,
        }
    }

    fn nearest(&self, q: (f64, f64)) -> (usize, f64) {
        let qb = ((q.0 / self.cell).floor() as i32, (q.1 / self.cell).floor() as i32);
        let mut best = (usize::MAX, f64::INFINITY);
        let mut ring = 0i32;
        loop {
            // Once the closest possible point in this ring is farther than
            // the best hit, stop.
            let ring_floor = (ring - 1).max(0) as f64 * self.cell;
            if best.1 <= ring_floor {
                break;
            }
            let mut any_bucket = false;
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs().max(dy.abs()) != ring {
                        continue;
                    }
                    if let Some(bucket) = self.buckets.get(&(qb.0 + dx, qb.1 + dy)) {
                        any_bucket = true;
                        for &idx in bucket {
                            let p = self.points[idx as usize];
                            let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
                            if d < best.1 {
                                best = (idx as usize, d);
                            }
                        }
                    }
                }
            }
            ring += 1;
            // Guard against querying far outside the indexed region.
            if !any_bucket && ring > 4096 {
                break;
            }
        }
        best
    }
}

fn collinear(points: &[(f64, f64)]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let n = points.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in points {
        mx += p.0;
        my += p.1;
    }
    let (mx, my) = (mx / n, my / n);
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for p in points {
        let (x, y) = (p.0 - mx, p.1 - my);
        cxx += x * x;
        cxy += x * y;
        cyy += y * y;
    }
    let tr = cxx + cyy;
    let det = cxx * cyy - cxy * cxy;
    let lambda_min = (tr - (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0 / n;
    lambda_min.max(0.0).sqrt() <= 1e-6
}

/// Estimate the transform mapping segment `j`'s frame into segment `i`'s
/// frame from a matched sequence, refined by point-to-point ICP over the
/// matched keyframes' scan endpoints.
pub fn estimate_transform(
    seq: &MatchedSequence,
    seg_i: &Segment,
    seg_j: &Segment,
) -> Result<IcpResult, MergeError> {
    let mut anchors_i = Vec::with_capacity(seq.pairs.len());
    let mut anchors_j = Vec::with_capacity(seq.pairs.len());
    let mut points_i = Vec::new();
    let mut points_j = Vec::new();
    for &(a, b) in &seq.pairs {
        let ki = &seg_i.keyframes[a];
        let kj = &seg_j.keyframes[b];
        anchors_i.push((ki.pose_local.x, ki.pose_local.y));
        anchors_j.push((kj.pose_local.x, kj.pose_local.y));
        points_i.extend_from_slice(&ki.points);
        points_j.extend_from_slice(&kj.points);
    }
    if points_i.is_empty() || points_j.is_empty() {
        return Err(MergeError::EmptyPointSets);
    }
    let low_confidence = points_i.len() < MIN_POINTS_PER_SIDE
        || points_j.len() < MIN_POINTS_PER_SIDE
        || collinear(&points_i)
        || collinear(&points_j);

    // Initialization: align matched keyframe positions.
    let mut transform = procrustes(&anchors_j, &anchors_i);

    let index = GridIndex::build(points_i, 0.5);
    let mut fitness = f64::INFINITY;
    let mut iterations = 0;
    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        let mut matched_dst = Vec::with_capacity(points_j.len());
        let mut residual = 0.0;
        for p in &points_j {
            let tp = transform.apply_point(*p);
            let (idx, d) = index.nearest(tp);
            matched_dst.push(index.points[idx]);
            residual += d;
        }
        residual /= points_j.len() as f64;
        let next = procrustes(&points_j, &matched_dst);
        let done = (fitness - residual).abs() < CONVERGENCE_DELTA;
        fitness = residual;
        transform = next;
        if done {
            break;
        }
    }

    Ok(IcpResult {
        transform,
        fitness,
        low_confidence,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{AgentId, Descriptor, Keyframe};
    use crate::world::Pose2;

    fn keyframe(index: usize, pose: Pose2, points: Vec<(f64, f64)>) -> Keyframe {
        Keyframe {
            index,
            pose_local: pose,
            descriptor: Descriptor { bins: vec![1.0] },
            points,
            odometric_distance: index as f64,
        }
    }

    /// An L-shaped point cloud around (cx, cy); rich enough geometry to pin
    /// rotation and translation.
    fn l_shape(cx: f64, cy: f64) -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for k in 0..40 {
            pts.push((cx + 0.1 * k as f64, cy));
            pts.push((cx, cy + 0.1 * k as f64));
        }
        pts
    }

    fn make_pair(true_t: &Transform2, noise: Option<(f64, u64)>) -> (Segment, Segment, MatchedSequence) {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut seg_i = Segment::new(AgentId(0));
        let mut seg_j = Segment::new(AgentId(1));
        let inv = true_t.invert();
        let mut pairs = Vec::new();
        for k in 0..4 {
            let center = (2.0 * k as f64, 1.5 * (k % 2) as f64);
            let pts_i = l_shape(center.0, center.1);
            let mut pts_j: Vec<(f64, f64)> = pts_i.iter().map(|p| inv.apply_point(*p)).collect();
            if let Some((sigma, seed)) = noise {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed * 1000 + k as u64);
                let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
                for p in pts_j.iter_mut() {
                    p.0 += normal.sample(&mut rng);
                    p.1 += normal.sample(&mut rng);
                }
            }
            let pose_i = Pose2::new(center.0, center.1, 0.0);
            let pose_j = inv.apply_pose(&pose_i);
            seg_i.keyframes.push(keyframe(k, pose_i, pts_i));
            seg_j.keyframes.push(keyframe(k, pose_j, pts_j));
            pairs.push((k, k));
        }
        let seq = MatchedSequence {
            i: AgentId(0),
            j: AgentId(1),
            pairs,
            overlap_len: 4,
            mean_residual: 0.0,
        };
        (seg_i, seg_j, seq)
    }

    #[test]
    fn exact_recovery_without_noise() {
        let true_t = Transform2::new(0.6, (3.0, -2.0));
        let (seg_i, seg_j, seq) = make_pair(&true_t, None);
        let result = estimate_transform(&seq, &seg_i, &seg_j).unwrap();
        let err = result.transform.compose(&true_t.invert());
        assert!(err.rotation.abs() < 1e-6);
        assert!(err.translation.0.abs() < 1e-6);
        assert!(err.translation.1.abs() < 1e-6);
        assert!(!result.low_confidence);
        assert!(result.fitness < 1e-9);
    }

    #[test]
    fn noisy_recovery_within_tolerance() {
        let true_t = Transform2::new(-0.4, (1.0, 2.5));
        let (seg_i, seg_j, seq) = make_pair(&true_t, Some((0.02, 7)));
        let result = estimate_transform(&seq, &seg_i, &seg_j).unwrap();
        let err = result.transform.compose(&true_t.invert());
        assert!(err.rotation.abs() < 2.0_f64.to_radians());
        assert!(err.translation.0.hypot(err.translation.1) < 0.1);
    }

    #[test]
    fn collinear_points_flag_low_confidence() {
        let mut seg_i = Segment::new(AgentId(0));
        let mut seg_j = Segment::new(AgentId(1));
        let line: Vec<(f64, f64)> = (0..60).map(|k| (0.1 * k as f64, 2.0)).collect();
        seg_i
            .keyframes
            .push(keyframe(0, Pose2::new(0.0, 0.0, 0.0), line.clone()));
        seg_j
            .keyframes
            .push(keyframe(0, Pose2::new(0.0, 0.0, 0.0), line));
        let seq = MatchedSequence {
            i: AgentId(0),
            j: AgentId(1),
            pairs: vec![(0, 0)],
            overlap_len: 1,
            mean_residual: 0.0,
        };
        let result = estimate_transform(&seq, &seg_i, &seg_j).unwrap();
        assert!(result.low_confidence);
    }

    #[test]
    fn empty_points_refused() {
        let mut seg_i = Segment::new(AgentId(0));
        let mut seg_j = Segment::new(AgentId(1));
        seg_i
            .keyframes
            .push(keyframe(0, Pose2::new(0.0, 0.0, 0.0), Vec::new()));
        seg_j
            .keyframes
            .push(keyframe(0, Pose2::new(0.0, 0.0, 0.0), Vec::new()));
        let seq = MatchedSequence {
            i: AgentId(0),
            j: AgentId(1),
            pairs: vec![(0, 0)],
            overlap_len: 1,
            mean_residual: 0.0,
        };
        assert!(matches!(
            estimate_transform(&seq, &seg_i, &seg_j),
            Err(MergeError::EmptyPointSets)
        ));
    }
}
