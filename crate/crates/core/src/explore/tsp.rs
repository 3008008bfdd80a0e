//! Open-path traveling-salesman routines over a small cost matrix.
//!
//! Node 0 is the fixed start (the agent); nodes `1..n` are targets. Routes
//! are open: the agent does not return to the start.

/// Nearest-neighbor construction followed by 2-opt and or-opt descent.
///
/// On small instances the search restarts from every possible first target
/// and keeps the best result. Deterministic: ties prefer the lower index and
/// the first improving move is taken.
pub fn nn_two_opt_open(dist: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = dist.len();
    if n <= 1 {
        return (Vec::new(), 0.0);
    }
    const MULTISTART_MAX: usize = 13;
    let firsts: Vec<Option<usize>> = if n <= MULTISTART_MAX {
        std::iter::once(None).chain((1..n).map(Some)).collect()
    } else {
        vec![None]
    };
    let mut best: Option<(Vec<usize>, f64)> = None;
    for first in firsts {
        let mut order = nn_order(dist, first);
        loop {
            two_opt_open(&mut order, dist);
            if !or_opt_open(&mut order, dist) {
                break;
            }
        }
        let len = open_path_length(&order, dist);
        if best.as_ref().is_none_or(|(_, b)| len + 1e-12 < *b) {
            best = Some((order, len));
        }
    }
    best.unwrap()
}

/// Greedy nearest-neighbor order, optionally forcing the first target.
fn nn_order(dist: &[Vec<f64>], first: Option<usize>) -> Vec<usize> {
    let n = dist.len();
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    let mut visited = vec![false; n];
    visited[0] = true;
    let mut cur = 0usize;
    if let Some(f) = first {
        visited[f] = true;
        order.push(f);
        cur = f;
    }
    while order.len() < n - 1 {
        let mut best = (usize::MAX, f64::INFINITY);
        for cand in 1..n {
            if !visited[cand] && dist[cur][cand] < best.1 {
                best = (cand, dist[cur][cand]);
            }
        }
        visited[best.0] = true;
        order.push(best.0);
        cur = best.0;
    }
    order
}

/// One pass of or-opt: relocate segments of 1..=3 consecutive nodes to a
/// better position. Returns whether anything improved.
fn or_opt_open(order: &mut Vec<usize>, dist: &[Vec<f64>]) -> bool {
    let m = order.len();
    if m < 2 {
        return false;
    }
    let mut improved_any = false;
    let mut improved = true;
    while improved {
        improved = false;
        'moves: for seg_len in 1..=3usize.min(m - 1) {
            for i in 0..=(m - seg_len) {
                let base = open_path_length(order, dist);
                let seg: Vec<usize> = order[i..i + seg_len].to_vec();
                let mut rest: Vec<usize> = Vec::with_capacity(m - seg_len);
                rest.extend_from_slice(&order[..i]);
                rest.extend_from_slice(&order[i + seg_len..]);
                for at in 0..=rest.len() {
                    if at == i {
                        continue;
                    }
                    let mut candidate = rest.clone();
                    for (off, &node) in seg.iter().enumerate() {
                        candidate.insert(at + off, node);
                    }
                    if open_path_length(&candidate, dist) + 1e-12 < base {
                        *order = candidate;
                        improved = true;
                        improved_any = true;
                        continue 'moves;
                    }
                }
            }
        }
    }
    improved_any
}

/// In-place 2-opt descent for an open path starting at node 0.
pub fn two_opt_open(order: &mut Vec<usize>, dist: &[Vec<f64>]) {
    let m = order.len();
    if m < 2 {
        return;
    }
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..m - 1 {
            for j in i + 1..m {
                // Reversing order[i..=j] replaces edge (prev, order[i]) with
                // (prev, order[j]) and, unless j is the tail, edge
                // (order[j], next) with (order[i], next).
                let prev = if i == 0 { 0 } else { order[i - 1] };
                let before = dist[prev][order[i]]
                    + if j + 1 < m {
                        dist[order[j]][order[j + 1]]
                    } else {
                        0.0
                    };
                let after = dist[prev][order[j]]
                    + if j + 1 < m {
                        dist[order[i]][order[j + 1]]
                    } else {
                        0.0
                    };
                if after + 1e-12 < before {
                    order[i..=j].reverse();
                    improved = true;
                }
            }
        }
    }
}

pub fn open_path_length(order: &[usize], dist: &[Vec<f64>]) -> f64 {
    let mut len = 0.0;
    let mut cur = 0usize;
    for &next in order {
        len += dist[cur][next];
        cur = next;
    }
    len
}

/// Exact open-path TSP by Held-Karp dynamic programming. Exponential in the
/// target count; refuse more than `max_targets`.
pub fn held_karp_open(dist: &[Vec<f64>], max_targets: usize) -> Option<(Vec<usize>, f64)> {
    let n = dist.len();
    let m = n - 1;
    if m > max_targets {
        return None;
    }
    if m == 0 {
        return Some((Vec::new(), 0.0));
    }
    let full = 1usize << m;
    // dp[mask][k]: best cost starting at node 0, visiting exactly the
    // targets in `mask`, ending at target k (0-based target index).
    let mut dp = vec![vec![f64::INFINITY; m]; full];
    let mut parent = vec![vec![usize::MAX; m]; full];
    for k in 0..m {
        dp[1 << k][k] = dist[0][k + 1];
    }
    for mask in 1..full {
        for k in 0..m {
            if mask & (1 << k) == 0 || !dp[mask][k].is_finite() {
                continue;
            }
            for next in 0..m {
                if mask & (1 << next) != 0 {
                    continue;
                }
                let nm = mask | (1 << next);
                let cost = dp[mask][k] + dist[k + 1][next + 1];
                if cost < dp[nm][next] {
                    dp[nm][next] = cost;
                    parent[nm][next] = k;
                }
            }
        }
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for k in 0..m {
        if dp[full - 1][k] < best.1 {
            best = (k, dp[full - 1][k]);
        }
    }
    if !best.1.is_finite() {
        return None;
    }
    let mut order = Vec::with_capacity(m);
    let mut mask = full - 1;
    let mut k = best.0;
    while k != usize::MAX {
        order.push(k + 1);
        let p = parent[mask][k];
        mask &= !(1 << k);
        k = p;
    }
    order.reverse();
    Some((order, best.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(points: &[(f64, f64)]) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|a| {
                points
                    .iter()
                    .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_target_is_direct() {
        let d = matrix(&[(0.0, 0.0), (3.0, 4.0)]);
        let (order, len) = nn_two_opt_open(&d);
        assert_eq!(order, vec![1]);
        assert!((len - 5.0).abs() < 1e-12);
    }

    #[test]
    fn square_corners_from_one_corner() {
        // Agent at one corner of a unit square, targets at the other three:
        // the optimal open tour walks the perimeter, length 3.
        let d = matrix(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let (_, len) = nn_two_opt_open(&d);
        assert!((len - 3.0).abs() < 1e-9);
        let (_, exact) = held_karp_open(&d, 8).unwrap();
        assert!((exact - 3.0).abs() < 1e-9);
    }

    #[test]
    fn two_opt_stays_within_5_percent_of_exact_on_random_instances() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let points: Vec<(f64, f64)> = (0..8)
                .map(|_| (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)))
                .collect();
            let d = matrix(&points);
            let (order, len) = nn_two_opt_open(&d);
            let (_, exact) = held_karp_open(&d, 8).unwrap();
            assert!(len <= exact * 1.05 + 1e-9, "len {len} exact {exact}");
            // 2-opt postcondition: no single move improves the result.
            let mut probe = order.clone();
            two_opt_open(&mut probe, &d);
            assert!((open_path_length(&probe, &d) - len).abs() < 1e-9);
        }
    }

    #[test]
    fn held_karp_respects_cap() {
        let points: Vec<(f64, f64)> = (0..12).map(|k| (k as f64, 0.0)).collect();
        let d = matrix(&points);
        assert!(held_karp_open(&d, 8).is_none());
    }
}
