//! Planar environment model: occupancy grid, rigid-body geometry, and the
//! simulated range sensor every other module consumes.
//!
//! The world is a bounded rectangle of square cells, each `Free` or
//! `Obstacle`. The *surface* is the set of free cells 4-adjacent to an
//! obstacle; covering the whole reachable surface is the exploration goal.

use std::f64::consts::PI;

use thiserror::Error;

/// Grid cell coordinates `(column, row)`. Column grows with +x, row with +y.
pub type GridCell = (i32, i32);

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("empty map document")]
    EmptyMap,
    #[error("ragged row at line {line}: expected width {expected}, got {got}")]
    RaggedRow {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("illegal character '{ch}' at line {line}, column {column}")]
    IllegalCharacter { ch: char, line: usize, column: usize },
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("raycast origin ({x:.3}, {y:.3}) is not in traversable space")]
    OriginNotTraversable { x: f64, y: f64 },
}

/// Normalize an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// A planar pose: position in meters, heading in radians in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// A planar rigid transform: rotation followed by translation.
///
/// `apply` maps points expressed in the source frame into the target frame;
/// `compose(a, b)` applies `b` first, then `a`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Transform2 {
    pub rotation: f64,
    pub translation: (f64, f64),
}

impl Transform2 {
    pub fn identity() -> Self {
        Transform2 {
            rotation: 0.0,
            translation: (0.0, 0.0),
        }
    }

    pub fn new(rotation: f64, translation: (f64, f64)) -> Self {
        Transform2 {
            rotation: normalize_angle(rotation),
            translation,
        }
    }

    /// The transform that maps the local frame anchored at `pose` into the
    /// frame `pose` is expressed in.
    pub fn from_pose(pose: &Pose2) -> Self {
        Transform2 {
            rotation: pose.theta,
            translation: (pose.x, pose.y),
        }
    }

    pub fn compose(&self, other: &Transform2) -> Transform2 {
        let (s, c) = self.rotation.sin_cos();
        Transform2 {
            rotation: normalize_angle(self.rotation + other.rotation),
            translation: (
                self.translation.0 + c * other.translation.0 - s * other.translation.1,
                self.translation.1 + s * other.translation.0 + c * other.translation.1,
            ),
        }
    }

    pub fn invert(&self) -> Transform2 {
        let (s, c) = self.rotation.sin_cos();
        Transform2 {
            rotation: normalize_angle(-self.rotation),
            translation: (
                -(c * self.translation.0 + s * self.translation.1),
                -(-s * self.translation.0 + c * self.translation.1),
            ),
        }
    }

    pub fn apply_point(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (
            self.translation.0 + c * p.0 - s * p.1,
            self.translation.1 + s * p.0 + c * p.1,
        )
    }

    pub fn apply_pose(&self, pose: &Pose2) -> Pose2 {
        let (x, y) = self.apply_point((pose.x, pose.y));
        Pose2::new(x, y, pose.theta + self.rotation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Obstacle,
}

/// Bounded occupancy world loaded from an ASCII map.
///
/// Invariants: the border ring is always `Obstacle`, `resolution > 0`, and
/// the surface set contains exactly the free cells 4-adjacent to an obstacle.
#[derive(Debug, Clone)]
pub struct GridWorld {
    width: usize,
    height: usize,
    resolution: f64,
    cells: Vec<Cell>,
    surface: Vec<GridCell>,
}

/// Parse an ASCII map document into a world.
///
/// `'.'` is free space and `'#'` an obstacle; the border is forced to
/// obstacle after parsing so the world is bounded.
pub fn load_world(text: &str, resolution: f64) -> Result<GridWorld, WorldError> {
    if resolution <= 0.0 {
        return Err(WorldError::BadResolution(resolution));
    }
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.is_empty() {
        return Err(WorldError::EmptyMap);
    }
    let width = rows[0].chars().count();
    if width == 0 {
        return Err(WorldError::EmptyMap);
    }
    let height = rows.len();
    let mut cells = Vec::with_capacity(width * height);
    for (r, row) in rows.iter().enumerate() {
        let mut count = 0;
        for (c, ch) in row.chars().enumerate() {
            match ch {
                '.' => cells.push(Cell::Free),
                '#' => cells.push(Cell::Obstacle),
                other => {
                    return Err(WorldError::IllegalCharacter {
                        ch: other,
                        line: r + 1,
                        column: c + 1,
                    })
                }
            }
            count += 1;
        }
        if count != width {
            return Err(WorldError::RaggedRow {
                line: r + 1,
                expected: width,
                got: count,
            });
        }
    }
    // Bounded world: force the border ring to obstacle.
    for c in 0..width {
        cells[c] = Cell::Obstacle;
        cells[(height - 1) * width + c] = Cell::Obstacle;
    }
    for r in 0..height {
        cells[r * width] = Cell::Obstacle;
        cells[r * width + width - 1] = Cell::Obstacle;
    }
    let mut world = GridWorld {
        width,
        height,
        resolution,
        cells,
        surface: Vec::new(),
    };
    world.surface = world.derive_surface();
    Ok(world)
}

impl GridWorld {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// World extent in meters, (x, y).
    pub fn size_m(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        )
    }

    pub fn in_bounds(&self, cell: GridCell) -> bool {
        cell.0 >= 0 && cell.1 >= 0 && (cell.0 as usize) < self.width && (cell.1 as usize) < self.height
    }

    pub fn cell(&self, cell: GridCell) -> Cell {
        if !self.in_bounds(cell) {
            return Cell::Obstacle;
        }
        self.cells[cell.1 as usize * self.width + cell.0 as usize]
    }

    pub fn is_free(&self, cell: GridCell) -> bool {
        self.cell(cell) == Cell::Free
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

    /// Free cells 4-adjacent to at least one obstacle, sorted by (row, col).
    pub fn surface(&self) -> &[GridCell] {
        &self.surface
    }

    pub fn is_traversable(&self, point: (f64, f64)) -> bool {
        self.is_free(self.cell_of(point))
    }

    fn derive_surface(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for r in 0..self.height as i32 {
            for c in 0..self.width as i32 {
                if self.is_free((c, r)) && self.has_obstacle_neighbor((c, r)) {
                    out.push((c, r));
                }
            }
        }
        out
    }

    fn has_obstacle_neighbor(&self, cell: GridCell) -> bool {
        [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|d| self.cell((cell.0 + d.0, cell.1 + d.1)) == Cell::Obstacle)
    }

    /// Free cells reachable from `start` by 8-connected moves that never cut
    /// an obstacle corner. Used for the reachable-surface accounting.
    pub fn reachable_free(&self, start: GridCell) -> std::collections::BTreeSet<GridCell> {
        let mut seen = std::collections::BTreeSet::new();
        if !self.is_free(start) {
            return seen;
        }
        let mut queue = std::collections::VecDeque::new();
        seen.insert(start);
        queue.push_back(start);
        while let Some(cur) = queue.pop_front() {
            for dy in -1..=1i32 {
                for dx in -1..=1i32 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let next = (cur.0 + dx, cur.1 + dy);
                    if !self.is_free(next) || seen.contains(&next) {
                        continue;
                    }
                    if dx != 0 && dy != 0 {
                        // No diagonal moves through a blocked corner.
                        if !self.is_free((cur.0 + dx, cur.1)) || !self.is_free((cur.0, cur.1 + dy)) {
                            continue;
                        }
                    }
                    seen.insert(next);
                    queue.push_back(next);
                }
            }
        }
        seen
    }
}

/// A simulated 360-degree range scan. `ranges[k] == max_range` means no hit.
#[derive(Debug, Clone)]
pub struct Scan {
    pub beam_count: usize,
    pub max_range: f64,
    pub ranges: Vec<f64>,
    pub origin: Pose2,
}

impl Scan {
    /// Heading of beam `k` relative to the scan origin's own heading.
    pub fn beam_angle(&self, k: usize) -> f64 {
        2.0 * PI * k as f64 / self.beam_count as f64
    }
}

/// Cast `beam_count` evenly spaced rays from `pose` and return the distance
/// to the first obstacle cell along each, capped at `max_range`.
///
/// Uses exact grid traversal (DDA), so the result is deterministic.
pub fn raycast(
    world: &GridWorld,
    pose: &Pose2,
    beam_count: usize,
    max_range: f64,
) -> Result<Scan, WorldError> {
    if !world.is_traversable((pose.x, pose.y)) {
        return Err(WorldError::OriginNotTraversable { x: pose.x, y: pose.y });
    }
    let mut ranges = Vec::with_capacity(beam_count);
    for k in 0..beam_count {
        let angle = pose.theta + 2.0 * PI * k as f64 / beam_count as f64;
        ranges.push(cast_ray(world, (pose.x, pose.y), angle, max_range));
    }
    Ok(Scan {
        beam_count,
        max_range,
        ranges,
        origin: *pose,
    })
}

/// Distance from `origin` along `angle` to the first obstacle cell boundary,
/// capped at `max_range`.
pub fn cast_ray(world: &GridWorld, origin: (f64, f64), angle: f64, max_range: f64) -> f64 {
    let (dy, dx) = angle.sin_cos();
    let res = world.resolution;
    let (mut cx, mut cy) = world.cell_of(origin);

    let step_x: i32 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i32 = if dy > 0.0 { 1 } else { -1 };
    // Distance along the ray between successive vertical / horizontal cell
    // boundaries, and distance to the first one.
    let t_delta_x = if dx != 0.0 { (res / dx).abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { (res / dy).abs() } else { f64::INFINITY };
    let mut t_max_x = if dx != 0.0 {
        let next = if dx > 0.0 {
            (cx + 1) as f64 * res
        } else {
            cx as f64 * res
        };
        ((next - origin.0) / dx).abs()
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy != 0.0 {
        let next = if dy > 0.0 {
            (cy + 1) as f64 * res
        } else {
            cy as f64 * res
        };
        ((next - origin.1) / dy).abs()
    } else {
        f64::INFINITY
    };

    loop {
        let t = t_max_x.min(t_max_y);
        if t >= max_range {
            return max_range;
        }
        if t_max_x < t_max_y {
            cx += step_x;
            t_max_x += t_delta_x;
        } else {
            cy += step_y;
            t_max_y += t_delta_y;
        }
        if world.cell((cx, cy)) == Cell::Obstacle {
            return t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repeat_row(s: &str, n: usize) -> String {
        let mut out = String::new();
        for _ in 0..n {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    #[test]
    fn border_forcing_on_open_grid() {
        let world = load_world(&repeat_row("...", 3), 1.0).unwrap();
        let mut free = 0;
        let mut obstacle = 0;
        for r in 0..3 {
            for c in 0..3 {
                match world.cell((c, r)) {
                    Cell::Free => free += 1,
                    Cell::Obstacle => obstacle += 1,
                }
            }
        }
        assert_eq!(free, 1);
        assert_eq!(obstacle, 8);
        assert!(world.is_free((1, 1)));
    }

    #[test]
    fn illegal_character_names_position() {
        let err = load_world("...\n.%.\n...\n", 1.0).unwrap_err();
        match err {
            WorldError::IllegalCharacter { ch, line, column } => {
                assert_eq!(ch, '%');
                assert_eq!(line, 2);
                assert_eq!(column, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ragged_and_empty_maps_rejected() {
        assert!(matches!(
            load_world("...\n..\n...\n", 1.0),
            Err(WorldError::RaggedRow { line: 2, .. })
        ));
        assert!(matches!(load_world("\n\n", 1.0), Err(WorldError::EmptyMap)));
        assert!(matches!(
            load_world("...", 0.0),
            Err(WorldError::BadResolution(_))
        ));
    }

    #[test]
    fn surface_of_room_with_pillar() {
        // 10x10 room with a single interior pillar at (4, 4).
        let mut text = String::new();
        for r in 0..10 {
            for c in 0..10 {
                text.push(if r == 4 && c == 4 { '#' } else { '.' });
            }
            text.push('\n');
        }
        let world = load_world(&text, 1.0).unwrap();

        // Independent enumeration: free cells with a 4-adjacent obstacle.
        let mut expected = Vec::new();
        for r in 0..10i32 {
            for c in 0..10i32 {
                if world.cell((c, r)) != Cell::Free {
                    continue;
                }
                let adj = [(c + 1, r), (c - 1, r), (c, r + 1), (c, r - 1)]
                    .iter()
                    .any(|&n| world.cell(n) == Cell::Obstacle);
                if adj {
                    expected.push((c, r));
                }
            }
        }
        assert_eq!(world.surface(), expected.as_slice());

        // Inner border ring of an 8x8 interior = 28 cells, plus the pillar's
        // 4 neighbors.
        assert_eq!(world.surface().len(), 28 + 4);
        for n in [(3, 4), (5, 4), (4, 3), (4, 5)] {
            assert!(world.surface().contains(&n));
        }
    }

    #[test]
    fn transform_group_laws() {
        let t = Transform2::new(0.7, (1.5, -2.0));
        let id = Transform2::identity();
        let c = id.compose(&t);
        assert!((c.rotation - t.rotation).abs() < 1e-12);
        assert!((c.translation.0 - t.translation.0).abs() < 1e-12);

        let inv = t.compose(&t.invert());
        assert!(inv.rotation.abs() < 1e-9);
        assert!(inv.translation.0.abs() < 1e-9);
        assert!(inv.translation.1.abs() < 1e-9);
    }

    #[test]
    fn rotation_about_origin() {
        let rot = Transform2::new(std::f64::consts::FRAC_PI_2, (0.0, 0.0));
        let p = rot.apply_point((1.0, 0.0));
        assert!((p.0 - 0.0).abs() < 1e-12);
        assert!((p.1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raycast_open_room_hits_nothing_within_range() {
        let world = load_world(&repeat_row(&".".repeat(60), 60), 0.25).unwrap();
        let pose = Pose2::new(7.5, 7.5, 0.3);
        let scan = raycast(&world, &pose, 90, 5.0).unwrap();
        assert!(scan.ranges.iter().all(|&r| r == 5.0));
    }

    #[test]
    fn raycast_perpendicular_wall_distance() {
        // Free strip with a wall; agent 2 m from the wall face.
        let world = load_world(&repeat_row(&".".repeat(40), 20), 0.25).unwrap();
        // Wall at x = 9.75..10.0 is the right border (col 39). Use the border:
        // stand at x = 7.75 facing +x; wall face at x = 9.75.
        let pose = Pose2::new(7.75, 2.5, 0.0);
        let scan = raycast(&world, &pose, 4, 30.0).unwrap();
        assert!((scan.ranges[0] - 2.0).abs() <= 0.25 + 1e-9);
    }

    #[test]
    fn raycast_origin_in_obstacle_rejected() {
        let world = load_world(&repeat_row("....", 4), 1.0).unwrap();
        let pose = Pose2::new(0.5, 0.5, 0.0); // border cell
        assert!(matches!(
            raycast(&world, &pose, 8, 10.0),
            Err(WorldError::OriginNotTraversable { .. })
        ));
    }

    #[test]
    fn raycast_range_postcondition() {
        let mut text = String::new();
        for r in 0..24 {
            for c in 0..24 {
                let pillar = (8..=10).contains(&r) && (12..=14).contains(&c);
                text.push(if pillar { '#' } else { '.' });
            }
            text.push('\n');
        }
        let world = load_world(&text, 0.5).unwrap();
        let pose = Pose2::new(3.2, 5.7, 1.1);
        let scan = raycast(&world, &pose, 180, 8.0).unwrap();
        for (k, &r) in scan.ranges.iter().enumerate() {
            assert!(r > 0.0 && r <= 8.0);
            if r < 8.0 {
                // The cell just past the hit distance must be an obstacle.
                let a = pose.theta + scan.beam_angle(k);
                let eps = 1e-6;
                let p = (pose.x + (r + eps) * a.cos(), pose.y + (r + eps) * a.sin());
                assert_eq!(world.cell(world.cell_of(p)), Cell::Obstacle);
            }
        }
    }
}
