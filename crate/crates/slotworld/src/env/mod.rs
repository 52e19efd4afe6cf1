//! Click-and-push sprite environment: a unit square arena of colored shapes.
//!
//! Actions are points in `[0,1]^4`: a position click and a motion click. If
//! the position click lands inside a sprite, that sprite takes a small step
//! in the (centered) motion direction; otherwise nothing moves.

mod cluster;
mod render;
mod tasks;

pub use cluster::davies_bouldin;
pub use render::{hsv_to_rgb, render, Image, FRAME_SIZE, SUPERSAMPLE};
pub use tasks::{Split, TaskKind, TaskSpec, COLOR_GOALS, COLOR_HUES, COLOR_NAMES, SUCCESS_DISTANCE};

use crate::scalar::{c, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every sprite has the same area, in units of squared frame-width.
pub const SHAPE_AREA: f64 = 0.017;
/// Motion clicks are centered and scaled by this factor.
pub const MOTION_SCALE: f64 = 0.25;
/// Standard deviation of the optional per-coordinate motion noise.
pub const MOTION_NOISE_STD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown task name: {0}")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    /// Half side of the area-normalized square.
    pub fn square_half() -> f64 {
        SHAPE_AREA.sqrt() / 2.0
    }

    /// Radius of the area-normalized circle.
    pub fn circle_radius() -> f64 {
        (SHAPE_AREA / std::f64::consts::PI).sqrt()
    }

    /// Side length of the area-normalized equilateral triangle.
    pub fn triangle_side() -> f64 {
        (4.0 * SHAPE_AREA / 3f64.sqrt()).sqrt()
    }

    /// Polygon vertices in local coordinates (y grows downward, point-up
    /// triangle, axis-aligned square). Circle has no vertices.
    pub fn vertices(self) -> Vec<(f64, f64)> {
        match self {
            Shape::Square => {
                let h = Self::square_half();
                vec![(-h, -h), (h, -h), (h, h), (-h, h)]
            }
            Shape::Triangle => {
                let a = Self::triangle_side();
                let circum = a / 3f64.sqrt();
                let inr = a / (2.0 * 3f64.sqrt());
                vec![(0.0, -circum), (a / 2.0, inr), (-a / 2.0, inr)]
            }
            Shape::Circle => vec![],
        }
    }

    /// Exact containment test in local coordinates.
    pub fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Square => {
                let h = Self::square_half();
                dx.abs() <= h && dy.abs() <= h
            }
            Shape::Circle => {
                let r = Self::circle_radius();
                dx * dx + dy * dy <= r * r
            }
            Shape::Triangle => point_in_convex_polygon(&self.vertices(), dx, dy),
        }
    }

    /// Signed distance and its spatial gradient in local coordinates.
    /// Negative inside. The gradient is a unit vector almost everywhere.
    pub fn sdf_grad<S: Scalar>(self, dx: S, dy: S) -> (S, (S, S)) {
        match self {
            Shape::Circle => {
                let r: S = c(Self::circle_radius());
                let d = (dx * dx + dy * dy).sqrt();
                if d < c(1e-12) {
                    (-r, (S::zero(), S::zero()))
                } else {
                    (d - r, (dx / d, dy / d))
                }
            }
            Shape::Square | Shape::Triangle => {
                let verts: Vec<(S, S)> = self
                    .vertices()
                    .into_iter()
                    .map(|(x, y)| (c(x), c(y)))
                    .collect();
                polygon_sdf_grad(&verts, dx, dy)
            }
        }
    }
}

fn point_in_convex_polygon(verts: &[(f64, f64)], px: f64, py: f64) -> bool {
    let n = verts.len();
    let mut pos = false;
    let mut neg = false;
    for i in 0..n {
        let (x0, y0) = verts[i];
        let (x1, y1) = verts[(i + 1) % n];
        let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        if cross > 0.0 {
            pos = true;
        }
        if cross < 0.0 {
            neg = true;
        }
    }
    !(pos && neg)
}

/// Signed distance to a convex polygon with gradient. Negative inside.
fn polygon_sdf_grad<S: Scalar>(verts: &[(S, S)], px: S, py: S) -> (S, (S, S)) {
    let n = verts.len();
    let mut pos = false;
    let mut neg = false;
    let mut best = S::infinity();
    let mut nearest = (S::zero(), S::zero());
    for i in 0..n {
        let (x0, y0) = verts[i];
        let (x1, y1) = verts[(i + 1) % n];
        let (ex, ey) = (x1 - x0, y1 - y0);
        let cross = ex * (py - y0) - ey * (px - x0);
        if cross > S::zero() {
            pos = true;
        }
        if cross < S::zero() {
            neg = true;
        }
        // Nearest point on the segment.
        let len2 = ex * ex + ey * ey;
        let mut t = ((px - x0) * ex + (py - y0) * ey) / len2;
        t = t.max(S::zero()).min(S::one());
        let (qx, qy) = (x0 + ex * t, y0 + ey * t);
        let d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy);
        if d2 < best {
            best = d2;
            nearest = (qx, qy);
        }
    }
    let inside = !(pos && neg);
    let d = best.sqrt();
    if d < c(1e-12) {
        return (S::zero(), (S::zero(), S::zero()));
    }
    let sign = if inside { -S::one() } else { S::one() };
    let gx = sign * (px - nearest.0) / d;
    let gy = sign * (py - nearest.1) / d;
    (sign * d, (gx, gy))
}

/// Ground-truth description of one sprite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteState {
    pub x: f64,
    pub y: f64,
    pub shape: Shape,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub z_layer: i32,
}

impl SpriteState {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        self.shape.contains(px - self.x, py - self.y)
    }
}

/// A point in `[0,1]^4`: position click plus raw motion click.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub px: f64,
    pub py: f64,
    pub mx: f64,
    pub my: f64,
}

impl Action {
    pub fn new(px: f64, py: f64, mx: f64, my: f64) -> Self {
        Action { px, py, mx, my }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Action::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.px, self.py, self.mx, self.my]
    }

    /// Centered motion click, each component in [-0.5, 0.5].
    pub fn delta(self) -> (f64, f64) {
        (self.mx - 0.5, self.my - 0.5)
    }
}

/// Topmost sprite containing the point, by exact geometry.
pub fn hit_test(sprites: &[SpriteState], px: f64, py: f64) -> Option<usize> {
    sprites
        .iter()
        .enumerate()
        .filter(|(_, s)| s.contains(px, py))
        .max_by_key(|(i, s)| (s.z_layer, *i))
        .map(|(i, _)| i)
}

/// One motion update. Returns the new sprite list; at most one sprite moves.
pub fn step<R: Rng + ?Sized>(
    sprites: &[SpriteState],
    action: &Action,
    noise_enabled: bool,
    rng: &mut R,
) -> Vec<SpriteState> {
    let mut next = sprites.to_vec();
    if let Some(idx) = hit_test(sprites, action.px, action.py) {
        let (dx, dy) = action.delta();
        let (mut nx, mut ny) = (
            next[idx].x + MOTION_SCALE * dx,
            next[idx].y + MOTION_SCALE * dy,
        );
        if noise_enabled {
            let normal = Normal::new(0.0, MOTION_NOISE_STD).unwrap();
            nx += normal.sample(rng);
            ny += normal.sample(rng);
        }
        next[idx].x = nx.clamp(0.0, 1.0);
        next[idx].y = ny.clamp(0.0, 1.0);
    }
    next
}

/// Result of one environment step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Stateful episode driver around the pure environment functions.
#[derive(Debug, Clone)]
pub struct SpriteEnv {
    pub task: TaskSpec,
    pub sprites: Vec<SpriteState>,
    pub t: usize,
    pub noise_enabled: bool,
    pub done: bool,
    rng: ChaCha8Rng,
}

impl SpriteEnv {
    pub fn new(task: TaskSpec, noise_enabled: bool, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut env = SpriteEnv {
            task,
            sprites: Vec::new(),
            t: 0,
            noise_enabled,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset();
        env
    }

    /// Start a fresh episode. Regenerates if the initial state already
    /// satisfies the task's success criterion.
    pub fn reset(&mut self) -> &[SpriteState] {
        loop {
            self.sprites = self.task.generate_episode(&mut self.rng);
            self.t = 0;
            self.done = false;
            let (_, success) = self.task.reward(&self.sprites);
            if !success {
                break;
            }
        }
        &self.sprites
    }

    pub fn current_reward(&self) -> (f64, bool) {
        self.task.reward(&self.sprites)
    }

    pub fn step(&mut self, action: &Action) -> StepResult {
        debug_assert!(!self.done, "step on finished episode");
        self.sprites = step(&self.sprites, action, self.noise_enabled, &mut self.rng);
        self.t += 1;
        let (reward, success) = self.task.reward(&self.sprites);
        let done = success || self.t >= self.task.max_episode_length();
        self.done = done;
        StepResult {
            reward,
            done,
            success,
        }
    }
}

#[cfg(test)]
mod test {
    use super::*;
    use rand::SeedableRng;

    fn sprite(x: f64, y: f64, shape: Shape, z: i32) -> SpriteState {
        SpriteState {
            x,
            y,
            shape,
            hue: 0.0,
            saturation: 1.0,
            value: 1.0,
            z_layer: z,
        }
    }

    #[test]
    fn motion_update_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = vec![sprite(0.5, 0.5, Shape::Square, 0)];
        let next = step(&s, &Action::new(0.5, 0.5, 1.0, 1.0), false, &mut rng);
        assert!((next[0].x - 0.625).abs() < 1e-12);
        assert!((next[0].y - 0.625).abs() < 1e-12);
    }

    #[test]
    fn centered_motion_click_is_a_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = vec![sprite(0.3, 0.7, Shape::Circle, 0)];
        let next = step(&s, &Action::new(0.3, 0.7, 0.5, 0.5), false, &mut rng);
        assert_eq!(next[0].x, 0.3);
        assert_eq!(next[0].y, 0.7);
    }

    #[test]
    fn positions_are_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = vec![sprite(0.99, 0.5, Shape::Square, 0)];
        let next = step(&s, &Action::new(0.99, 0.5, 1.0, 0.5), false, &mut rng);
        assert!((next[0].x - 1.0).abs() < 1e-12);
        assert!((next[0].y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn miss_is_a_noop_and_empty_scene_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = vec![sprite(0.5, 0.5, Shape::Square, 0)];
        let next = step(&s, &Action::new(0.05, 0.05, 1.0, 1.0), false, &mut rng);
        assert_eq!(next, s);
        let empty: Vec<SpriteState> = vec![];
        let next = step(&empty, &Action::new(0.5, 0.5, 0.9, 0.1), false, &mut rng);
        assert!(next.is_empty());
    }

    #[test]
    fn hit_test_square_geometry() {
        let s = vec![sprite(0.5, 0.5, Shape::Square, 0)];
        // half-side ~= 0.0652
        assert_eq!(hit_test(&s, 0.55, 0.55), Some(0));
        assert_eq!(hit_test(&s, 0.0, 0.0), None);
    }

    #[test]
    fn hit_test_prefers_higher_z_layer() {
        let s = vec![
            sprite(0.5, 0.5, Shape::Square, 0),
            sprite(0.52, 0.52, Shape::Circle, 1),
        ];
        // Point in the overlap region.
        assert_eq!(hit_test(&s, 0.51, 0.51), Some(1));
    }

    #[test]
    fn hit_test_matches_brute_force_oracle() {
        // Brute-force z-sorted containment check at random points.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        for _ in 0..200 {
            let sprites: Vec<SpriteState> = (0..4)
                .map(|z| {
                    SpriteState {
                        x: rng.random::<f64>(),
                        y: rng.random::<f64>(),
                        shape: Shape::ALL[rng.random_range(0..3)],
                        hue: rng.random::<f64>(),
                        saturation: 1.0,
                        value: 1.0,
                        z_layer: z,
                    }
                })
                .collect();
            let (px, py) = (rng.random::<f64>(), rng.random::<f64>());
            let mut oracle = None;
            let mut order: Vec<usize> = (0..sprites.len()).collect();
            order.sort_by_key(|&i| sprites[i].z_layer);
            for &i in &order {
                if sprites[i].contains(px, py) {
                    oracle = Some(i);
                }
            }
            assert_eq!(hit_test(&sprites, px, py), oracle);
        }
    }

    #[test]
    fn step_displacement_bound() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let s = vec![sprite(
                rng.random::<f64>(),
                rng.random::<f64>(),
                Shape::Circle,
                0,
            )];
            let a = Action::new(s[0].x, s[0].y, rng.random::<f64>(), rng.random::<f64>());
            let next = step(&s, &a, false, &mut rng);
            let (dx, dy) = a.delta();
            let moved = ((next[0].x - s[0].x).powi(2) + (next[0].y - s[0].y).powi(2)).sqrt();
            let expect = (0.25 * dx.hypot(dy)).min(moved + 1.0);
            // With noise off and no clipping, displacement is exactly 0.25|delta|.
            if next[0].x > 0.0 && next[0].x < 1.0 && next[0].y > 0.0 && next[0].y < 1.0 {
                assert!((moved - 0.25 * dx.hypot(dy)).abs() < 1e-12);
            }
            assert!(moved <= expect + 1e-12);
            assert!(moved <= 0.125 * 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn same_seed_same_noisy_trajectory() {
        let task = TaskSpec::by_name("exploration", Split::Train, false).unwrap();
        let mut a = SpriteEnv::new(task.clone(), true, 42);
        let mut b = SpriteEnv::new(task, true, 42);
        for i in 0..30 {
            if a.done {
                a.reset();
                b.reset();
            }
            let act = Action::new(
                (i as f64 * 0.37) % 1.0,
                (i as f64 * 0.61) % 1.0,
                0.9,
                0.1,
            );
            let ra = a.step(&act);
            let rb = b.step(&act);
            assert_eq!(a.sprites, b.sprites);
            assert_eq!(ra.reward, rb.reward);
        }
    }

    #[test]
    fn sdf_sign_agrees_with_containment() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in Shape::ALL {
            for _ in 0..500 {
                let dx = rng.random::<f64>() * 0.4 - 0.2;
                let dy = rng.random::<f64>() * 0.4 - 0.2;
                let (d, _) = shape.sdf_grad::<f64>(dx, dy);
                if d.abs() > 1e-9 {
                    assert_eq!(d < 0.0, shape.contains(dx, dy), "{shape:?} {dx} {dy}");
                }
            }
        }
    }
}
