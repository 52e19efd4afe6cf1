//! Task registry: episode generation distributions, reward functions, and
//! termination rules for the exploration phase and the six task families.

use super::cluster::davies_bouldin;
use super::{EnvError, Shape, SpriteState};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Narrow hue windows: red, blue, green, purple, yellow.
pub const COLOR_HUES: [(f64, f64); 5] = [
    (0.9, 1.0),
    (0.55, 0.65),
    (0.27, 0.37),
    (0.73, 0.83),
    (0.12, 0.22),
];
/// Sorting goal locations, aligned with `COLOR_HUES`.
pub const COLOR_GOALS: [(f64, f64); 5] = [
    (0.75, 0.75),
    (0.75, 0.25),
    (0.25, 0.75),
    (0.25, 0.25),
    (0.5, 0.5),
];
pub const COLOR_NAMES: [&str; 5] = ["red", "blue", "green", "purple", "yellow"];
const RED: usize = 0;
const BLUE: usize = 1;
const GREEN: usize = 2;
const PURPLE: usize = 3;
const YELLOW: usize = 4;

/// A target counts as "at the goal" within this distance (frame widths).
pub const SUCCESS_DISTANCE: f64 = 0.075;
/// Farthest possible target-goal distance under the shaped-reward
/// normalization (corner to center).
pub const MAX_GOAL_DISTANCE: f64 = std::f64::consts::SQRT_2 / 2.0;
/// Success threshold on the inverse Davies-Bouldin clustering reward.
pub const CLUSTERING_SUCCESS: f64 = 2.5;
/// Bonus granted on sorting/clustering success.
pub const SUCCESS_BONUS: f64 = 1.0;
/// Cap on the inverse-DB reward so rewards stay finite and trainable.
const CLUSTERING_REWARD_CAP: f64 = 100.0;
const GOAL_CENTER: (f64, f64) = (0.5, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Robustness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Exploration,
    GoalShape,
    GoalPosition,
    GoalNumTargets,
    GoalNumDistractors,
    Sorting,
    Clustering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub split: Split,
    /// Goal-finding only: reward 1 on success, 0 otherwise.
    pub sparse: bool,
}

impl TaskSpec {
    pub fn by_name(name: &str, split: Split, sparse: bool) -> Result<TaskSpec, EnvError> {
        let kind = match name {
            "exploration" => TaskKind::Exploration,
            "goal_finding.shape" => TaskKind::GoalShape,
            "goal_finding.position" => TaskKind::GoalPosition,
            "goal_finding.num_targets" => TaskKind::GoalNumTargets,
            "goal_finding.num_distractors" => TaskKind::GoalNumDistractors,
            "sorting" => TaskKind::Sorting,
            "clustering" => TaskKind::Clustering,
            other => return Err(EnvError::UnknownTask(other.to_string())),
        };
        Ok(TaskSpec { kind, split, sparse })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::Exploration => "exploration",
            TaskKind::GoalShape => "goal_finding.shape",
            TaskKind::GoalPosition => "goal_finding.position",
            TaskKind::GoalNumTargets => "goal_finding.num_targets",
            TaskKind::GoalNumDistractors => "goal_finding.num_distractors",
            TaskKind::Sorting => "sorting",
            TaskKind::Clustering => "clustering",
        }
    }

    pub const ALL_TASK_NAMES: [&'static str; 6] = [
        "goal_finding.shape",
        "goal_finding.position",
        "goal_finding.num_targets",
        "goal_finding.num_distractors",
        "sorting",
        "clustering",
    ];

    pub fn max_episode_length(&self) -> usize {
        match self.kind {
            TaskKind::Exploration => 10,
            TaskKind::GoalShape
            | TaskKind::GoalPosition
            | TaskKind::GoalNumTargets
            | TaskKind::GoalNumDistractors => 20,
            TaskKind::Sorting | TaskKind::Clustering => 50,
        }
    }

    /// Sample an initial sprite list for one episode.
    pub fn generate_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<SpriteState> {
        match self.kind {
            TaskKind::Exploration => {
                let n = rng.random_range(1..=6);
                (0..n)
                    .map(|z| {
                        sprite(
                            rng.random::<f64>(),
                            rng.random::<f64>(),
                            random_shape(rng),
                            rng.random::<f64>(),
                            rng.random_range(0.3..1.0),
                            z,
                        )
                    })
                    .collect()
            }
            TaskKind::GoalShape => {
                let shape = match self.split {
                    Split::Train => Shape::Square,
                    Split::Robustness => {
                        if rng.random::<bool>() {
                            Shape::Circle
                        } else {
                            Shape::Triangle
                        }
                    }
                };
                vec![sprite(
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    shape,
                    rng.random_range(0.0..0.4),
                    rng.random_range(0.3..1.0),
                    0,
                )]
            }
            TaskKind::GoalPosition => {
                // Lower-right quadrant means x,y both in [0.5, 1] with the
                // top-left origin, y-down convention.
                let (tx, ty) = match self.split {
                    Split::Train => loop {
                        let (x, y) = (rng.random::<f64>(), rng.random::<f64>());
                        if !(x >= 0.5 && y >= 0.5) {
                            break (x, y);
                        }
                    },
                    Split::Robustness => {
                        (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0))
                    }
                };
                vec![
                    sprite(
                        tx,
                        ty,
                        random_shape(rng),
                        rng.random_range(0.0..0.4),
                        rng.random_range(0.3..1.0),
                        0,
                    ),
                    sprite(
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        random_shape(rng),
                        rng.random_range(0.5..0.9),
                        rng.random_range(0.3..1.0),
                        1,
                    ),
                ]
            }
            TaskKind::GoalNumTargets | TaskKind::GoalNumDistractors => {
                let (n_targets, n_distractors) = match (self.kind, self.split) {
                    (TaskKind::GoalNumTargets, Split::Train) => (1, 2),
                    (TaskKind::GoalNumTargets, Split::Robustness) => (2, 2),
                    (TaskKind::GoalNumDistractors, Split::Train) => (2, 1),
                    _ => (2, 2),
                };
                let mut sprites = Vec::new();
                for _ in 0..n_targets {
                    let z = sprites.len() as i32;
                    sprites.push(sprite(
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        Shape::Square,
                        rng.random_range(0.0..0.5),
                        rng.random_range(0.3..1.0),
                        z,
                    ));
                }
                for _ in 0..n_distractors {
                    let z = sprites.len() as i32;
                    let shape = if rng.random::<bool>() {
                        Shape::Circle
                    } else {
                        Shape::Triangle
                    };
                    sprites.push(sprite(
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        shape,
                        rng.random_range(0.0..0.5),
                        rng.random_range(0.3..1.0),
                        z,
                    ));
                }
                sprites
            }
            TaskKind::Sorting => {
                let (a, b) = match self.split {
                    Split::Robustness => (RED, BLUE),
                    Split::Train => loop {
                        let a = rng.random_range(0..5);
                        let b = rng.random_range(0..5);
                        if a == b {
                            continue;
                        }
                        let pair = (a.min(b), a.max(b));
                        if pair != (RED, BLUE) {
                            break (a, b);
                        }
                    },
                };
                [a, b]
                    .iter()
                    .enumerate()
                    .map(|(z, &color)| {
                        sprite(
                            rng.random::<f64>(),
                            rng.random::<f64>(),
                            random_shape(rng),
                            sample_hue(rng, color),
                            rng.random_range(0.3..1.0),
                            z as i32,
                        )
                    })
                    .collect()
            }
            TaskKind::Clustering => {
                let (a, b) = match self.split {
                    Split::Train => (BLUE, GREEN),
                    Split::Robustness => (PURPLE, YELLOW),
                };
                let mut sprites = Vec::new();
                for &color in &[a, a, b, b] {
                    let z = sprites.len() as i32;
                    sprites.push(sprite(
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        random_shape(rng),
                        sample_hue(rng, color),
                        rng.random_range(0.3..1.0),
                        z,
                    ));
                }
                sprites
            }
        }
    }

    /// Indices of the sprites whose positions the reward depends on.
    pub fn target_indices(&self, sprites: &[SpriteState]) -> Vec<usize> {
        match self.kind {
            TaskKind::GoalShape => (0..sprites.len()).collect(),
            TaskKind::GoalPosition => (0..sprites.len())
                .filter(|&i| sprites[i].hue <= 0.45)
                .collect(),
            TaskKind::GoalNumTargets | TaskKind::GoalNumDistractors => (0..sprites.len())
                .filter(|&i| sprites[i].shape == Shape::Square)
                .collect(),
            _ => (0..sprites.len()).collect(),
        }
    }

    /// Reward and success for the current state.
    pub fn reward(&self, sprites: &[SpriteState]) -> (f64, bool) {
        match self.kind {
            TaskKind::Exploration => (0.0, false),
            TaskKind::GoalShape
            | TaskKind::GoalPosition
            | TaskKind::GoalNumTargets
            | TaskKind::GoalNumDistractors => {
                let targets = self.target_indices(sprites);
                let mut total = 0.0;
                let mut success = !targets.is_empty();
                for &i in &targets {
                    let d = dist((sprites[i].x, sprites[i].y), GOAL_CENTER);
                    total += (1.0 - d / MAX_GOAL_DISTANCE).clamp(0.0, 1.0);
                    success &= d <= SUCCESS_DISTANCE;
                }
                if self.sparse {
                    (if success { 1.0 } else { 0.0 }, success)
                } else {
                    (total, success)
                }
            }
            TaskKind::Sorting => {
                let mut total = 0.0;
                let mut success = true;
                for sp in sprites {
                    let color = color_of_hue(sp.hue).expect("sorting sprite hue in a window");
                    let d = dist((sp.x, sp.y), COLOR_GOALS[color]);
                    total += (1.0 - d / MAX_GOAL_DISTANCE).clamp(0.0, 1.0);
                    success &= d <= SUCCESS_DISTANCE;
                }
                if success {
                    total += SUCCESS_BONUS;
                }
                (total, success)
            }
            TaskKind::Clustering => {
                let points: Vec<(f64, f64)> = sprites.iter().map(|s| (s.x, s.y)).collect();
                let labels: Vec<usize> = sprites
                    .iter()
                    .map(|s| color_of_hue(s.hue).expect("clustering sprite hue in a window"))
                    .collect();
                let db = davies_bouldin(&points, &labels, 5);
                let inv = (1.0 / db).min(CLUSTERING_REWARD_CAP);
                let success = inv > CLUSTERING_SUCCESS;
                (if success { inv + SUCCESS_BONUS } else { inv }, success)
            }
        }
    }
}

fn sprite(x: f64, y: f64, shape: Shape, hue: f64, saturation: f64, z: i32) -> SpriteState {
    SpriteState {
        x,
        y,
        shape,
        hue,
        saturation,
        value: 1.0,
        z_layer: z,
    }
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R) -> Shape {
    Shape::ALL[rng.random_range(0..3)]
}

fn sample_hue<R: Rng + ?Sized>(rng: &mut R, color: usize) -> f64 {
    let (lo, hi) = COLOR_HUES[color];
    rng.random_range(lo..hi)
}

/// Which named color window a hue belongs to, if any.
pub fn color_of_hue(hue: f64) -> Option<usize> {
    COLOR_HUES
        .iter()
        .position(|&(lo, hi)| hue >= lo && hue <= hi)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}
