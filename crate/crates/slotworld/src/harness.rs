//! Experiment orchestration: configuration files, the two-phase pipeline,
//! evaluation metrics, and artifact export (checkpoints, CSVs, JSON-lines,
//! PNG frames, GIFs).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::agent::{
    self, task_phase, ActionSampler, EpisodeRecord,
    RelationNet, TaskConfig,
};
use crate::env::{
    render, Action, Split, SpriteEnv, SpriteState, TaskSpec, FRAME_SIZE, MOTION_SCALE,
};
use crate::explorer::{exploration_phase, ExplorationConfig};
use crate::grad::{Mlp, NetCheckpoint};
use crate::scalar::Scalar;
use crate::transition;
use crate::vision::{encode_oracle, SceneSlots};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fig 5B sustained-performance window: mean success over 30 consecutive
/// episodes must stay at or above 0.9.
pub const SUSTAIN_WINDOW: usize = 30;
pub const SUSTAIN_THRESHOLD: f64 = 0.9;

/// Build identifier stamped on every metric row.
pub fn build_id() -> &'static str {
    option_env!("SLOTWORLD_BUILD_ID").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::grad::CheckpointError),
    #[error("training: {0}")]
    Training(#[from] crate::grad::GradError),
    #[error("environment: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("missing checkpoint {0:?}; run the exploration phase first")]
    MissingCheckpoint(PathBuf),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

/// One run's full configuration: seeding, both phases, and mode flags.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub exploration: ExplorationConfig,
    pub task: TaskConfig,
    pub task_name: String,
    pub split: Split,
    pub sparse: bool,
    pub eval_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            exploration: ExplorationConfig::default(),
            task: TaskConfig::default(),
            task_name: "goal_finding.shape".to_string(),
            split: Split::Train,
            sparse: false,
            eval_episodes: 100,
        }
    }
}

impl ExperimentConfig {
    /// Propagates the master seed into both phase configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.exploration.seed = seed;
        self.task.seed = seed.wrapping_add(0x5eed);
        self
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Final report of a pipeline run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub build: String,
    pub task: String,
    pub train_success: f64,
    pub robustness_success: f64,
    /// Cumulative rewarded env steps to sustained 90% success, if reached.
    pub data_efficiency: Option<usize>,
    /// Per-episode learning curve of the task phase.
    pub curve: Vec<EpisodeRecord>,
}

/// Smallest cumulative step count from which every 30-episode window has
/// mean success >= 0.9; `None` when never sustained or the curve is shorter
/// than one window.
pub fn data_efficiency(curve: &[(usize, bool)]) -> Option<usize> {
    let n = curve.len();
    if n < SUSTAIN_WINDOW {
        return None;
    }
    // Integer success counts keep the 0.9 boundary exact (27 of 30).
    let need = (SUSTAIN_THRESHOLD * SUSTAIN_WINDOW as f64).ceil() as usize;
    let mut window: usize = curve[n - SUSTAIN_WINDOW..].iter().filter(|s| s.1).count();
    let mut sustained_from: Option<usize> = if window >= need { Some(n - SUSTAIN_WINDOW) } else { None };
    for start in (0..n - SUSTAIN_WINDOW).rev() {
        window += curve[start].1 as usize;
        window -= curve[start + SUSTAIN_WINDOW].1 as usize;
        if window >= need {
            if sustained_from == Some(start + 1) {
                sustained_from = Some(start);
            }
        } else {
            break;
        }
    }
    sustained_from.map(|i| curve[i].0)
}

/// Exploration checkpoints on disk.
pub struct ExplorationArtifacts<S: Scalar> {
    pub t_net: Mlp<S>,
    pub d_net: Mlp<S>,
}

fn save_net<S: Scalar>(net: &Mlp<S>, path: &Path) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string(&net.to_checkpoint())?)?;
    Ok(())
}

fn load_net<S: Scalar>(path: &Path) -> Result<Mlp<S>, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingCheckpoint(path.to_path_buf()));
    }
    let ckpt: NetCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(Mlp::from_checkpoint(&ckpt)?)
}

/// Runs the exploration phase and writes `t_net.json`, `d_net.json`, and
/// `exploration_metrics.csv` under `dir`.
pub fn run_exploration<S: Scalar>(
    config: &ExplorationConfig,
    dir: &Path,
) -> Result<ExplorationArtifacts<S>, HarnessError> {
    fs::create_dir_all(dir)?;
    let out = exploration_phase::<S>(config)?;
    save_net(&out.t_net, &dir.join("t_net.json"))?;
    save_net(&out.d_net, &dir.join("d_net.json"))?;
    let mut csv = String::from(
        "seed,build,step,transition_loss,error_pred_loss,explorer_loss,deformation_l1,min_scale,recent_hit_rate\n",
    );
    for m in &out.metrics {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            config.seed,
            build_id(),
            m.step,
            m.transition_loss,
            m.error_pred_loss,
            m.explorer_loss,
            m.deformation_l1,
            m.min_scale
        ));
    }
    fs::write(dir.join("exploration_metrics.csv"), csv)?;
    Ok(ExplorationArtifacts {
        t_net: out.t_net,
        d_net: out.d_net,
    })
}

/// Loads exploration checkpoints written by [`run_exploration`].
pub fn load_exploration<S: Scalar>(dir: &Path) -> Result<ExplorationArtifacts<S>, HarnessError> {
    Ok(ExplorationArtifacts {
        t_net: load_net(&dir.join("t_net.json"))?,
        d_net: load_net(&dir.join("d_net.json"))?,
    })
}

/// Writes the per-episode task curve as CSV under `dir`.
pub fn write_task_curve(
    dir: &Path,
    seed: u64,
    episodes: &[EpisodeRecord],
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("seed,build,episode,steps,env_steps,episode_return,success\n");
    for e in episodes {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            seed,
            build_id(),
            e.episode,
            e.steps,
            e.env_steps,
            e.episode_return,
            e.success as u8
        ));
    }
    fs::write(dir.join("task_curve.csv"), csv)?;
    Ok(())
}

/// Runs the task phase on one task and evaluates both splits. Artifacts go
/// under `dir/task/<name>`.
pub fn run_task<S: Scalar>(
    config: &ExperimentConfig,
    arts: &ExplorationArtifacts<S>,
    dir: &Path,
) -> Result<EvalReport, HarnessError> {
    let train = TaskSpec::by_name(&config.task_name, config.split, config.sparse)?;
    let out = task_phase(&train, &arts.t_net, &arts.d_net, &config.task)?;
    let task_dir = dir.join("task").join(&config.task_name);
    fs::create_dir_all(&task_dir)?;
    fs::write(
        task_dir.join("predictor.json"),
        serde_json::to_string(&out.predictor.to_checkpoint())?,
    )?;
    write_task_curve(&task_dir, config.seed, &out.episodes)?;

    let eval_seed = config.seed.wrapping_add(0xea1);
    let train_success = agent::evaluate(
        &out.predictor,
        &arts.t_net,
        &arts.d_net,
        &train,
        config.task.ablate_uniform_sampler,
        config.eval_episodes,
        config.task.branching,
        eval_seed,
    );
    let robust = TaskSpec::by_name(&config.task_name, Split::Robustness, config.sparse)?;
    let robustness_success = agent::evaluate(
        &out.predictor,
        &arts.t_net,
        &arts.d_net,
        &robust,
        config.task.ablate_uniform_sampler,
        config.eval_episodes,
        config.task.branching,
        eval_seed.wrapping_add(1),
    );
    let curve: Vec<(usize, bool)> = out.episodes.iter().map(|e| (e.env_steps, e.success)).collect();
    let report = EvalReport {
        seed: config.seed,
        build: build_id().to_string(),
        task: config.task_name.clone(),
        train_success,
        robustness_success,
        data_efficiency: data_efficiency(&curve),
        curve: out.episodes,
    };
    fs::write(task_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// The full two-phase pipeline: exploration, frozen checkpoints, task
/// phase, evaluation. Everything lands under `dir`.
pub fn run_pipeline<S: Scalar>(
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<EvalReport, HarnessError> {
    fs::create_dir_all(dir)?;
    config.save(&dir.join("config.json"))?;
    let arts = run_exploration::<S>(&config.exploration, dir)?;
    run_task(config, &arts, dir)
}

/// Success rate of uniformly random clicking, the floor for evaluation.
pub fn random_policy_success_rate(
    task: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = SpriteEnv::new(task.clone(), false, seed.wrapping_add(1));
    let mut successes = 0usize;
    for _ in 0..episodes {
        env.reset();
        while !env.done {
            let a = Action::from_array([rng.random(), rng.random(), rng.random(), rng.random()]);
            if env.step(&a).success {
                successes += 1;
            }
        }
    }
    successes as f64 / episodes as f64
}

/// One logged step of an episode for rendering and JSON-lines export.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryStep {
    pub sprites: Vec<SpriteState>,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Plays greedy episodes with a trained agent and logs every step.
pub fn record_trajectory<S: Scalar>(
    predictor: &RelationNet<S>,
    arts: &ExplorationArtifacts<S>,
    task: &TaskSpec,
    branching: usize,
    seed: u64,
) -> Vec<TrajectoryStep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = SpriteEnv::new(task.clone(), false, seed.wrapping_add(1));
    let mut steps = Vec::new();
    while !env.done {
        let sprites = env.sprites.clone();
        let z: SceneSlots<S> =
            encode_oracle(&sprites, true, &mut rng).expect("episodes respect slot capacity");
        let action = agent::select_action(
            predictor,
            &arts.t_net,
            ActionSampler::Learned(&arts.d_net),
            &z,
            0.0,
            branching,
            &mut rng,
        );
        let res = env.step(&action);
        steps.push(TrajectoryStep {
            sprites,
            action,
            reward: res.reward,
            done: res.done,
            success: res.success,
        });
    }
    steps
}

/// World coordinate to pixel-center coordinate (render.rs convention:
/// pixel (i + 0.5)/64 sits at world i).
fn to_pixel(w: f64) -> f64 {
    w * FRAME_SIZE as f64 - 0.5
}

/// Draws a white line segment over an RGB8 frame.
fn draw_line(rgb: &mut [u8], x0: f64, y0: f64, x1: f64, y1: f64) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1) * 2;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if (0..FRAME_SIZE as i64).contains(&x) && (0..FRAME_SIZE as i64).contains(&y) {
            let idx = ((y as usize * FRAME_SIZE) + x as usize) * 3;
            rgb[idx] = 255;
            rgb[idx + 1] = 255;
            rgb[idx + 2] = 255;
        }
    }
}

/// Renders one step's frame with its action arrow from the click to the
/// scaled motion endpoint, both in pixel coordinates.
pub fn render_step_rgb8(step: &TrajectoryStep) -> Vec<u8> {
    let mut rgb = render(&step.sprites).to_rgb8();
    let a = step.action;
    let (dx, dy) = a.delta();
    draw_line(
        &mut rgb,
        to_pixel(a.px),
        to_pixel(a.py),
        to_pixel(a.px + MOTION_SCALE * dx),
        to_pixel(a.py + MOTION_SCALE * dy),
    );
    rgb
}

/// Exports a trajectory as one PNG per step, an animated GIF, and a
/// JSON-lines log, all under `dir`.
pub fn export_episode(trajectory: &[TrajectoryStep], dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let side = FRAME_SIZE as u32;
    let mut frames = Vec::with_capacity(trajectory.len());
    for (i, step) in trajectory.iter().enumerate() {
        let rgb = render_step_rgb8(step);
        image::save_buffer(
            dir.join(format!("step_{i:03}.png")),
            &rgb,
            side,
            side,
            image::ExtendedColorType::Rgb8,
        )?;
        frames.push(rgb);
    }
    let gif_file = fs::File::create(dir.join("episode.gif"))?;
    let mut enc = image::codecs::gif::GifEncoder::new_with_speed(gif_file, 10);
    enc.set_repeat(image::codecs::gif::Repeat::Infinite)?;
    for rgb in frames {
        let rgba: Vec<u8> = rgb
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect();
        let buf = image::RgbaImage::from_raw(side, side, rgba).expect("frame size");
        enc.encode_frame(image::Frame::from_parts(
            buf,
            0,
            0,
            image::Delay::from_numer_denom_ms(250, 1),
        ))?;
    }
    drop(enc);
    let mut log = fs::File::create(dir.join("trajectory.jsonl"))?;
    for step in trajectory {
        writeln!(log, "{}", serde_json::to_string(step)?)?;
    }
    Ok(())
}

/// Oracle scorer wired to the true task reward of a scene tensor's sprite
/// readout; the evaluation upper bound.
pub fn oracle_success_rate<S: Scalar>(
    arts: &ExplorationArtifacts<S>,
    task: &TaskSpec,
    episodes: usize,
    branching: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = SpriteEnv::new(task.clone(), false, seed.wrapping_add(1));
    let mut successes = 0usize;
    for _ in 0..episodes {
        env.reset();
        while !env.done {
            let sprites = env.sprites.clone();
            let proposals: Vec<Action> = (0..branching)
                .map(|_| {
                    let z: SceneSlots<S> = encode_oracle(&sprites, true, &mut rng).unwrap();
                    crate::explorer::sample_action(&arts.d_net, &z, &mut rng).0
                })
                .collect();
            // Score each proposal by the true reward of the model-predicted
            // next scene, decoded back to sprite attributes.
            let z: SceneSlots<S> = encode_oracle(&sprites, false, &mut rng).unwrap();
            let mut best = proposals[0];
            let mut best_score = f64::NEG_INFINITY;
            for a in &proposals {
                let z_next = transition::predict(&arts.t_net, &z, a).z_next;
                let decoded = decode_sprites(&z_next, &sprites);
                let score = task.reward(&decoded).0;
                if score > best_score {
                    best_score = score;
                    best = *a;
                }
            }
            if env.step(&best).success {
                successes += 1;
            }
        }
    }
    successes as f64 / episodes as f64
}

/// Reads slot positions back into the template sprites (slot order is
/// unshuffled here, so slot k holds sprite k).
fn decode_sprites<S: Scalar>(z: &SceneSlots<S>, template: &[SpriteState]) -> Vec<SpriteState> {
    use crate::vision::field;
    template
        .iter()
        .enumerate()
        .map(|(k, sp)| {
            let mut out = sp.clone();
            out.x = z.0[k][field::X].to_f64().unwrap();
            out.y = z.0[k][field::Y].to_f64().unwrap();
            out
        })
        .collect()
}

#[cfg(test)]
mod test {
    use super::*;
    use rand::Rng;

    #[test]
    fn config_roundtrips_through_json() {
        let config = ExperimentConfig::default().with_seed(7);
        let text = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn data_efficiency_handles_the_boundary_cases() {
        // 100 all-success episodes, 10 steps each: qualifies from the start.
        let curve: Vec<(usize, bool)> = (1..=100).map(|i| (10 * i, true)).collect();
        assert_eq!(data_efficiency(&curve), Some(10));
        // All failures: absent.
        let curve: Vec<(usize, bool)> = (1..=100).map(|i| (10 * i, false)).collect();
        assert_eq!(data_efficiency(&curve), None);
        // Shorter than one window: absent.
        let curve: Vec<(usize, bool)> = (1..=29).map(|i| (10 * i, true)).collect();
        assert_eq!(data_efficiency(&curve), None);
        // One failure every 20 episodes forever: every window holds 28 or
        // 29 successes (>= 27 of 30), so the first point qualifies.
        let curve: Vec<(usize, bool)> = (1..=200).map(|i| (10 * i, i % 20 != 0)).collect();
        assert_eq!(data_efficiency(&curve), Some(10));
    }

    #[test]
    fn data_efficiency_matches_brute_force_scan() {
        let brute = |curve: &[(usize, bool)]| -> Option<usize> {
            let n = curve.len();
            if n < SUSTAIN_WINDOW {
                return None;
            }
            'outer: for i in 0..=n - SUSTAIN_WINDOW {
                for j in i..=n - SUSTAIN_WINDOW {
                    let mean = curve[j..j + SUSTAIN_WINDOW]
                        .iter()
                        .filter(|s| s.1)
                        .count() as f64
                        / SUSTAIN_WINDOW as f64;
                    if mean < SUSTAIN_THRESHOLD {
                        continue 'outer;
                    }
                }
                return Some(curve[i].0);
            }
            None
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..200 {
            let n = rng.random_range(1..120);
            let p = rng.random::<f64>();
            let mut steps = 0usize;
            let curve: Vec<(usize, bool)> = (0..n)
                .map(|_| {
                    steps += rng.random_range(1..=20);
                    (steps, rng.random::<f64>() < p)
                })
                .collect();
            assert_eq!(
                data_efficiency(&curve),
                brute(&curve),
                "trial {trial} curve {curve:?}"
            );
        }
    }

    #[test]
    fn episode_export_writes_frames_gif_and_log() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let task = TaskSpec::by_name("goal_finding.shape", Split::Train, false).unwrap();
        let sprites = task.generate_episode(&mut rng);
        let trajectory: Vec<TrajectoryStep> = (0..5)
            .map(|i| TrajectoryStep {
                sprites: sprites.clone(),
                action: Action::new(0.2 + 0.1 * i as f64, 0.5, 1.0, 0.25),
                reward: 0.5,
                done: i == 4,
                success: false,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        export_episode(&trajectory, dir.path()).unwrap();
        for i in 0..5 {
            assert!(dir.path().join(format!("step_{i:03}.png")).exists());
        }
        assert!(dir.path().join("episode.gif").exists());
        let log = fs::read_to_string(dir.path().join("trajectory.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 5);

        // Re-export is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        export_episode(&trajectory, dir2.path()).unwrap();
        for name in ["step_000.png", "episode.gif", "trajectory.jsonl"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(dir2.path().join(name)).unwrap(),
                "{name} differs between exports"
            );
        }
    }

    #[test]
    fn action_arrow_lands_on_the_expected_pixels() {
        let step = TrajectoryStep {
            sprites: Vec::new(),
            action: Action::new(0.25, 0.5, 1.0, 0.5),
            reward: 0.0,
            done: false,
            success: false,
        };
        let rgb = render_step_rgb8(&step);
        let white_at = |wx: f64, wy: f64| -> bool {
            let x = to_pixel(wx).round() as usize;
            let y = to_pixel(wy).round() as usize;
            let idx = (y * FRAME_SIZE + x) * 3;
            rgb[idx] == 255 && rgb[idx + 1] == 255 && rgb[idx + 2] == 255
        };
        // Arrow spans (px, py) .. (px + 0.25*dx, py + 0.25*dy), the exact
        // displacement the motion click produces.
        let (dx, dy) = step.action.delta();
        let (ex, ey) = (0.25 + MOTION_SCALE * dx, 0.5 + MOTION_SCALE * dy);
        assert!(white_at(0.25, 0.5), "arrow start missing");
        assert!(white_at(ex, ey), "arrow end missing");
        assert!(white_at((0.25 + ex) / 2.0, (0.5 + ey) / 2.0), "arrow body missing");
        // A pixel far from the segment stays black.
        let idx = (5 * FRAME_SIZE + 55) * 3;
        assert_eq!(&rgb[idx..idx + 3], &[0, 0, 0]);
    }

    #[test]
    fn random_policy_success_is_a_valid_rate() {
        let task = TaskSpec::by_name("goal_finding.shape", Split::Train, false).unwrap();
        let rate = random_policy_success_rate(&task, 20, 5);
        assert!((0.0..=1.0).contains(&rate));
    }
}
