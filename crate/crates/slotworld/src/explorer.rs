//! Curiosity-driven exploration: a deformation sampler trained adversarially
//! against the transition model.
//!
//! The sampler warps uniform action draws toward actions the transition
//! model expects to get wrong (its predicted error `e_pred`), regularized by
//! the deformation's L1 norm so it stays close to the identity wherever
//! curiosity is flat. A scale-floor penalty keeps the Gaussian from
//! collapsing to a deterministic map.

use crate::env::{Action, Split, SpriteEnv, TaskSpec};
use crate::grad::{Adam, GradError, Mlp, Tape};
use crate::replay::PrioritizedReplay;
use crate::scalar::{c, Scalar};
use crate::transition::{
    self, train_step as transition_train_step, LossMode, TransitionSample, ACTION_DIM, INPUT_DIM,
};
use crate::vision::{encode_oracle, SceneSlots, FLAT_DIM, NUM_SLOTS, SLOT_DIM};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFORM_INPUT: usize = FLAT_DIM + ACTION_DIM;
pub const DEFORM_HIDDEN: usize = 64;
/// Mean and scale of the 4-dim Gaussian deformation.
pub const DEFORM_OUTPUT: usize = 2 * ACTION_DIM;

/// Minimum per-coordinate scale before the floor penalty engages.
pub const SCALE_FLOOR: f64 = 0.02;
pub const SCALE_FLOOR_COEFF: f64 = 1e5;

/// Deformation L1 coefficient for the pixel-loss curiosity signal.
pub const DEFORMATION_REG_PIXEL: f64 = 210.0;
/// Matching-mode curiosity is roughly four orders of magnitude smaller than
/// the pixel loss, so the regularizer is rescaled accordingly (tuned
/// empirically for the desk-scale schedule).
pub const DEFORMATION_REG_MATCHING: f64 = 0.3;

/// Additive replay-priority epsilon per loss mode. Pixel loss has a natural
/// error floor (the soft-decoder vs hard-render residual), matching loss
/// does not: without an epsilon the near-zero miss errors drive the
/// importance-weight normalizer up until hit samples contribute nothing.
pub fn default_priority_epsilon(mode: LossMode) -> f64 {
    match mode {
        LossMode::Pixel => 0.0,
        LossMode::Matching => 0.1,
    }
}

pub fn default_deformation_reg(mode: LossMode) -> f64 {
    match mode {
        LossMode::Pixel => DEFORMATION_REG_PIXEL,
        LossMode::Matching => DEFORMATION_REG_MATCHING,
    }
}

/// Initial Gaussian scale of a fresh sampler, slightly above the floor so
/// the initial action distribution is near-identity (a ≈ u) with just
/// enough jitter to smooth the curiosity gradient. The default zero bias
/// would give softplus(0) ≈ 0.69 — noise half the action box wide, which
/// clips most samples to the frame edges and buries the learning signal.
pub const SCALE_INIT: f64 = 0.05;

pub fn new_deformation_net<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Mlp<S> {
    let mut net = Mlp::new(&[DEFORM_INPUT, DEFORM_HIDDEN, DEFORM_HIDDEN, DEFORM_OUTPUT], rng);
    let raw_init: S = c((SCALE_INIT.exp() - 1.0).ln());
    let last = net.biases.len() - 1;
    for j in ACTION_DIM..DEFORM_OUTPUT {
        net.biases[last][[0, j]] = raw_init;
    }
    net
}

fn deform_input<S: Scalar>(z: &SceneSlots<S>, u: [S; ACTION_DIM]) -> Array2<S> {
    let flat = z.flatten();
    let mut x = Array2::zeros((1, DEFORM_INPUT));
    for (j, v) in flat.iter().enumerate() {
        x[[0, j]] = *v;
    }
    for (j, v) in u.iter().enumerate() {
        x[[0, FLAT_DIM + j]] = *v;
    }
    x
}

/// Mean and positive scale of the deformation Gaussian at (z, u).
pub fn deformation_params<S: Scalar>(
    net: &Mlp<S>,
    z: &SceneSlots<S>,
    u: [S; ACTION_DIM],
) -> ([S; ACTION_DIM], [S; ACTION_DIM]) {
    let out = net.forward(&deform_input(z, u));
    let mut mean = [S::zero(); ACTION_DIM];
    let mut scale = [S::zero(); ACTION_DIM];
    for j in 0..ACTION_DIM {
        mean[j] = out[[0, j]];
        scale[j] = softplus(out[[0, ACTION_DIM + j]]);
    }
    (mean, scale)
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

/// One action draw: u uniform, deformation Gaussian, clipped to the action
/// box.
pub fn sample_action<S: Scalar, R: Rng + ?Sized>(
    net: &Mlp<S>,
    z: &SceneSlots<S>,
    rng: &mut R,
) -> (Action, [S; ACTION_DIM]) {
    let mut u = [S::zero(); ACTION_DIM];
    for v in &mut u {
        *v = S::sample_uniform(rng);
    }
    let (mean, scale) = deformation_params(net, z, u);
    let mut a = [0.0f64; ACTION_DIM];
    for j in 0..ACTION_DIM {
        let eps: S = S::sample_normal(rng);
        let x = u[j] + mean[j] + scale[j] * eps;
        a[j] = x.to_f64().unwrap().clamp(0.0, 1.0);
    }
    (Action::from_array(a), u)
}

/// Loss statistics of one explorer update.
#[derive(Debug, Clone)]
pub struct ExplorerStats<S> {
    pub loss: S,
    pub deformation_l1: S,
    pub e_pred: S,
    pub min_scale: S,
}

/// One Adam step on the explorer objective over a batch of scene tensors:
/// `reg*|deformation|_1 - e_pred + scale_floor_penalty`, reparameterized
/// through fresh (u, eps) draws. Gradients flow through the transition net
/// but only `d_net`'s parameters are updated.
pub fn explorer_train_step<S: Scalar, R: Rng + ?Sized>(
    d_net: &mut Mlp<S>,
    t_net: &Mlp<S>,
    opt: &mut Adam<S>,
    scenes: &[SceneSlots<S>],
    reg: f64,
    rng: &mut R,
) -> Result<ExplorerStats<S>, GradError> {
    let bsz = scenes.len();
    let mut tape = Tape::new();
    let d_ids = d_net.leaves(&mut tape);
    let t_ids = t_net.leaves(&mut tape);

    let mut u_val = Array2::zeros((bsz, ACTION_DIM));
    let mut eps_val = Array2::zeros((bsz, ACTION_DIM));
    let mut zin = Array2::zeros((bsz, FLAT_DIM));
    let mut slots = Array2::zeros((bsz * NUM_SLOTS, SLOT_DIM));
    for (b, z) in scenes.iter().enumerate() {
        for (j, v) in z.flatten().iter().enumerate() {
            zin[[b, j]] = *v;
        }
        for j in 0..ACTION_DIM {
            u_val[[b, j]] = S::sample_uniform(rng);
            eps_val[[b, j]] = S::sample_normal(rng);
        }
        for k in 0..NUM_SLOTS {
            for m in 0..SLOT_DIM {
                slots[[b * NUM_SLOTS + k, m]] = z.0[k][m];
            }
        }
    }
    let u = tape.leaf(u_val);
    let eps = tape.leaf(eps_val);
    let zflat = tape.leaf(zin);
    let x_d = tape.concat_cols(&[zflat, u]);
    let out = d_net.forward_on(&mut tape, &d_ids, x_d);
    let mean = tape.slice_cols(out, 0, ACTION_DIM);
    let raw = tape.slice_cols(out, ACTION_DIM, DEFORM_OUTPUT);
    let scale = tape.softplus(raw);
    let noise = tape.mul(scale, eps);
    let deformation = tape.add(mean, noise);
    let pre_clip = tape.add(u, deformation);
    let action = tape.clip(pre_clip, S::zero(), S::one());

    // e_pred of the transition model at (z, action); T_net is read-only.
    let rep: Vec<usize> = (0..bsz).flat_map(|b| std::iter::repeat_n(b, NUM_SLOTS)).collect();
    let action_rows = tape.gather_rows(action, &rep);
    let slot_leaf = tape.leaf(slots);
    let x_t = tape.concat_cols(&[slot_leaf, action_rows]);
    debug_assert_eq!(tape.shape(x_t).1, INPUT_DIM);
    let t_out = t_net.forward_on(&mut tape, &t_ids, x_t);
    let err_col = tape.slice_cols(t_out, SLOT_DIM, SLOT_DIM + 1);
    let e_pred = tape.sum_row_groups(err_col, NUM_SLOTS);

    let dabs = tape.abs(deformation);
    let l1 = tape.sum_cols(dabs);

    // Scale-floor penalty: -1e5 * scale_c for coordinates under the floor.
    // The mask is held constant, so the gradient pushes those scales up.
    let floor: S = c(SCALE_FLOOR);
    let mask_val = tape.value(scale).mapv(|s| if s < floor { S::one() } else { S::zero() });
    let mask = tape.leaf(mask_val);
    let masked = tape.mul(scale, mask);
    let pen_col = tape.sum_cols(masked);
    let penalty = tape.scale(pen_col, c(-SCALE_FLOOR_COEFF));

    let reg_l1 = tape.scale(l1, c(reg));
    let neg_e = tape.scale(e_pred, -S::one());
    let a1 = tape.add(reg_l1, neg_e);
    let per_sample = tape.add(a1, penalty);
    let loss = tape.mean_all(per_sample);

    let loss_val = tape.value(loss)[[0, 0]];
    if !loss_val.is_finite() {
        return Err(GradError::NonFinite("explorer loss"));
    }
    let grads = tape.backward(loss)?;
    transition::apply_step(d_net, opt, &tape, &d_ids, &grads)?;

    let l1_mean = mean_col(tape.value(l1));
    let e_mean = mean_col(tape.value(e_pred));
    let min_scale = tape
        .value(scale)
        .iter()
        .copied()
        .fold(S::infinity(), |a, b| a.min(b));
    Ok(ExplorerStats {
        loss: loss_val,
        deformation_l1: l1_mean,
        e_pred: e_mean,
        min_scale,
    })
}

fn mean_col<S: Scalar>(v: &Array2<S>) -> S {
    v.iter().fold(S::zero(), |a, &b| a + b) / c(v.len() as f64)
}

/// Fraction of position clicks that land on an object, over fresh scenes.
pub fn measure_hit_rate<S: Scalar, R: Rng + ?Sized>(
    d_net: &Mlp<S>,
    task: &TaskSpec,
    samples: usize,
    shuffle: bool,
    rng: &mut R,
) -> f64 {
    let mut hits = 0usize;
    for _ in 0..samples {
        let sprites = task.generate_episode(rng);
        let z: SceneSlots<S> = encode_oracle(&sprites, shuffle, rng).expect("scene fits slots");
        let (a, _) = sample_action(d_net, &z, rng);
        if crate::env::hit_test(&sprites, a.px, a.py).is_some() {
            hits += 1;
        }
    }
    hits as f64 / samples as f64
}

/// Chance hit rate of uniform clicks under the same episode distribution.
pub fn uniform_hit_rate<R: Rng + ?Sized>(task: &TaskSpec, samples: usize, rng: &mut R) -> f64 {
    let mut hits = 0usize;
    for _ in 0..samples {
        let sprites = task.generate_episode(rng);
        let px: f64 = rng.random();
        let py: f64 = rng.random();
        if crate::env::hit_test(&sprites, px, py).is_some() {
            hits += 1;
        }
    }
    hits as f64 / samples as f64
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExplorationConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    pub mode: LossMode,
    pub deformation_reg: f64,
    /// Additive replay-priority epsilon (see [`default_priority_epsilon`]).
    pub priority_epsilon: f64,
    pub shuffle_slots: bool,
    /// Uniform-action env steps taken before training starts.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        let mode = LossMode::Matching;
        ExplorationConfig {
            steps: 50_000,
            batch_size: 16,
            learning_rate: 3e-4,
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            mode,
            deformation_reg: default_deformation_reg(mode),
            priority_epsilon: default_priority_epsilon(mode),
            shuffle_slots: true,
            warmup_steps: 500,
            seed: 0,
        }
    }
}

/// One row of the exploration metrics log.
#[derive(Debug, Clone)]
pub struct ExplorationMetrics {
    pub step: usize,
    pub transition_loss: f64,
    pub error_pred_loss: f64,
    pub explorer_loss: f64,
    pub deformation_l1: f64,
    pub min_scale: f64,
    /// Object hit fraction of the sampler's clicks over the last 500 env steps.
    pub recent_hit_rate: f64,
}

pub struct ExplorationOutcome<S: Scalar> {
    pub t_net: Mlp<S>,
    pub d_net: Mlp<S>,
    pub metrics: Vec<ExplorationMetrics>,
}

/// Runs the exploration phase: the reference single-threaded alternation of
/// one environment step, one transition-model update, and one explorer
/// update per iteration. `config.steps` counts gradient steps across both
/// networks, so the loop runs `steps / 2` iterations.
pub fn exploration_phase<S: Scalar>(
    config: &ExplorationConfig,
) -> Result<ExplorationOutcome<S>, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let task = TaskSpec::by_name("exploration", Split::Train, false).expect("exploration task");
    let mut env = SpriteEnv::new(task, true, config.seed.wrapping_add(1));

    let mut t_net: Mlp<S> = transition::new_transition_net(&mut rng);
    let mut d_net: Mlp<S> = new_deformation_net(&mut rng);
    let mut t_opt = Adam::for_params(config.learning_rate, &t_net.params());
    let mut d_opt = Adam::for_params(config.learning_rate, &d_net.params());
    let mut replay: PrioritizedReplay<TransitionSample<S>> =
        PrioritizedReplay::new(config.replay_capacity, 1.0, 1.0)
            .with_epsilon(config.priority_epsilon);
    let mut metrics = Vec::new();

    let env_step = |env: &mut SpriteEnv,
                        d_net: &Mlp<S>,
                        replay: &mut PrioritizedReplay<TransitionSample<S>>,
                        rng: &mut ChaCha8Rng,
                        warmup: bool| {
        if env.done {
            env.reset();
        }
        let z: SceneSlots<S> =
            encode_oracle(&env.sprites, config.shuffle_slots, rng).expect("scene fits slots");
        let action = if warmup {
            Action::from_array([rng.random(), rng.random(), rng.random(), rng.random()])
        } else {
            sample_action(d_net, &z, rng).0
        };
        let hit = crate::env::hit_test(&env.sprites, action.px, action.py).is_some();
        env.step(&action);
        let x_next = match config.mode {
            LossMode::Pixel => Some(
                crate::env::render(&env.sprites)
                    .data
                    .iter()
                    .map(|&v| c(v))
                    .collect(),
            ),
            LossMode::Matching => None,
        };
        let z_next: SceneSlots<S> =
            encode_oracle(&env.sprites, config.shuffle_slots, rng).expect("scene fits slots");
        replay.push(TransitionSample {
            z,
            action,
            z_next,
            x_next,
        });
        hit
    };

    for _ in 0..config.warmup_steps {
        env_step(&mut env, &d_net, &mut replay, &mut rng, true);
    }

    let mut recent_hits: std::collections::VecDeque<bool> =
        std::collections::VecDeque::with_capacity(500);
    let iterations = config.steps / 2;
    for it in 0..iterations {
        let hit = env_step(&mut env, &d_net, &mut replay, &mut rng, false);
        if recent_hits.len() == 500 {
            recent_hits.pop_front();
        }
        recent_hits.push_back(hit);

        // Transition update on a prioritized batch; refresh priorities.
        let batch = replay.sample(config.batch_size, &mut rng);
        let samples: Vec<TransitionSample<S>> = batch
            .indices
            .iter()
            .map(|&i| replay.get(i).clone())
            .collect();
        let weights: Vec<S> = batch.weights.iter().map(|&w| c(w)).collect();
        let t_stats = transition_train_step(&mut t_net, &mut t_opt, &samples, &weights, config.mode)?;
        for (&i, &e) in batch.indices.iter().zip(&t_stats.sample_errors) {
            replay.update_priority(i, e.to_f64().unwrap());
        }

        // Explorer update on an independent prioritized batch of scenes.
        let batch = replay.sample(config.batch_size, &mut rng);
        let scenes: Vec<SceneSlots<S>> =
            batch.indices.iter().map(|&i| replay.get(i).z).collect();
        let d_stats = explorer_train_step(
            &mut d_net,
            &t_net,
            &mut d_opt,
            &scenes,
            config.deformation_reg,
            &mut rng,
        )?;

        if it % 100 == 0 || it + 1 == iterations {
            metrics.push(ExplorationMetrics {
                step: (it + 1) * 2,
                transition_loss: t_stats.transition_loss.to_f64().unwrap(),
                error_pred_loss: t_stats.error_pred_loss.to_f64().unwrap(),
                explorer_loss: d_stats.loss.to_f64().unwrap(),
                deformation_l1: d_stats.deformation_l1.to_f64().unwrap(),
                min_scale: d_stats.min_scale.to_f64().unwrap(),
                recent_hit_rate: recent_hits.iter().filter(|&&h| h).count() as f64
                    / recent_hits.len().max(1) as f64,
            });
        }
    }

    Ok(ExplorationOutcome {
        t_net,
        d_net,
        metrics,
    })
}

/// One arrow of the deformation-grid dump: a grid point in the chosen
/// action slice and where the deformation mean sends it.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GridArrow {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSlice {
    Position,
    Motion,
}

/// Evaluates the deformation mean over a 2D slice of u; the other two
/// coordinates are randomized per grid point.
pub fn dump_deformation_grid<S: Scalar, R: Rng + ?Sized>(
    d_net: &Mlp<S>,
    z: &SceneSlots<S>,
    which: ActionSlice,
    resolution: usize,
    rng: &mut R,
) -> Vec<GridArrow> {
    let mut arrows = Vec::with_capacity(resolution * resolution);
    for gy in 0..resolution {
        for gx in 0..resolution {
            let fx = (gx as f64 + 0.5) / resolution as f64;
            let fy = (gy as f64 + 0.5) / resolution as f64;
            let r0: S = S::sample_uniform(rng);
            let r1: S = S::sample_uniform(rng);
            let u = match which {
                ActionSlice::Position => [c(fx), c(fy), r0, r1],
                ActionSlice::Motion => [r0, r1, c(fx), c(fy)],
            };
            let (mean, _) = deformation_params(d_net, z, u);
            let (i, j) = match which {
                ActionSlice::Position => (0, 1),
                ActionSlice::Motion => (2, 3),
            };
            let tx = (fx + mean[i].to_f64().unwrap()).clamp(0.0, 1.0);
            let ty = (fy + mean[j].to_f64().unwrap()).clamp(0.0, 1.0);
            arrows.push(GridArrow {
                from: [fx, fy],
                to: [tx, ty],
            });
        }
    }
    arrows
}
