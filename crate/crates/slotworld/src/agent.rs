//! Task-phase agent: a relation-network reward (or TD value) predictor
//! trained on top of frozen exploration-phase components, acting by 1-step
//! model-predictive search over action proposals.
//!
//! Only the predictor learns here; the transition model and the action
//! sampler are read-only inputs.

use std::collections::VecDeque;

use crate::env::{Action, SpriteEnv, TaskSpec};
use crate::grad::{Adam, GradError, Gradients, Mlp, MlpTapeIds, NetCheckpoint, NodeId, Tape};
use crate::scalar::{c, Scalar};
use crate::transition::{self, ACTION_DIM};
use crate::vision::{encode_oracle, SceneSlots, NUM_SLOTS, SLOT_DIM};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A pair embedding sees two concatenated slots.
pub const PAIR_INPUT: usize = 2 * SLOT_DIM;
pub const RELATION_HIDDEN: usize = 128;
/// Unordered slot pairs i<j, each fed in both orders for exact symmetry.
pub const NUM_PAIR_ROWS: usize = NUM_SLOTS * (NUM_SLOTS - 1);

/// Search branching factor of the 1-step model-predictive search.
pub const SEARCH_BRANCHING: usize = 128;
/// Epsilon of the epsilon-greedy acting rule.
pub const ACT_EPSILON: f64 = 0.2;
/// Predictor gradient steps per environment step.
pub const GRAD_STEPS_PER_ENV_STEP: usize = 10;
/// Uniform FIFO task replay capacity.
pub const TASK_REPLAY_CAPACITY: usize = 50_000;
/// Value-predictor discount.
pub const VALUE_GAMMA: f64 = 0.9;

/// Relation network: per-pair MLP summed over all slot pairs, then a global
/// MLP down to a scalar. Serves as both the reward and the value predictor.
#[derive(Debug, Clone)]
pub struct RelationNet<S: Scalar> {
    pub pair: Mlp<S>,
    pub global: Mlp<S>,
}

pub struct RelationTapeIds {
    pub pair: MlpTapeIds,
    pub global: MlpTapeIds,
}

impl<S: Scalar> RelationNet<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        RelationNet {
            pair: Mlp::new(&[PAIR_INPUT, RELATION_HIDDEN, RELATION_HIDDEN], rng),
            global: Mlp::new(&[RELATION_HIDDEN, RELATION_HIDDEN, 1], rng),
        }
    }

    /// Rows for a batch of scene tensors: for every sample, both orders of
    /// every unordered slot pair, `(B * NUM_PAIR_ROWS, 16)`.
    pub fn pair_rows(zs: &[SceneSlots<S>]) -> Array2<S> {
        let mut x = Array2::zeros((zs.len() * NUM_PAIR_ROWS, PAIR_INPUT));
        for (b, z) in zs.iter().enumerate() {
            let mut r = b * NUM_PAIR_ROWS;
            for i in 0..NUM_SLOTS {
                for j in (i + 1)..NUM_SLOTS {
                    for d in 0..SLOT_DIM {
                        x[[r, d]] = z.0[i][d];
                        x[[r, SLOT_DIM + d]] = z.0[j][d];
                        x[[r + 1, d]] = z.0[j][d];
                        x[[r + 1, SLOT_DIM + d]] = z.0[i][d];
                    }
                    r += 2;
                }
            }
        }
        x
    }

    /// Batched scalar prediction (reward or value, by training).
    pub fn predict_batch(&self, zs: &[SceneSlots<S>]) -> Vec<S> {
        let h = self.pair.forward(&Self::pair_rows(zs));
        let mut pooled = Array2::zeros((zs.len(), RELATION_HIDDEN));
        for b in 0..zs.len() {
            for r in 0..NUM_PAIR_ROWS {
                for d in 0..RELATION_HIDDEN {
                    pooled[[b, d]] += h[[b * NUM_PAIR_ROWS + r, d]];
                }
            }
        }
        let out = self.global.forward(&pooled);
        (0..zs.len()).map(|b| out[[b, 0]]).collect()
    }

    pub fn predict(&self, z: &SceneSlots<S>) -> S {
        self.predict_batch(std::slice::from_ref(z))[0]
    }

    pub fn leaves(&self, tape: &mut Tape<S>) -> RelationTapeIds {
        RelationTapeIds {
            pair: self.pair.leaves(tape),
            global: self.global.leaves(tape),
        }
    }

    /// Taped batched forward: `x` is `(B * NUM_PAIR_ROWS, 16)`, output `(B, 1)`.
    pub fn forward_on(&self, tape: &mut Tape<S>, ids: &RelationTapeIds, x: NodeId) -> NodeId {
        let h = self.pair.forward_on(tape, &ids.pair, x);
        let pooled = tape.sum_row_groups(h, NUM_PAIR_ROWS);
        self.global.forward_on(tape, &ids.global, pooled)
    }

    pub fn params(&self) -> Vec<&Array2<S>> {
        let mut p = self.pair.params();
        p.extend(self.global.params());
        p
    }

    pub fn param_hash(&self) -> u64 {
        self.pair.param_hash() ^ self.global.param_hash().rotate_left(1)
    }

    pub fn to_checkpoint(&self) -> RelationCheckpoint {
        RelationCheckpoint {
            pair: self.pair.to_checkpoint(),
            global: self.global.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ckpt: &RelationCheckpoint) -> Result<Self, crate::grad::CheckpointError> {
        Ok(RelationNet {
            pair: Mlp::from_checkpoint(&ckpt.pair)?,
            global: Mlp::from_checkpoint(&ckpt.global)?,
        })
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RelationCheckpoint {
    pub pair: NetCheckpoint,
    pub global: NetCheckpoint,
}

/// Adam over the concatenated pair-net and global-net parameters.
pub fn relation_adam<S: Scalar>(lr: f64, net: &RelationNet<S>) -> Adam<S> {
    Adam::for_params(lr, &net.params())
}

fn apply_relation_step<S: Scalar>(
    net: &mut RelationNet<S>,
    opt: &mut Adam<S>,
    tape: &Tape<S>,
    ids: &RelationTapeIds,
    grads: &Gradients<S>,
) -> Result<(), GradError> {
    let g: Vec<Array2<S>> = ids
        .pair
        .all()
        .chain(ids.global.all())
        .map(|id| grads.get_or_zeros(id, tape.shape(id)))
        .collect();
    let mut params = net.pair.params_mut();
    params.extend(net.global.params_mut());
    opt.step(&mut params, &g)
}

/// Which quantity the predictor regresses and how it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorMode {
    Reward,
    Value,
}

/// Where search proposals come from.
#[derive(Clone, Copy)]
pub enum ActionSampler<'a, S: Scalar> {
    /// The frozen exploration-phase deformation sampler.
    Learned(&'a Mlp<S>),
    /// Uniform over the action box (the sampler ablation).
    Uniform,
}

impl<S: Scalar> ActionSampler<'_, S> {
    pub fn draw<R: Rng + ?Sized>(&self, z: &SceneSlots<S>, rng: &mut R) -> Action {
        match self {
            ActionSampler::Learned(d_net) => crate::explorer::sample_action(d_net, z, rng).0,
            ActionSampler::Uniform => {
                let mut a = [0.0f64; ACTION_DIM];
                for v in &mut a {
                    *v = rng.random();
                }
                Action::from_array(a)
            }
        }
    }
}

/// Epsilon-greedy over precomputed proposal scores: with probability 1-eps
/// the argmax proposal, else a fresh single draw from the sampler.
pub fn argmax_select<S: Scalar, R: Rng + ?Sized>(
    proposals: &[Action],
    scores: &[S],
    sampler: ActionSampler<'_, S>,
    z: &SceneSlots<S>,
    epsilon: f64,
    rng: &mut R,
) -> Action {
    assert_eq!(proposals.len(), scores.len());
    assert!(!proposals.is_empty());
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    if rng.random::<f64>() < epsilon {
        sampler.draw(z, rng)
    } else {
        proposals[best]
    }
}

/// 1-step model-predictive search: draw proposals, predict each next scene
/// with the frozen transition model, score the predictions, act
/// epsilon-greedily. Mutates nothing.
pub fn select_action<S: Scalar, R: Rng + ?Sized>(
    predictor: &RelationNet<S>,
    t_net: &Mlp<S>,
    sampler: ActionSampler<'_, S>,
    z: &SceneSlots<S>,
    epsilon: f64,
    branching: usize,
    rng: &mut R,
) -> Action {
    let proposals: Vec<Action> = (0..branching).map(|_| sampler.draw(z, rng)).collect();
    let nexts = transition::predict_many(t_net, z, &proposals);
    let scores = predictor.predict_batch(&nexts);
    argmax_select(&proposals, &scores, sampler, z, epsilon, rng)
}

/// One uniform-FIFO replay record. Reward mode stores a scene and its
/// reward; value mode additionally stores the transition that left it.
#[derive(Debug, Clone)]
pub struct TaskSample<S: Scalar> {
    pub z: SceneSlots<S>,
    pub reward: S,
    /// `(action, z_next, gamma_t)`, value mode only; `gamma_t` is the
    /// per-sample discount, zero at terminal.
    pub transition: Option<(Action, SceneSlots<S>, S)>,
}

/// Uniform FIFO replay for the task phase.
pub struct TaskReplay<S: Scalar> {
    buf: VecDeque<TaskSample<S>>,
    capacity: usize,
}

impl<S: Scalar> TaskReplay<S> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        TaskReplay {
            buf: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, s: TaskSample<S>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a TaskSample<S>> {
        (0..n)
            .map(|_| &self.buf[rng.random_range(0..self.buf.len())])
            .collect()
    }
}

/// One Adam step of reward-predictor MSE on a uniform batch.
pub fn reward_train_step<S: Scalar>(
    net: &mut RelationNet<S>,
    opt: &mut Adam<S>,
    batch: &[&TaskSample<S>],
) -> Result<S, GradError> {
    let bsz = batch.len();
    let zs: Vec<SceneSlots<S>> = batch.iter().map(|s| s.z).collect();
    let mut tape = Tape::new();
    let ids = net.leaves(&mut tape);
    let x = tape.leaf(RelationNet::pair_rows(&zs));
    let pred = net.forward_on(&mut tape, &ids, x);
    let r: Vec<S> = batch.iter().map(|s| s.reward).collect();
    let target = tape.leaf(Array2::from_shape_vec((bsz, 1), r).unwrap());
    let diff = tape.sub(pred, target);
    let sq = tape.square(diff);
    let loss = tape.mean_all(sq);
    let loss_val = tape.value(loss)[[0, 0]];
    if !loss_val.is_finite() {
        return Err(GradError::NonFinite("reward loss"));
    }
    let grads = tape.backward(loss)?;
    apply_relation_step(net, opt, &tape, &ids, &grads)?;
    Ok(loss_val)
}

/// The three value-predictor losses for one sample, evaluated directly:
/// TD against the true next scene, TD against the model's predicted next
/// scene, and value consistency between the two. Bootstrap targets are the
/// current net's values held constant.
pub fn value_losses<S: Scalar>(
    net: &RelationNet<S>,
    t_net: &Mlp<S>,
    s: &TaskSample<S>,
) -> (S, S, S) {
    let (action, z_next, gamma_t) = s.transition.as_ref().expect("value sample needs transition");
    let z_model = transition::predict(t_net, &s.z, action).z_next;
    let v = net.predict_batch(&[s.z, *z_next, z_model]);
    let (v_t, v_next, v_model) = (v[0], v[1], v[2]);
    let td = s.reward + *gamma_t * v_next - v_t;
    let td_pred = s.reward + *gamma_t * v_model - v_t;
    let cons = v_next - v_model;
    (td * td, td_pred * td_pred, cons * cons)
}

#[derive(Debug, Clone)]
pub struct ValueStats<S> {
    pub loss: S,
    pub loss_td: S,
    pub loss_td_pred: S,
    pub loss_consistency: S,
}

/// One Adam step of the value objective on a uniform batch: unweighted sum
/// of the three losses, mean over the batch. Bootstrap targets come from an
/// untaped forward pass, so no gradient reaches them.
pub fn value_train_step<S: Scalar>(
    net: &mut RelationNet<S>,
    opt: &mut Adam<S>,
    t_net: &Mlp<S>,
    batch: &[&TaskSample<S>],
) -> Result<ValueStats<S>, GradError> {
    let bsz = batch.len();
    let mut z_t = Vec::with_capacity(bsz);
    let mut z_next = Vec::with_capacity(bsz);
    let mut z_model = Vec::with_capacity(bsz);
    let mut r = Array2::zeros((bsz, 1));
    let mut gamma = Array2::zeros((bsz, 1));
    for (b, s) in batch.iter().enumerate() {
        let (action, zn, g) = s.transition.as_ref().expect("value sample needs transition");
        z_t.push(s.z);
        z_next.push(*zn);
        z_model.push(transition::predict(t_net, &s.z, action).z_next);
        r[[b, 0]] = s.reward;
        gamma[[b, 0]] = *g;
    }
    // Detached bootstrap targets.
    let v_next_tgt = Array2::from_shape_vec((bsz, 1), net.predict_batch(&z_next)).unwrap();
    let v_model_tgt = Array2::from_shape_vec((bsz, 1), net.predict_batch(&z_model)).unwrap();

    let mut tape = Tape::new();
    let ids = net.leaves(&mut tape);
    let x_t = tape.leaf(RelationNet::pair_rows(&z_t));
    let x_next = tape.leaf(RelationNet::pair_rows(&z_next));
    let x_model = tape.leaf(RelationNet::pair_rows(&z_model));
    let v_t = net.forward_on(&mut tape, &ids, x_t);
    let v_next = net.forward_on(&mut tape, &ids, x_next);
    let v_model = net.forward_on(&mut tape, &ids, x_model);

    let r = tape.leaf(r);
    let gamma = tape.leaf(gamma);
    let td = {
        let tgt = tape.leaf(v_next_tgt);
        let disc = tape.mul(gamma, tgt);
        let boot = tape.add(r, disc);
        let diff = tape.sub(boot, v_t);
        tape.square(diff)
    };
    let td_pred = {
        let tgt = tape.leaf(v_model_tgt);
        let disc = tape.mul(gamma, tgt);
        let boot = tape.add(r, disc);
        let diff = tape.sub(boot, v_t);
        tape.square(diff)
    };
    let cons = {
        let diff = tape.sub(v_next, v_model);
        tape.square(diff)
    };
    let s1 = tape.add(td, td_pred);
    let per_sample = tape.add(s1, cons);
    let loss = tape.mean_all(per_sample);
    let loss_val = tape.value(loss)[[0, 0]];
    if !loss_val.is_finite() {
        return Err(GradError::NonFinite("value loss"));
    }
    let grads = tape.backward(loss)?;
    let stats = ValueStats {
        loss: loss_val,
        loss_td: batch_mean(tape.value(td)),
        loss_td_pred: batch_mean(tape.value(td_pred)),
        loss_consistency: batch_mean(tape.value(cons)),
    };
    apply_relation_step(net, opt, &tape, &ids, &grads)?;
    Ok(stats)
}

fn batch_mean<S: Scalar>(a: &Array2<S>) -> S {
    a.iter().fold(S::zero(), |acc, &v| acc + v) / c(a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskConfig {
    pub episodes: usize,
    pub epsilon: f64,
    pub branching: usize,
    pub grad_steps_per_env_step: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    pub gamma: f64,
    pub mode: PredictorMode,
    pub ablate_uniform_sampler: bool,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            episodes: 1000,
            epsilon: ACT_EPSILON,
            branching: SEARCH_BRANCHING,
            grad_steps_per_env_step: GRAD_STEPS_PER_ENV_STEP,
            batch_size: 16,
            learning_rate: 3e-4,
            replay_capacity: TASK_REPLAY_CAPACITY,
            gamma: VALUE_GAMMA,
            mode: PredictorMode::Reward,
            ablate_uniform_sampler: false,
            seed: 0,
        }
    }
}

/// One finished episode of the task loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    pub episode_return: f64,
    pub success: bool,
    /// Cumulative environment steps taken when the episode ended.
    pub env_steps: usize,
}

pub struct TaskOutcome<S: Scalar> {
    pub predictor: RelationNet<S>,
    pub episodes: Vec<EpisodeRecord>,
}

/// The task-phase loop: per environment step, observe and record, act by
/// epsilon-greedy 1-step search, then take predictor gradient steps. The
/// transition model and deformation sampler stay frozen throughout.
pub fn task_phase<S: Scalar>(
    task: &TaskSpec,
    t_net: &Mlp<S>,
    d_net: &Mlp<S>,
    config: &TaskConfig,
) -> Result<TaskOutcome<S>, GradError> {
    let t_hash = t_net.param_hash();
    let d_hash = d_net.param_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut env = SpriteEnv::new(task.clone(), false, config.seed.wrapping_add(1));
    let mut net: RelationNet<S> = RelationNet::new(&mut rng);
    let mut opt = relation_adam(config.learning_rate, &net);
    let mut replay: TaskReplay<S> = TaskReplay::new(config.replay_capacity);
    let sampler = if config.ablate_uniform_sampler {
        ActionSampler::Uniform
    } else {
        ActionSampler::Learned(d_net)
    };

    let mut episodes = Vec::with_capacity(config.episodes);
    let mut env_steps = 0usize;
    for episode in 0..config.episodes {
        env.reset();
        let mut episode_return = 0.0;
        let mut steps = 0usize;
        let mut success = false;
        while !env.done {
            let z: SceneSlots<S> = encode_oracle(&env.sprites, true, &mut rng)
                .expect("episodes respect slot capacity");
            if config.mode == PredictorMode::Reward {
                let (r, _) = env.current_reward();
                replay.push(TaskSample {
                    z,
                    reward: c(r),
                    transition: None,
                });
            }
            let action = select_action(
                &net, t_net, sampler, &z, config.epsilon, config.branching, &mut rng,
            );
            let res = env.step(&action);
            env_steps += 1;
            steps += 1;
            episode_return += res.reward;
            success = res.success;
            if config.mode == PredictorMode::Value {
                let z_next: SceneSlots<S> = encode_oracle(&env.sprites, true, &mut rng)
                    .expect("episodes respect slot capacity");
                let gamma_t = if res.done { S::zero() } else { c(config.gamma) };
                replay.push(TaskSample {
                    z,
                    reward: c(res.reward),
                    transition: Some((action, z_next, gamma_t)),
                });
            }
            if replay.len() >= config.batch_size {
                for _ in 0..config.grad_steps_per_env_step {
                    let batch = replay.sample(config.batch_size, &mut rng);
                    match config.mode {
                        PredictorMode::Reward => {
                            reward_train_step(&mut net, &mut opt, &batch)?;
                        }
                        PredictorMode::Value => {
                            value_train_step(&mut net, &mut opt, t_net, &batch)?;
                        }
                    }
                }
            }
        }
        if config.mode == PredictorMode::Reward {
            // The terminal observation is still an observation.
            let z: SceneSlots<S> = encode_oracle(&env.sprites, true, &mut rng)
                .expect("episodes respect slot capacity");
            let (r, _) = env.current_reward();
            replay.push(TaskSample {
                z,
                reward: c(r),
                transition: None,
            });
        }
        episodes.push(EpisodeRecord {
            episode,
            steps,
            episode_return,
            success,
            env_steps,
        });
    }
    assert_eq!(t_net.param_hash(), t_hash, "transition net must stay frozen");
    assert_eq!(d_net.param_hash(), d_hash, "deformation net must stay frozen");
    Ok(TaskOutcome {
        predictor: net,
        episodes,
    })
}

/// Greedy evaluation: epsilon = 0, no training. Returns the success rate.
pub fn evaluate<S: Scalar>(
    predictor: &RelationNet<S>,
    t_net: &Mlp<S>,
    d_net: &Mlp<S>,
    task: &TaskSpec,
    ablate_uniform_sampler: bool,
    episodes: usize,
    branching: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = SpriteEnv::new(task.clone(), false, seed.wrapping_add(1));
    let sampler = if ablate_uniform_sampler {
        ActionSampler::Uniform
    } else {
        ActionSampler::Learned(d_net)
    };
    let mut successes = 0usize;
    for _ in 0..episodes {
        env.reset();
        while !env.done {
            let z: SceneSlots<S> = encode_oracle(&env.sprites, true, &mut rng)
                .expect("episodes respect slot capacity");
            let action = select_action(predictor, t_net, sampler, &z, 0.0, branching, &mut rng);
            let res = env.step(&action);
            if res.success {
                successes += 1;
            }
        }
    }
    successes as f64 / episodes as f64
}
