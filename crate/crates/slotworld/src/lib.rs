//! Two-phase model-based RL on a click-and-push sprite world.
//!
//! Phase one explores without reward: a slot-wise transition model is trained
//! adversarially against a curiosity-driven action sampler. Phase two freezes
//! those components and learns only a reward (or value) predictor, acting by
//! 1-step model-predictive search.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`); concrete aliases below fix the default
//! training precision.

pub mod agent;
pub mod env;
pub mod explorer;
pub mod grad;
pub mod harness;
pub mod replay;
pub mod scalar;
pub mod transition;
pub mod vision;

/// Default scalar type for training pipelines: single precision for speed.
/// The full core also instantiates at `f64` (used by the gradient checks).
pub type Real = f32;

pub type Tape = grad::Tape<Real>;
pub type Mlp = grad::Mlp<Real>;
pub type Adam = grad::Adam<Real>;
pub type SceneSlots = vision::SceneSlots<Real>;
