//! Vision contract: oracle slot encoder, soft differentiable decoder, and
//! the minimum-MSE slot matching used by the latent-space transition loss.
//!
//! The encoder writes ground-truth sprite features straight into slots
//! (optionally shuffled, reproducing the arbitrary slot ordering of a
//! learned scene encoder). The decoder renders each slot as a soft shape
//! via a signed-distance field with a sigmoid edge and composites in slot
//! order; gradients are defined w.r.t. every slot field.

use crate::env::{hsv_to_rgb, Shape, SpriteState, FRAME_SIZE};
use crate::grad::CustomOp;
use crate::scalar::{c, Scalar};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_SLOTS: usize = 8;
pub const SLOT_DIM: usize = 8;
pub const FLAT_DIM: usize = NUM_SLOTS * SLOT_DIM;

/// Slot field indices.
pub mod field {
    pub const PRESENCE: usize = 0;
    pub const X: usize = 1;
    pub const Y: usize = 2;
    pub const HUE: usize = 3;
    pub const SAT: usize = 4;
    pub const SHAPE_SQUARE: usize = 5;
    pub const SHAPE_CIRCLE: usize = 6;
    pub const SHAPE_TRIANGLE: usize = 7;
}

/// Sigmoid edge sharpness of the soft decoder, one pixel in frame units.
pub const EDGE_TAU: f64 = 1.0 / FRAME_SIZE as f64;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("{count} sprites exceed the {max}-slot capacity")]
    TooManySprites { count: usize, max: usize },
}

/// The K x M scene tensor. Blank slots are all-zero rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSlots<S>(pub [[S; SLOT_DIM]; NUM_SLOTS]);

impl<S: Scalar> Default for SceneSlots<S> {
    fn default() -> Self {
        Self::zeros()
    }
}

impl<S: Scalar> SceneSlots<S> {
    pub fn zeros() -> Self {
        SceneSlots([[S::zero(); SLOT_DIM]; NUM_SLOTS])
    }

    pub fn slot(&self, k: usize) -> &[S; SLOT_DIM] {
        &self.0[k]
    }

    pub fn flatten(&self) -> [S; FLAT_DIM] {
        let mut out = [S::zero(); FLAT_DIM];
        for k in 0..NUM_SLOTS {
            out[k * SLOT_DIM..(k + 1) * SLOT_DIM].copy_from_slice(&self.0[k]);
        }
        out
    }

    pub fn to_array(&self) -> Array2<S> {
        Array2::from_shape_fn((NUM_SLOTS, SLOT_DIM), |(k, m)| self.0[k][m])
    }

    pub fn from_array(a: &Array2<S>) -> Self {
        assert_eq!(a.dim(), (NUM_SLOTS, SLOT_DIM));
        let mut s = Self::zeros();
        for k in 0..NUM_SLOTS {
            for m in 0..SLOT_DIM {
                s.0[k][m] = a[[k, m]];
            }
        }
        s
    }

    pub fn permuted(&self, perm: &[usize; NUM_SLOTS]) -> Self {
        let mut out = Self::zeros();
        for (dst, &src) in perm.iter().enumerate() {
            out.0[dst] = self.0[src];
        }
        out
    }

    /// Rows sorted lexicographically; canonical form for permutation-
    /// insensitive comparisons.
    pub fn sorted_rows(&self) -> Self {
        let mut rows = self.0;
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        SceneSlots(rows)
    }

    pub fn occupied(&self) -> Vec<usize> {
        (0..NUM_SLOTS)
            .filter(|&k| self.0[k].iter().any(|v| *v != S::zero()))
            .collect()
    }
}

/// Ground-truth encoder: one occupied slot per sprite (in z-layer order),
/// remaining slots zero. With `shuffle`, slot order is a fresh uniform
/// permutation per call.
pub fn encode_oracle<S: Scalar, R: Rng + ?Sized>(
    sprites: &[SpriteState],
    shuffle: bool,
    rng: &mut R,
) -> Result<SceneSlots<S>, VisionError> {
    if sprites.len() > NUM_SLOTS - 1 {
        return Err(VisionError::TooManySprites {
            count: sprites.len(),
            max: NUM_SLOTS - 1,
        });
    }
    let mut order: Vec<usize> = (0..sprites.len()).collect();
    order.sort_by_key(|&i| (sprites[i].z_layer, i));
    let mut slots = SceneSlots::zeros();
    for (k, &i) in order.iter().enumerate() {
        let sp = &sprites[i];
        let row = &mut slots.0[k];
        row[field::PRESENCE] = S::one();
        row[field::X] = c(sp.x);
        row[field::Y] = c(sp.y);
        row[field::HUE] = c(sp.hue);
        row[field::SAT] = c(sp.saturation);
        let shape_field = match sp.shape {
            Shape::Square => field::SHAPE_SQUARE,
            Shape::Circle => field::SHAPE_CIRCLE,
            Shape::Triangle => field::SHAPE_TRIANGLE,
        };
        row[shape_field] = S::one();
    }
    if shuffle {
        let mut perm = [0usize; NUM_SLOTS];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i;
        }
        // Fisher-Yates.
        for i in (1..NUM_SLOTS).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        slots = slots.permuted(&perm);
    }
    Ok(slots)
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
const SHAPE_FIELDS: [usize; 3] = [
    field::SHAPE_SQUARE,
    field::SHAPE_CIRCLE,
    field::SHAPE_TRIANGLE,
];

/// Differentiable soft rendering of a slot tensor, length `64*64*3`.
pub fn decode_soft<S: Scalar>(slots: &SceneSlots<S>) -> Vec<S> {
    decode_with_grad(slots, None).0
}

/// Pixel loss `||decode_soft(z) - target||^2` summed over pixels/channels.
pub fn pixel_reconstruction_loss<S: Scalar>(slots: &SceneSlots<S>, target: &[S]) -> S {
    decode_soft(slots)
        .iter()
        .zip(target)
        .map(|(a, &b)| (*a - b) * (*a - b))
        .fold(S::zero(), |acc, v| acc + v)
}

/// HSV->RGB (value fixed at 1) with partial derivatives w.r.t. hue and
/// saturation. Piecewise-smooth; subgradients at sector boundaries.
fn hsv_partials<S: Scalar>(h: S, s: S) -> ([S; 3], [S; 3], [S; 3]) {
    let rgb = hsv_to_rgb(h, s, S::one());
    let rgb = [rgb.0, rgb.1, rgb.2];
    let six: S = c(6.0);
    let hw = h - h.floor();
    let f6 = hw * six;
    let sector = f6.floor().to_usize().unwrap_or(0).min(5);
    let f = f6 - c(sector as f64);
    // p = 1-s, q = 1-s f, t = 1-s(1-f)
    let dq_dh = -s * six;
    let dt_dh = s * six;
    let dp_ds = -S::one();
    let dq_ds = -f;
    let dt_ds = -(S::one() - f);
    let z = S::zero();
    // (r,g,b) per sector: 0:(v,t,p) 1:(q,v,p) 2:(p,v,t) 3:(p,q,v) 4:(t,p,v) 5:(v,p,q)
    let (dh, ds) = match sector {
        0 => ([z, dt_dh, z], [z, dt_ds, dp_ds]),
        1 => ([dq_dh, z, z], [dq_ds, z, dp_ds]),
        2 => ([z, z, dt_dh], [dp_ds, z, dt_ds]),
        3 => ([z, dq_dh, z], [dp_ds, dq_ds, z]),
        4 => ([dt_dh, z, z], [dt_ds, dp_ds, z]),
        _ => ([z, z, dq_dh], [z, dp_ds, dq_ds]),
    };
    (rgb, dh, ds)
}

/// Shared forward/backward core of the soft decoder.
///
/// Per slot k and pixel p: `alpha = presence * sum_s shape_s * edge_s(p)`
/// with `edge_s = sigmoid(-sdf_s / tau)`; slots composite in index order
/// over a black background.
pub fn decode_with_grad<S: Scalar>(
    slots: &SceneSlots<S>,
    grad_out: Option<&[S]>,
) -> (Vec<S>, Option<SceneSlots<S>>) {
    let tau: S = c(EDGE_TAU);
    let inv_frame: S = c(1.0 / FRAME_SIZE as f64);
    let half: S = c(0.5);

    // Per-slot constants: color and its partials.
    let active: Vec<usize> = slots.occupied();
    let mut rgb = [[S::zero(); 3]; NUM_SLOTS];
    let mut drgb_dh = [[S::zero(); 3]; NUM_SLOTS];
    let mut drgb_ds = [[S::zero(); 3]; NUM_SLOTS];
    for &k in &active {
        let (color, dh, ds) = hsv_partials(slots.0[k][field::HUE], slots.0[k][field::SAT]);
        rgb[k] = color;
        drgb_dh[k] = dh;
        drgb_ds[k] = ds;
    }

    let mut out = vec![S::zero(); FRAME_SIZE * FRAME_SIZE * 3];
    let mut grads = grad_out.map(|_| SceneSlots::<S>::zeros());

    // Per-pixel scratch.
    let mut alpha = [S::zero(); NUM_SLOTS];
    let mut cov = [S::zero(); NUM_SLOTS];
    let mut edge = [[S::zero(); 3]; NUM_SLOTS];
    let mut dedge = [[(S::zero(), S::zero()); 3]; NUM_SLOTS];
    let mut before = [[S::zero(); 3]; NUM_SLOTS + 1];

    for py in 0..FRAME_SIZE {
        let cy = (c::<S>(py as f64) + half) * inv_frame;
        for px in 0..FRAME_SIZE {
            let cx = (c::<S>(px as f64) + half) * inv_frame;
            for &k in &active {
                let row = &slots.0[k];
                let dx = cx - row[field::X];
                let dy = cy - row[field::Y];
                let mut cv = S::zero();
                for (si, &shape) in SHAPES.iter().enumerate() {
                    let w = row[SHAPE_FIELDS[si]];
                    if grads.is_none() && w == S::zero() {
                        edge[k][si] = S::zero();
                        continue;
                    }
                    let (sd, (gx, gy)) = shape.sdf_grad(dx, dy);
                    let e = S::one() / (S::one() + (sd / tau).exp());
                    edge[k][si] = e;
                    if grads.is_some() {
                        // de/dx_slot = e(1-e) * gx / tau (sdf evaluated at p - c).
                        let dcoef = e * (S::one() - e) / tau;
                        dedge[k][si] = (dcoef * gx, dcoef * gy);
                    }
                    cv += w * e;
                }
                cov[k] = cv;
                alpha[k] = row[field::PRESENCE] * cv;
            }
            // Composite in slot order; record the value before each slot.
            let mut acc = [S::zero(); 3];
            before[0] = acc;
            let mut ai = 0;
            for &k in &active {
                let a = alpha[k];
                for ch in 0..3 {
                    acc[ch] = acc[ch] * (S::one() - a) + rgb[k][ch] * a;
                }
                ai += 1;
                before[ai] = acc;
            }
            let base = (py * FRAME_SIZE + px) * 3;
            out[base] = acc[0];
            out[base + 1] = acc[1];
            out[base + 2] = acc[2];

            let (Some(g_out), Some(gr)) = (grad_out, grads.as_mut()) else {
                continue;
            };
            let g = [g_out[base], g_out[base + 1], g_out[base + 2]];
            // Suffix transmittance and per-slot contributions, reverse order.
            let mut trans = S::one();
            for (ai, &k) in active.iter().enumerate().rev() {
                let row = &slots.0[k];
                let a = alpha[k];
                let mut d_alpha = S::zero();
                let mut d_color = [S::zero(); 3];
                for ch in 0..3 {
                    d_alpha += g[ch] * (rgb[k][ch] - before[ai][ch]) * trans;
                    d_color[ch] = g[ch] * a * trans;
                }
                let grow = &mut gr.0[k];
                grow[field::PRESENCE] += d_alpha * cov[k];
                let q = row[field::PRESENCE];
                let mut dx_acc = S::zero();
                let mut dy_acc = S::zero();
                for si in 0..3 {
                    let w = row[SHAPE_FIELDS[si]];
                    grow[SHAPE_FIELDS[si]] += d_alpha * q * edge[k][si];
                    dx_acc += w * dedge[k][si].0;
                    dy_acc += w * dedge[k][si].1;
                }
                grow[field::X] += d_alpha * q * dx_acc;
                grow[field::Y] += d_alpha * q * dy_acc;
                for ch in 0..3 {
                    grow[field::HUE] += d_color[ch] * drgb_dh[k][ch];
                    grow[field::SAT] += d_color[ch] * drgb_ds[k][ch];
                }
                trans = trans * (S::one() - a);
            }
        }
    }
    (out, grads)
}

/// Tape op wrapping the soft decoder: input `(K, M)` slots, output
/// `(1, 64*64*3)`.
pub struct SoftDecodeOp;

impl<S: Scalar> CustomOp<S> for SoftDecodeOp {
    fn forward(&self, inputs: &[&Array2<S>]) -> Array2<S> {
        let slots = SceneSlots::from_array(inputs[0]);
        let img = decode_soft(&slots);
        Array2::from_shape_vec((1, img.len()), img).unwrap()
    }

    fn backward(
        &self,
        inputs: &[&Array2<S>],
        _output: &Array2<S>,
        grad_out: &Array2<S>,
    ) -> Vec<Array2<S>> {
        let slots = SceneSlots::from_array(inputs[0]);
        let g: Vec<S> = grad_out.iter().copied().collect();
        let (_, grads) = decode_with_grad(&slots, Some(&g));
        vec![grads.unwrap().to_array()]
    }
}

/// Mapping from each slot of `z_next` to its minimum-MSE slot of `z_prev`
/// (double assignment permitted, ties to the lowest index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMatching(pub [usize; NUM_SLOTS]);

pub fn match_slots<S: Scalar>(z_prev: &SceneSlots<S>, z_next: &SceneSlots<S>) -> SlotMatching {
    let mut matching = [0usize; NUM_SLOTS];
    for (j, m) in matching.iter_mut().enumerate() {
        let mut best = S::infinity();
        let mut best_i = 0;
        for i in 0..NUM_SLOTS {
            let mut mse = S::zero();
            for d in 0..SLOT_DIM {
                let diff = z_prev.0[i][d] - z_next.0[j][d];
                mse += diff * diff;
            }
            if mse < best {
                best = mse;
                best_i = i;
            }
        }
        *m = best_i;
    }
    SlotMatching(matching)
}
