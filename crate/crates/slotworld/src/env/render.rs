//! Rasterizer: 64x64 RGB frames with 5x supersampled anti-aliasing.

use super::SpriteState;
use crate::scalar::{c, Scalar};

pub const FRAME_SIZE: usize = 64;
pub const SUPERSAMPLE: usize = 5;

/// A rendered frame, row-major `(y, x, channel)`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros() -> Self {
        Image {
            data: vec![0.0; FRAME_SIZE * FRAME_SIZE * 3],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * FRAME_SIZE + x) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * FRAME_SIZE + x) * 3 + ch] = v;
    }

    /// Quantize to 8-bit RGB for export.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Standard HSV to RGB conversion, all components in [0, 1].
pub fn hsv_to_rgb<S: Scalar>(h: S, s: S, v: S) -> (S, S, S) {
    let six: S = c(6.0);
    let hw = h - h.floor();
    let f6 = hw * six;
    let sector = f6.floor().to_usize().unwrap_or(0).min(5);
    let f = f6 - c(sector as f64);
    let p = v * (S::one() - s);
    let q = v * (S::one() - s * f);
    let t = v * (S::one() - s * (S::one() - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Render sprites over a black background in z-layer order with occlusion.
pub fn render(sprites: &[SpriteState]) -> Image {
    let ss = FRAME_SIZE * SUPERSAMPLE;
    // Color index per supersampled pixel; usize::MAX = background.
    let mut buf = vec![usize::MAX; ss * ss];
    let mut order: Vec<usize> = (0..sprites.len()).collect();
    order.sort_by_key(|&i| (sprites[i].z_layer, i));
    for &i in &order {
        let sp = &sprites[i];
        // Conservative bounding box keeps the containment tests local.
        let extent = 0.16;
        let x0 = (((sp.x - extent) * ss as f64).floor().max(0.0)) as usize;
        let x1 = (((sp.x + extent) * ss as f64).ceil()).min(ss as f64) as usize;
        let y0 = (((sp.y - extent) * ss as f64).floor().max(0.0)) as usize;
        let y1 = (((sp.y + extent) * ss as f64).ceil()).min(ss as f64) as usize;
        for y in y0..y1 {
            let py = (y as f64 + 0.5) / ss as f64;
            for x in x0..x1 {
                let px = (x as f64 + 0.5) / ss as f64;
                if sp.contains(px, py) {
                    buf[y * ss + x] = i;
                }
            }
        }
    }
    let colors: Vec<(f64, f64, f64)> = sprites
        .iter()
        .map(|s| hsv_to_rgb(s.hue, s.saturation, s.value))
        .collect();
    let mut img = Image::zeros();
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let (mut r, mut g, mut b) = (0.0, 0.0, 0.0);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let idx = buf[(y * SUPERSAMPLE + sy) * ss + x * SUPERSAMPLE + sx];
                    if idx != usize::MAX {
                        let c = colors[idx];
                        r += c.0;
                        g += c.1;
                        b += c.2;
                    }
                }
            }
            img.set(y, x, 0, r * inv);
            img.set(y, x, 1, g * inv);
            img.set(y, x, 2, b * inv);
        }
    }
    img
}
