//! Dense MLPs: truncated-normal init, plain and taped forward passes,
//! and a versioned JSON checkpoint format.

use super::{NodeId, Tape};
use crate::scalar::{c, Scalar};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("layer {layer} data length {got} does not match shape {rows}x{cols}")]
    BadShape {
        layer: usize,
        got: usize,
        rows: usize,
        cols: usize,
    },
}

/// Multi-layer perceptron: alternating affine + ReLU, final layer affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S: Scalar> {
    pub weights: Vec<Array2<S>>,
    /// Row vectors, shape (1, out).
    pub biases: Vec<Array2<S>>,
}

/// Tape node ids of one set of parameter leaves.
#[derive(Debug, Clone)]
pub struct MlpTapeIds {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpTapeIds {
    pub fn all(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }
}

impl<S: Scalar> Mlp<S> {
    /// Weights from a truncated normal (stddev `1/sqrt(fan_in)`, cut at two
    /// stddev), biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = c::<S>(1.0 / (fan_in as f64).sqrt());
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                truncated_normal::<S, _>(rng) * std
            });
            weights.push(w);
            biases.push(Array2::zeros((1, fan_out)));
        }
        Mlp { weights, biases }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.weights[0].nrows()];
        sizes.extend(self.weights.iter().map(|w| w.ncols()));
        sizes
    }

    pub fn input_size(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_size(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    /// Straight-line forward pass, no tape. `x` is (batch, in).
    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        assert_eq!(x.ncols(), self.input_size(), "input width mismatch");
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if i != last {
                h.mapv_inplace(|v| v.max(S::zero()));
            }
        }
        h
    }

    /// Insert parameter leaves into a tape, once per training step.
    pub fn leaves(&self, tape: &mut Tape<S>) -> MlpTapeIds {
        MlpTapeIds {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Taped forward pass through previously inserted parameter leaves,
    /// reusable across multiple inputs in one tape.
    pub fn forward_on(&self, tape: &mut Tape<S>, ids: &MlpTapeIds, x: NodeId) -> NodeId {
        let last = ids.weights.len() - 1;
        let mut h = x;
        for i in 0..ids.weights.len() {
            let lin = tape.matmul(h, ids.weights[i]);
            h = tape.add_row(lin, ids.biases[i]);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Mutable references to every parameter tensor, weights then biases,
    /// matching the order of [`MlpTapeIds::all`].
    pub fn params_mut(&mut self) -> Vec<&mut Array2<S>> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .collect()
    }

    pub fn params(&self) -> Vec<&Array2<S>> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    /// Stable content hash for freeze assertions.
    pub fn param_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params() {
            for v in p.iter() {
                v.to_f64().unwrap().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            version: CHECKPOINT_VERSION,
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| LayerCheckpoint {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights: w.iter().map(|v| v.to_f64().unwrap()).collect(),
                    biases: b.iter().map(|v| v.to_f64().unwrap()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<Self, CheckpointError> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(ckpt.version));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, layer) in ckpt.layers.iter().enumerate() {
            if layer.weights.len() != layer.rows * layer.cols
                || layer.biases.len() != layer.cols
            {
                return Err(CheckpointError::BadShape {
                    layer: i,
                    got: layer.weights.len(),
                    rows: layer.rows,
                    cols: layer.cols,
                });
            }
            let w = Array2::from_shape_vec(
                (layer.rows, layer.cols),
                layer.weights.iter().map(|&v| c(v)).collect(),
            )
            .unwrap();
            let b = Array2::from_shape_vec(
                (1, layer.cols),
                layer.biases.iter().map(|&v| c(v)).collect(),
            )
            .unwrap();
            weights.push(w);
            biases.push(b);
        }
        Ok(Mlp { weights, biases })
    }
}

/// Standard normal truncated at two standard deviations.
fn truncated_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> S {
    loop {
        let v = S::sample_normal(rng);
        if v.abs() <= c(2.0) {
            return v;
        }
    }
}

/// Self-describing parameter checkpoint (JSON on disk).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[cfg(test)]
mod test {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::<f64>::new(&[3, 4, 2], &mut rng);
        for w in &mut net.weights {
            w.fill(0.0);
        }
        let y = net.forward(&array![[1.0, -2.0, 3.0]]);
        assert_eq!(y, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn identity_single_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::<f64>::new(&[2, 2], &mut rng);
        net.weights[0] = array![[1.0, 0.0], [0.0, 1.0]];
        let x = array![[0.3, -0.7]];
        assert_eq!(net.forward(&x), x);
    }

    #[test]
    fn taped_forward_matches_straight_line_reevaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::new(&[5, 8, 3], &mut rng);
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random::<f64>() - 0.5);

        // Independent straight-line re-evaluation.
        let mut expect = x.dot(&net.weights[0]) + &net.biases[0];
        expect.mapv_inplace(|v: f64| v.max(0.0));
        let expect = expect.dot(&net.weights[1]) + &net.biases[1];

        let mut tape = Tape::new();
        let ids = net.leaves(&mut tape);
        let xid = tape.leaf(x.clone());
        let y = net.forward_on(&mut tape, &ids, xid);
        let taped = tape.value(y);
        let plain = net.forward(&x);
        for ((a, b), c) in taped.iter().zip(expect.iter()).zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::new(&[100, 50], &mut rng);
        let std = (net.weights[0].mapv(|v| v * v).sum() / 5000.0).sqrt();
        // Truncation at 2 sigma shrinks the effective stddev slightly.
        assert!(std < 0.11 && std > 0.07, "std {std}");
        assert!(net.weights[0].iter().all(|v| v.abs() <= 0.2 + 1e-12));
        assert!(net.biases[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::new(&[4, 6, 2], &mut rng);
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let parsed: NetCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = Mlp::<f64>::from_checkpoint(&parsed).unwrap();
        assert_eq!(net, restored);
    }

    #[test]
    fn checkpoint_rejects_bad_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::new(&[2, 2], &mut rng);
        let mut ckpt = net.to_checkpoint();
        ckpt.version = 99;
        assert!(Mlp::<f64>::from_checkpoint(&ckpt).is_err());
    }
}
