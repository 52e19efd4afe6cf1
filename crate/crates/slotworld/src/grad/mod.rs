//! Minimal reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes;
//! [`Tape::backward`] walks the list once in reverse, accumulating gradients
//! additively at fan-out. All values are `(rows, cols)` matrices; batch
//! dimension first.

mod adam;
mod net;

pub use adam::Adam;
pub use net::{CheckpointError, Mlp, MlpTapeIds, NetCheckpoint, CHECKPOINT_VERSION};

use crate::scalar::{c, Scalar};
use ndarray::{s, Array2, Axis};
use std::rc::Rc;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("loss node must be a 1x1 scalar, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// A differentiable operation with hand-written forward and backward.
pub trait CustomOp<S: Scalar> {
    fn forward(&self, inputs: &[&Array2<S>]) -> Array2<S>;
    /// Gradients w.r.t. each input, given the upstream output gradient.
    fn backward(
        &self,
        inputs: &[&Array2<S>],
        output: &Array2<S>,
        grad_out: &Array2<S>,
    ) -> Vec<Array2<S>>;
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// (n,m) + broadcast (1,m)
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Relu(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Clip(NodeId, S, S),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    /// Sum consecutive groups of `g` rows: (g*n, m) -> (n, m).
    SumRowGroups(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Custom(Rc<dyn CustomOp<S>>, Vec<NodeId>),
}

struct Node<S: Scalar> {
    value: Array2<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<S> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let sh = self.nodes[id].value.dim();
        (sh.0, sh.1)
    }

    pub fn leaf(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// Row-broadcast add: `(n,m) + (1,m)`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(S::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    pub fn clip(&mut self, a: NodeId, lo: S, hi: S) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(lo).min(hi));
        self.push(v, Op::Clip(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&id| self.nodes[id].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum() / c(n as f64));
        self.push(v, Op::MeanAll(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let col = self.nodes[a].value.sum_axis(Axis(1));
        let n = col.len();
        let v = col.into_shape_with_order((n, 1)).unwrap();
        self.push(v, Op::SumCols(a))
    }

    pub fn sum_row_groups(&mut self, a: NodeId, group: usize) -> NodeId {
        let src = &self.nodes[a].value;
        let (rows, cols) = src.dim();
        assert_eq!(rows % group, 0, "row count must divide by group size");
        let out_rows = rows / group;
        let mut v = Array2::zeros((out_rows, cols));
        for r in 0..rows {
            let o = r / group;
            for col in 0..cols {
                v[[o, col]] += src[[r, col]];
            }
        }
        self.push(v, Op::SumRowGroups(a, group))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let src = &self.nodes[a].value;
        let cols = src.ncols();
        let mut v = Array2::zeros((idx.len(), cols));
        for (o, &r) in idx.iter().enumerate() {
            v.row_mut(o).assign(&src.row(r));
        }
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp<S>>, inputs: &[NodeId]) -> NodeId {
        let views: Vec<&Array2<S>> = inputs.iter().map(|&id| &self.nodes[id].value).collect();
        let v = op.forward(&views);
        self.push(v, Op::Custom(op, inputs.to_vec()))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// nodes not on a path to the loss have `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>, GradError> {
        let (r, cc) = self.shape(loss);
        if (r, cc) != (1, 1) {
            return Err(GradError::NonScalarLoss(r, cc));
        }
        let mut grads: Vec<Option<Array2<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), S::one()));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: NodeId, g: &Array2<S>, grads: &mut [Option<Array2<S>>]) {
        let add_to = |grads: &mut [Option<Array2<S>>], target: NodeId, delta: Array2<S>| {
            match &mut grads[target] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[*b].value.t());
                let db = self.nodes[*a].value.t().dot(g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let summed = g.sum_axis(Axis(0));
                let cols = summed.len();
                add_to(grads, *row, summed.into_shape_with_order((1, cols)).unwrap());
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[*b].value);
                add_to(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, k) => add_to(grads, *a, g.mapv(|x| x * *k)),
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| {
                    if x > S::zero() {
                        S::one()
                    } else {
                        S::zero()
                    }
                });
                add_to(grads, *a, g * &mask);
            }
            Op::Softplus(a) => {
                let d = self.nodes[*a].value.mapv(sigmoid);
                add_to(grads, *a, g * &d);
            }
            Op::Square(a) => {
                let two = c::<S>(2.0);
                add_to(grads, *a, g * &self.nodes[*a].value.mapv(|x| x * two));
            }
            Op::Abs(a) => {
                let sign = self.nodes[*a].value.mapv(|x| {
                    if x > S::zero() {
                        S::one()
                    } else if x < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                });
                add_to(grads, *a, g * &sign);
            }
            Op::Clip(a, lo, hi) => {
                let src = &self.nodes[*a].value;
                let mask = src.mapv(|x| {
                    if x >= *lo && x <= *hi {
                        S::one()
                    } else {
                        S::zero()
                    }
                });
                add_to(grads, *a, g * &mask);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p].value.ncols();
                    let slice = g.slice(s![.., start..start + w]).to_owned();
                    add_to(grads, p, slice);
                    start += w;
                }
            }
            Op::SliceCols(a, cstart, cend) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Array2::zeros((rows, cols));
                da.slice_mut(s![.., *cstart..*cend]).assign(g);
                add_to(grads, *a, da);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                add_to(grads, *a, Array2::from_elem((rows, cols), g[[0, 0]]));
            }
            Op::MeanAll(a) => {
                let (rows, cols) = self.shape(*a);
                let k = g[[0, 0]] / c((rows * cols) as f64);
                add_to(grads, *a, Array2::from_elem((rows, cols), k));
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let val = g[[r, 0]];
                    for col in 0..cols {
                        da[[r, col]] = val;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SumRowGroups(a, group) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let o = r / group;
                    for col in 0..cols {
                        da[[r, col]] = g[[o, col]];
                    }
                }
                add_to(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Array2::zeros((rows, cols));
                for (o, &r) in idx.iter().enumerate() {
                    let mut row = da.row_mut(r);
                    row += &g.row(o);
                }
                add_to(grads, *a, da);
            }
            Op::Custom(op, inputs) => {
                let views: Vec<&Array2<S>> =
                    inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let input_grads = op.backward(&views, &self.nodes[id].value, g);
                assert_eq!(input_grads.len(), inputs.len());
                for (&i, d) in inputs.iter().zip(input_grads) {
                    add_to(grads, i, d);
                }
            }
        }
    }
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. a node; zero-shaped `None` means the node
    /// did not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Array2<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the node's shape when disconnected.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Array2<S> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn softplus<S: Scalar>(x: S) -> S {
    // Numerically stable: log(1 + e^x) = max(x, 0) + log(1 + e^-|x|).
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod test {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_gradient_is_input() {
        // loss = w . x  =>  dloss/dw = x
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(array![[2.0, -1.0]]);
        let x = tape.leaf(array![[3.0], [4.0]]);
        let y = tape.matmul(w, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &array![[3.0, 4.0]]);
    }

    #[test]
    fn fanout_grads_accumulate() {
        // loss = x*x via two uses of the same node: d/dx (x * x) = 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[3.0]]);
        let y = tape.mul(x, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        assert!(matches!(
            tape.backward(x),
            Err(GradError::NonScalarLoss(1, 2))
        ));
    }

    #[test]
    fn relu_subgradient_zero_at_kink() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[0.0, -1.0, 2.0]]);
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[1.0], [2.0], [3.0]]);
        let y = tape.gather_rows(x, &[2, 2, 0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[1.0], [0.0], [2.0]]);
    }

    #[test]
    fn sum_row_groups_forward_and_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        let y = tape.sum_row_groups(x, 2);
        assert_eq!(tape.value(y), &array![[4.0, 6.0], [12.0, 14.0]]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Array2::from_elem((4, 2), 1.0));
    }
}
