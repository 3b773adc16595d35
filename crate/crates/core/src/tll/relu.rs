//! Explicit ReLU layer stacks and the lowering of a scalar TLL into one.
//!
//! Min and max of two values use the gadgets
//! `min(a, b) = relu(a) - relu(-a) - relu(a - b)` and
//! `max(a, b) = relu(a) - relu(-a) + relu(b - a)`, arranged in a balanced
//! binary tree. The linear read-out of each gadget level is folded into the
//! affine map of the next layer.

use nalgebra::{DMatrix, DVector};

use super::ScalarTll;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluLayerStack {
    layers: Vec<Layer>,
}

impl ReluLayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layer stack is empty"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::dim("layer bias", layer.weight.nrows(), layer.bias.len()));
            }
            if k > 0 && layers[k - 1].weight.nrows() != layer.weight.ncols() {
                return Err(Error::dim(
                    "layer composition",
                    layers[k - 1].weight.nrows(),
                    layer.weight.ncols(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("layer stack input", self.input_dim(), x.len()));
        }
        let mut h = DVector::from_column_slice(x);
        for layer in &self.layers {
            h = &layer.weight * h + &layer.bias;
            if layer.activation == Activation::Relu {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy)]
enum Op {
    Min,
    Max,
}

/// Tracks the logical values `v = map * h + offset`, where `h` is the output of
/// the last emitted layer (or the network input before any layer is emitted).
struct Lowering {
    layers: Vec<Layer>,
    map: DMatrix<f64>,
    offset: DVector<f64>,
}

impl Lowering {
    fn new(map: DMatrix<f64>, offset: DVector<f64>) -> Self {
        Self {
            layers: Vec::new(),
            map,
            offset,
        }
    }

    /// Applies one level of pairwise `op` inside every group. Returns the groups
    /// re-indexed into the new logical vector.
    fn level(&mut self, groups: &[Vec<usize>], op: Op) -> Vec<Vec<usize>> {
        let n_logical = self.map.nrows();
        // (hidden row coefficients over logical values), then read-out per new value
        let mut hidden: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut readout: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut next_groups = Vec::with_capacity(groups.len());

        for group in groups {
            let mut next = Vec::with_capacity(group.len().div_ceil(2));
            for chunk in group.chunks(2) {
                let a = chunk[0];
                let h0 = hidden.len();
                hidden.push(vec![(a, 1.0)]);
                hidden.push(vec![(a, -1.0)]);
                let mut out = vec![(h0, 1.0), (h0 + 1, -1.0)];
                if let [_, b] = *chunk {
                    match op {
                        Op::Min => {
                            hidden.push(vec![(a, 1.0), (b, -1.0)]);
                            out.push((h0 + 2, -1.0));
                        }
                        Op::Max => {
                            hidden.push(vec![(b, 1.0), (a, -1.0)]);
                            out.push((h0 + 2, 1.0));
                        }
                    }
                }
                next.push(readout.len());
                readout.push(out);
            }
            next_groups.push(next);
        }

        let mut pre = DMatrix::zeros(hidden.len(), n_logical);
        for (r, coeffs) in hidden.iter().enumerate() {
            for &(c, v) in coeffs {
                pre[(r, c)] += v;
            }
        }
        let mut post = DMatrix::zeros(readout.len(), hidden.len());
        for (r, coeffs) in readout.iter().enumerate() {
            for &(c, v) in coeffs {
                post[(r, c)] += v;
            }
        }

        self.layers.push(Layer {
            weight: &pre * &self.map,
            bias: &pre * &self.offset,
            activation: Activation::Relu,
        });
        self.offset = DVector::zeros(post.nrows());
        self.map = post;
        next_groups
    }

    fn reduce(&mut self, mut groups: Vec<Vec<usize>>, op: Op) -> Vec<Vec<usize>> {
        while groups.iter().any(|g| g.len() > 1) {
            groups = self.level(&groups, op);
        }
        groups
    }

    /// Emits the read-out of logical value `index`.
    fn finish(mut self, index: usize) -> ReluLayerStack {
        self.layers.push(Layer {
            weight: self.map.rows(index, 1).into_owned(),
            bias: self.offset.rows(index, 1).into_owned(),
            activation: Activation::Linear,
        });
        ReluLayerStack::new(self.layers).expect("lowering emits composable layers")
    }
}

pub(super) fn lower(tll: &ScalarTll) -> ReluLayerStack {
    let mut lowering = Lowering::new(tll.weights().clone(), tll.bias().clone());
    let mins = lowering.reduce(tll.selectors().to_vec(), Op::Min);
    let group_outputs: Vec<usize> = mins.into_iter().map(|g| g[0]).collect();
    let top = lowering.reduce(vec![group_outputs], Op::Max)[0][0];
    lowering.finish(top)
}

/// `k`-input network computing the minimum of its inputs.
pub fn min_network(k: usize) -> ReluLayerStack {
    gadget_network(k, Op::Min)
}

/// `k`-input network computing the maximum of its inputs.
pub fn max_network(k: usize) -> ReluLayerStack {
    gadget_network(k, Op::Max)
}

fn gadget_network(k: usize, op: Op) -> ReluLayerStack {
    assert!(k > 0, "min/max network needs at least one input");
    let mut lowering = Lowering::new(DMatrix::identity(k, k), DVector::zeros(k));
    let top = lowering.reduce(vec![(0..k).collect()], op)[0][0];
    lowering.finish(top)
}
