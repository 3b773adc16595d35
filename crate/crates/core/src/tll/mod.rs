//! Two-level lattice (TLL) networks.
//!
//! A scalar TLL holds a linear layer `W x + b` with `N` rows (the local linear
//! functions) and `M` selector sets. Its output is the max over selector sets of
//! the min over the rows each set selects. A multi-output network stacks `m`
//! scalar TLLs that share the same input dimension, `N` and `M`.
//!
//! Row and group indices are zero-based in memory. File formats use one-based
//! indices and convert at the boundary (see [`crate::io`]).

mod relu;

use nalgebra::{DMatrix, DVector};

pub use relu::{max_network, min_network, Activation, Layer, ReluLayerStack};

use crate::error::{Error, Result};

/// One output of a TLL network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTll {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    selectors: Vec<Vec<usize>>,
}

impl ScalarTll {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, selectors: Vec<Vec<usize>>) -> Result<Self> {
        let n_rows = weights.nrows();
        if n_rows == 0 {
            return Err(Error::invalid("a TLL needs at least one local linear function"));
        }
        if bias.len() != n_rows {
            return Err(Error::dim("TLL bias", n_rows, bias.len()));
        }
        if selectors.is_empty() {
            return Err(Error::invalid("a TLL needs at least one selector set"));
        }
        for (j, set) in selectors.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::invalid(format!("selector set {} is empty", j + 1)));
            }
            if let Some(&bad) = set.iter().find(|&&i| i >= n_rows) {
                return Err(Error::invalid(format!(
                    "selector set {} references row {} but N = {}",
                    j + 1,
                    bad + 1,
                    n_rows
                )));
            }
        }
        Ok(Self {
            weights,
            bias,
            selectors,
        })
    }

    /// Input dimension `n`.
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Number of local linear functions `N`.
    pub fn n_linear(&self) -> usize {
        self.weights.nrows()
    }

    /// Number of selector (min) groups `M`.
    pub fn n_groups(&self) -> usize {
        self.selectors.len()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn selectors(&self) -> &[Vec<usize>] {
        &self.selectors
    }

    /// Value of local linear function `row` at `x`.
    ///
    /// Every evaluation path in the crate goes through this function so that
    /// the value of an identified active row is bit-identical to the network
    /// output it produced.
    #[inline]
    pub fn row_value(&self, row: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, xk) in x.iter().enumerate() {
            acc += self.weights[(row, k)] * xk;
        }
        acc + self.bias[row]
    }

    /// All `N` local linear function values at `x`.
    pub fn linear_values(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_linear()).map(|i| self.row_value(i, x)).collect()
    }

    /// Lattice evaluation: max over groups of min over selected rows.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let values = self.linear_values(x);
        Ok(self
            .selectors
            .iter()
            .map(|set| set.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Returns `(act, sel)`: the active row and the group realizing the max.
    /// Ties go to the lowest row index within a group and the lowest group index.
    pub fn active_index(&self, x: &[f64]) -> Result<(usize, usize)> {
        self.check_input(x)?;
        let values = self.linear_values(x);
        let mut best: Option<(usize, usize, f64)> = None;
        for (j, set) in self.selectors.iter().enumerate() {
            let mu = argmin_in(set, &values);
            let v = values[mu];
            match best {
                Some((_, _, bv)) if v <= bv => {}
                _ => best = Some((mu, j, v)),
            }
        }
        let (act, sel, _) = best.expect("selectors are non-empty");
        Ok((act, sel))
    }

    /// Lowest-value row of group `group` at `x` (ties to the lowest row index).
    pub fn group_argmin(&self, group: usize, x: &[f64]) -> usize {
        let values = self.linear_values(x);
        argmin_in(&self.selectors[group], &values)
    }

    /// Pointwise activation conditions for row `act` through group `sel`:
    /// `act` is a member of `sel` and attains its min, and every other group
    /// has some member no larger than `act`.
    pub fn check_activation(&self, x: &[f64], act: usize, sel: usize) -> bool {
        if x.len() != self.input_dim() || act >= self.n_linear() || sel >= self.n_groups() {
            return false;
        }
        let values = self.linear_values(x);
        let a = values[act];
        let survives_min = self.selectors[sel].contains(&act) && self.selectors[sel].iter().all(|&i| a <= values[i]);
        let survives_max = self
            .selectors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != sel)
            .all(|(_, set)| set.iter().any(|&i| values[i] <= a));
        survives_min && survives_max
    }

    /// Same architecture and selector sets; linear layer replaced.
    pub fn with_linear_layer(&self, weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.shape() != self.weights.shape() {
            return Err(Error::invalid("replacement linear layer changes the architecture"));
        }
        Self::new(weights, bias, self.selectors.clone())
    }

    pub fn lower_to_relu(&self) -> ReluLayerStack {
        relu::lower(self)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("TLL input", self.input_dim(), x.len()));
        }
        Ok(())
    }
}

fn argmin_in(set: &[usize], values: &[f64]) -> usize {
    let mut best = set[0];
    for &i in &set[1..] {
        if values[i] < values[best] || (values[i] == values[best] && i < best) {
            best = i;
        }
    }
    best
}

/// Active row and selector group for each output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub act: Vec<usize>,
    pub sel: Vec<usize>,
}

/// Multi-output TLL network.
#[derive(Debug, Clone, PartialEq)]
pub struct TllNetwork {
    outputs: Vec<ScalarTll>,
}

impl TllNetwork {
    pub fn new(outputs: Vec<ScalarTll>) -> Result<Self> {
        let first = outputs
            .first()
            .ok_or_else(|| Error::invalid("a TLL network needs at least one output"))?;
        let (n, big_n, m) = (first.input_dim(), first.n_linear(), first.n_groups());
        for (k, out) in outputs.iter().enumerate().skip(1) {
            if out.input_dim() != n || out.n_linear() != big_n || out.n_groups() != m {
                return Err(Error::invalid(format!(
                    "output {} has architecture (n={}, N={}, M={}) but output 1 has (n={}, N={}, M={})",
                    k + 1,
                    out.input_dim(),
                    out.n_linear(),
                    out.n_groups(),
                    n,
                    big_n,
                    m
                )));
            }
        }
        Ok(Self { outputs })
    }

    pub fn input_dim(&self) -> usize {
        self.outputs[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_linear(&self) -> usize {
        self.outputs[0].n_linear()
    }

    pub fn n_groups(&self) -> usize {
        self.outputs[0].n_groups()
    }

    pub fn outputs(&self) -> &[ScalarTll] {
        &self.outputs
    }

    pub fn output(&self, kappa: usize) -> &ScalarTll {
        &self.outputs[kappa]
    }

    pub fn eval_lattice(&self, x: &[f64]) -> Result<DVector<f64>> {
        let vals = self.outputs.iter().map(|o| o.eval(x)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn active_indices(&self, x: &[f64]) -> Result<ActivationPattern> {
        let mut act = Vec::with_capacity(self.output_dim());
        let mut sel = Vec::with_capacity(self.output_dim());
        for out in &self.outputs {
            let (a, s) = out.active_index(x)?;
            act.push(a);
            sel.push(s);
        }
        Ok(ActivationPattern { act, sel })
    }

    pub fn check_activation(&self, x: &[f64], pattern: &ActivationPattern) -> bool {
        pattern.act.len() == self.output_dim()
            && pattern.sel.len() == self.output_dim()
            && self
                .outputs
                .iter()
                .zip(pattern.act.iter().zip(&pattern.sel))
                .all(|(o, (&a, &s))| o.check_activation(x, a, s))
    }

    /// Stacked affine controller `x -> (row act_k of output k)(x)`.
    pub fn active_affine(&self, pattern: &ActivationPattern) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.input_dim();
        let m = self.output_dim();
        let mut w = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        for (k, out) in self.outputs.iter().enumerate() {
            let row = pattern.act[k];
            w.row_mut(k).copy_from(&out.weights().row(row));
            b[k] = out.bias()[row];
        }
        (w, b)
    }

    /// Replace every output's linear layer, keeping selectors.
    pub fn set_linear_layers(&self, layers: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        if layers.len() != self.output_dim() {
            return Err(Error::dim("linear layers", self.output_dim(), layers.len()));
        }
        let outputs = self
            .outputs
            .iter()
            .zip(layers)
            .map(|(o, (w, b))| o.with_linear_layer(w, b))
            .collect::<Result<Vec<_>>>()?;
        Self::new(outputs)
    }

    /// Same `n`, `m`, `N`, `M` and identical selector sets.
    pub fn same_architecture(&self, other: &TllNetwork) -> bool {
        self.input_dim() == other.input_dim()
            && self.output_dim() == other.output_dim()
            && self.n_linear() == other.n_linear()
            && self.n_groups() == other.n_groups()
    }

    pub fn same_selectors(&self, other: &TllNetwork) -> bool {
        self.output_dim() == other.output_dim()
            && self
                .outputs
                .iter()
                .zip(&other.outputs)
                .all(|(a, b)| a.selectors() == b.selectors())
    }

    pub fn lower_to_relu(&self) -> Vec<ReluLayerStack> {
        self.outputs.iter().map(ScalarTll::lower_to_relu).collect()
    }
}
