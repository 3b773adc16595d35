//! Discrete-time input-affine dynamics `x+ = f(x) + g(x) u`, closed-loop
//! simulation and the built-in model registry.

mod sampling;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use sampling::{sampled_lipschitz, sampled_sups, LipschitzEstimate, Sups, LIPSCHITZ_INFLATION};

use crate::error::{Error, Result};
use crate::linalg::{self, linspace};

type DriftFn = dyn Fn(&[f64]) -> DVector<f64> + Send + Sync;
type InputFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Where a Lipschitz constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    UserSupplied,
    /// Closed-form bound derived from the model's structure.
    Analytic,
    /// Grid difference quotients, inflated by [`LIPSCHITZ_INFLATION`].
    Sampled,
}

/// Built-in model description, kept alongside the closures so models can be
/// reported and re-created from config files.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Car {
        speed: f64,
        ts: f64,
    },
    Linear {
        a: DMatrix<f64>,
        c: DVector<f64>,
        g: DMatrix<f64>,
    },
    Custom,
}

#[derive(Clone)]
pub struct DynamicsModel {
    n: usize,
    m: usize,
    f: Arc<DriftFn>,
    g: Arc<InputFn>,
    l_f: f64,
    l_g: f64,
    provenance: Provenance,
    kind: ModelKind,
}

impl fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("l_f", &self.l_f)
            .field("l_g", &self.l_g)
            .field("provenance", &self.provenance)
            .field("kind", &self.kind)
            .finish()
    }
}

impl DynamicsModel {
    /// Arbitrary dynamics with user-supplied Lipschitz constants of `f` and `g`.
    pub fn new<F, G>(n: usize, m: usize, f: F, g: G, l_f: f64, l_g: f64) -> Result<Self>
    where
        F: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if n == 0 || m == 0 {
            return Err(Error::invalid("state and input dimensions must be positive"));
        }
        check_lipschitz(l_f, l_g)?;
        Ok(Self {
            n,
            m,
            f: Arc::new(f),
            g: Arc::new(g),
            l_f,
            l_g,
            provenance: Provenance::UserSupplied,
            kind: ModelKind::Custom,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn l_f(&self) -> f64 {
        self.l_f
    }

    pub fn l_g(&self) -> f64 {
        self.l_g
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn with_lipschitz(mut self, l_f: f64, l_g: f64, provenance: Provenance) -> Result<Self> {
        check_lipschitz(l_f, l_g)?;
        self.l_f = l_f;
        self.l_g = l_g;
        self.provenance = provenance;
        Ok(self)
    }

    /// Replaces the Lipschitz constants with grid estimates over `set`.
    pub fn with_sampled_lipschitz(self, set: &BoxSet, samples: usize) -> Result<Self> {
        let est = sampled_lipschitz(&self, set, samples)?;
        self.with_lipschitz(est.l_f, est.l_g, Provenance::Sampled)
    }

    pub fn f(&self, x: &[f64]) -> DVector<f64> {
        (self.f)(x)
    }

    pub fn g(&self, x: &[f64]) -> DMatrix<f64> {
        (self.g)(x)
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(Error::dim("state", self.n, x.len()));
        }
        if u.len() != self.m {
            return Err(Error::dim("input", self.m, u.len()));
        }
        Ok(self.f(x) + self.g(x) * DVector::from_column_slice(u))
    }

    /// Closed-loop trajectory of `steps` steps from `x0`.
    pub fn simulate<C>(&self, controller: C, x0: &[f64], steps: usize) -> Result<Trajectory>
    where
        C: Fn(&[f64]) -> Result<DVector<f64>>,
    {
        if steps == 0 {
            return Err(Error::invalid("simulation needs at least one step"));
        }
        if x0.len() != self.n {
            return Err(Error::dim("initial state", self.n, x0.len()));
        }
        let mut states = Vec::with_capacity(steps + 1);
        let mut inputs = Vec::with_capacity(steps);
        states.push(DVector::from_column_slice(x0));
        for i in 0..steps {
            let x = states[i].as_slice();
            let u = controller(x)?;
            let next = self.step(x, u.as_slice())?;
            inputs.push(u);
            states.push(next);
        }
        Ok(Trajectory { states, inputs })
    }
}

fn check_lipschitz(l_f: f64, l_g: f64) -> Result<()> {
    if !(l_f >= 0.0 && l_g >= 0.0 && l_f.is_finite() && l_g.is_finite()) {
        return Err(Error::invalid(format!(
            "Lipschitz constants must be finite and nonnegative (got L_f={l_f}, L_g={l_g})"
        )));
    }
    Ok(())
}

/// Planar car with constant speed `speed`, sampling period `ts` and yaw-rate input:
///
/// ```text
/// x1+ = x1 + V cos(x3) ts
/// x2+ = x2 + V sin(x3) ts
/// x3+ = x3 + ts u
/// ```
///
/// The Jacobian of `f` is the identity plus a third column of norm `V ts`, so
/// `L_f = 1 + V ts`. `g` is constant, so `L_g = 0`.
pub fn car_model(speed: f64, ts: f64) -> Result<DynamicsModel> {
    if !(speed > 0.0 && ts > 0.0) {
        return Err(Error::invalid(format!(
            "car model needs V > 0 and ts > 0 (got V={speed}, ts={ts})"
        )));
    }
    let f = move |x: &[f64]| {
        DVector::from_vec(vec![
            x[0] + speed * x[2].cos() * ts,
            x[1] + speed * x[2].sin() * ts,
            x[2],
        ])
    };
    let g = move |_: &[f64]| DMatrix::from_column_slice(3, 1, &[0.0, 0.0, ts]);
    let mut model = DynamicsModel::new(3, 1, f, g, 1.0 + speed * ts, 0.0)?;
    model.provenance = Provenance::Analytic;
    model.kind = ModelKind::Car { speed, ts };
    Ok(model)
}

/// `x+ = A x + c + G u` with constant `G`; `L_f = ||A||_2`, `L_g = 0`.
pub fn linear_model(a: DMatrix<f64>, c: DVector<f64>, g: DMatrix<f64>) -> Result<DynamicsModel> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dim("linear model A columns", n, a.ncols()));
    }
    if c.len() != n {
        return Err(Error::dim("linear model c", n, c.len()));
    }
    if g.nrows() != n {
        return Err(Error::dim("linear model G rows", n, g.nrows()));
    }
    let m = g.ncols();
    let l_f = linalg::spectral_norm(&a);
    let (fa, fc, gg) = (a.clone(), c.clone(), g.clone());
    let f = move |x: &[f64]| &fa * DVector::from_column_slice(x) + &fc;
    let gfn = move |_: &[f64]| gg.clone();
    let mut model = DynamicsModel::new(n, m, f, gfn, l_f, 0.0)?;
    model.provenance = Provenance::Analytic;
    model.kind = ModelKind::Linear { a, c, g };
    Ok(model)
}

/// Axis-aligned box `{x : lower <= x <= upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::dim("box bounds", self.lower.len(), self.upper.len()));
        }
        if self.lower.is_empty() {
            return Err(Error::invalid("box has dimension zero"));
        }
        if let Some(i) = (0..self.dim()).find(|&i| !(self.lower[i] <= self.upper[i])) {
            return Err(Error::invalid(format!(
                "box lower bound exceeds upper bound on axis {}",
                i + 1
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, &v)| self.lower[i] <= v && v <= self.upper[i])
    }

    pub fn has_interior(&self) -> bool {
        (0..self.dim()).all(|i| self.lower[i] < self.upper[i])
    }

    pub fn is_subset_of(&self, other: &BoxSet) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| other.lower[i] <= self.lower[i] && self.upper[i] <= other.upper[i])
    }

    /// `sup ||x||` over the box, attained at the farthest corner.
    pub fn ext(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.lower[i].abs().max(self.upper[i].abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| 0.5 * (self.lower[i] + self.upper[i])).collect()
    }

    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.upper[i]
                        } else {
                            self.lower[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Tensor grid with `k` points per axis, in lexicographic order
    /// (first coordinate slowest).
    pub fn grid(&self, k: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim())
            .map(|i| linspace(self.lower[i], self.upper[i], k))
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; self.dim()];
        if total == 0 {
            return out;
        }
        loop {
            out.push(idx.iter().enumerate().map(|(i, &j)| axes[i][j]).collect());
            let mut axis = self.dim();
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < axes[axis].len() {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

/// Closed-loop trajectory: `states.len() == inputs.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// First step index `i >= 1` whose state satisfies `pred`.
    pub fn first_step_where(&self, pred: impl Fn(&[f64]) -> bool) -> Option<usize> {
        self.states
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, s)| pred(s.as_slice()))
            .map(|(i, _)| i)
    }

    /// Largest deviation between recorded states and a re-application of the
    /// dynamics to the recorded inputs.
    pub fn reconstruction_error(&self, model: &DynamicsModel) -> Result<f64> {
        let mut worst = 0.0f64;
        for (i, u) in self.inputs.iter().enumerate() {
            let next = model.step(self.states[i].as_slice(), u.as_slice())?;
            worst = worst.max((next - &self.states[i + 1]).amax());
        }
        Ok(worst)
    }
}
