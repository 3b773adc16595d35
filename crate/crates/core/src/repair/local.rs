//! Minimal change of the active rows so that the counterexample leaves the
//! unsafe set.
//!
//! The complement of `{G x >= h}` is a union of halfspaces, so one program is
//! solved per row `i` of `G`, each requiring `G_i x' <= h_i - margin` for the
//! successor states `x'` of the counterexample under the repaired affine
//! controller. The first successor is affine in the rows. Later successors
//! are not, and are handled by re-linearizing around the previous solution
//! until the true rollout meets the margin.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::RowBudget;
use crate::bounds::Polytope;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::socp::{AffineExpr, ConvexProgram, SolverOptions, Status, Var};

/// Active rows of every output, stacked: row `k` of `weights` and entry `k`
/// of `bias` drive output `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRows {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl AffineRows {
    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        (0..self.bias.len())
            .map(|k| self.weights.row(k).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias[k])
            .collect::<Vec<_>>()
            .into()
    }

    /// `sum_k ||w_k - w'_k|| + |b_k - b'_k|`
    pub fn distance(&self, other: &AffineRows) -> f64 {
        (0..self.bias.len())
            .map(|k| (self.weights.row(k) - other.weights.row(k)).norm() + (self.bias[k] - other.bias[k]).abs())
            .sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let (m, n) = self.weights.shape();
        let mut v = Vec::with_capacity(m * (n + 1));
        for k in 0..m {
            v.extend(self.weights.row(k).iter());
            v.push(self.bias[k]);
        }
        v
    }

    fn unflatten(v: &[f64], m: usize, n: usize) -> Self {
        let mut weights = DMatrix::zeros(m, n);
        let mut bias = DVector::zeros(m);
        for k in 0..m {
            for j in 0..n {
                weights[(k, j)] = v[k * (n + 1) + j];
            }
            bias[k] = v[k * (n + 1) + n];
        }
        Self { weights, bias }
    }
}

/// Inputs shared by every per-halfspace program.
#[derive(Debug, Clone)]
pub struct LocalSetup<'a> {
    pub model: &'a DynamicsModel,
    pub x_ce: &'a [f64],
    pub original: AffineRows,
    pub budget: Option<RowBudget>,
    pub unsafe_set: &'a Polytope,
    pub margin: f64,
    /// Number of successor states constrained; 1 gives the plain one-step program.
    pub horizon: usize,
    pub solver: SolverOptions,
    pub max_rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRepair {
    pub rows: AffineRows,
    /// Zero-based row of the unsafe polytope whose complement was used.
    pub halfspace: usize,
    pub objective: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptStatus {
    Feasible,
    Infeasible,
    /// Re-linearization did not reach the margin within the round limit.
    NotConverged,
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfspaceAttempt {
    pub halfspace: usize,
    pub status: AttemptStatus,
    pub objective: Option<f64>,
    pub rounds: usize,
    /// Largest `G_i x_k - h_i + margin` over the constrained successors of the
    /// last candidate; `<= 0` means the margin is met.
    pub worst_slack: Option<f64>,
}

/// Re-linearization stops once consecutive feasible iterates differ by less
/// than this, relative to the size of the rows.
const STEP_TOL: f64 = 1e-7;

/// Successors `x_1..x_steps` of `x0` under `u(x) = W x + b`.
fn rollout(model: &DynamicsModel, rows: &AffineRows, x0: &[f64], steps: usize) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(steps);
    let mut x = DVector::from_column_slice(x0);
    for _ in 0..steps {
        let next = model.step(x.as_slice(), rows.eval(x.as_slice()).as_slice())?;
        out.push(next.clone());
        x = next;
    }
    Ok(out)
}

fn slacks(setup: &LocalSetup, halfspace: usize, rows: &AffineRows) -> Result<Vec<f64>> {
    Ok(rollout(setup.model, rows, setup.x_ce, setup.horizon)?
        .iter()
        .map(|x| setup.unsafe_set.row_slack(halfspace, x.as_slice()) + setup.margin)
        .collect())
}

/// Affine model of the slacks of successors `2..=horizon` around `anchor`.
#[derive(Debug, Clone)]
pub struct Linearization {
    anchor: Vec<f64>,
    values: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

fn linearize(setup: &LocalSetup, halfspace: usize, anchor: &AffineRows) -> Result<Linearization> {
    let (m, n) = anchor.weights.shape();
    let theta = anchor.flatten();
    let values = slacks(setup, halfspace, anchor)?[1..].to_vec();
    let mut grads = vec![vec![0.0; theta.len()]; values.len()];
    for j in 0..theta.len() {
        let h = 1e-6 * theta[j].abs().max(1.0);
        let mut plus = theta.clone();
        plus[j] += h;
        let mut minus = theta.clone();
        minus[j] -= h;
        let sp = slacks(setup, halfspace, &AffineRows::unflatten(&plus, m, n))?;
        let sm = slacks(setup, halfspace, &AffineRows::unflatten(&minus, m, n))?;
        for (k, grad) in grads.iter_mut().enumerate() {
            grad[j] = (sp[k + 1] - sm[k + 1]) / (2.0 * h);
        }
    }
    Ok(Linearization {
        anchor: theta,
        values,
        grads,
    })
}

/// Program for one halfspace of the complement. Variables are `(w_k, b_k)` for
/// every output `k`, returned in that order.
pub fn build_local_program(
    setup: &LocalSetup,
    halfspace: usize,
    lin: Option<&Linearization>,
) -> Result<(ConvexProgram, Vec<(Var, Var)>)> {
    let n = setup.model.state_dim();
    let m = setup.model.input_dim();
    if setup.original.weights.shape() != (m, n) || setup.original.bias.len() != m {
        return Err(Error::invalid("active rows do not match the model dimensions"));
    }
    if halfspace >= setup.unsafe_set.n_rows() {
        return Err(Error::invalid(format!(
            "halfspace {} out of range (unsafe set has {} rows)",
            halfspace + 1,
            setup.unsafe_set.n_rows()
        )));
    }
    let x = setup.x_ce;
    let mut p = ConvexProgram::new();
    let vars: Vec<(Var, Var)> = (0..m)
        .map(|k| {
            (
                p.add_variable(format!("w{}", k + 1), n),
                p.add_variable(format!("b{}", k + 1), 1),
            )
        })
        .collect();

    for (k, &(w, b)) in vars.iter().enumerate() {
        let w0 = setup.original.weights.row(k).transpose();
        p.add_norm_objective(AffineExpr::var(w).plus_constant(&(-w0)))?;
        p.add_norm_objective(AffineExpr::var(b).plus_scalar(-setup.original.bias[k]))?;
        if let Some(budget) = &setup.budget {
            budget.add_caps(&mut p, AffineExpr::var(w), AffineExpr::var(b), &format!("{}", k + 1))?;
        }
    }

    // G_i (f(x) + g(x) (W x + b)) <= h_i - margin
    let gi = DVector::from_vec(setup.unsafe_set.row(halfspace));
    let v = setup.model.g(x).transpose() * &gi;
    let mut step1 = AffineExpr::scalar(gi.dot(&setup.model.f(x)) - setup.unsafe_set.h()[halfspace] + setup.margin);
    for (k, &(w, b)) in vars.iter().enumerate() {
        let row = DMatrix::from_fn(1, n, |_, j| v[k] * x[j]);
        step1 = step1.term(row, w).term(DMatrix::from_element(1, 1, v[k]), b);
    }
    p.add_ineq(step1)?;

    if let Some(lin) = lin {
        for (value, grad) in lin.values.iter().zip(&lin.grads) {
            let offset: f64 = grad.iter().zip(&lin.anchor).map(|(g, a)| g * a).sum();
            let mut e = AffineExpr::scalar(value - offset);
            for (k, &(w, b)) in vars.iter().enumerate() {
                let gw = &grad[k * (n + 1)..k * (n + 1) + n];
                e = e
                    .term(DMatrix::from_row_slice(1, n, gw), w)
                    .term(DMatrix::from_element(1, 1, grad[k * (n + 1) + n]), b);
            }
            p.add_ineq(e)?;
        }
    }
    Ok((p, vars))
}

fn extract(sol: &crate::socp::Solution, vars: &[(Var, Var)], n: usize) -> AffineRows {
    let m = vars.len();
    let mut weights = DMatrix::zeros(m, n);
    let mut bias = DVector::zeros(m);
    for (k, &(w, b)) in vars.iter().enumerate() {
        weights.row_mut(k).copy_from(&sol.value(w).transpose());
        bias[k] = sol.value(b)[0];
    }
    AffineRows { weights, bias }
}

/// Solves the program for one halfspace, re-linearizing when `horizon > 1`.
pub fn solve_halfspace(setup: &LocalSetup, halfspace: usize) -> Result<(HalfspaceAttempt, Option<LocalRepair>)> {
    let n = setup.model.state_dim();
    let accept = setup.solver.tol;
    let mut anchor = setup.original.clone();
    let mut attempt = HalfspaceAttempt {
        halfspace,
        status: AttemptStatus::NotConverged,
        objective: None,
        rounds: 0,
        worst_slack: None,
    };
    let mut best: Option<LocalRepair> = None;
    for round in 1..=setup.max_rounds.max(1) {
        attempt.rounds = round;
        let lin = if setup.horizon > 1 {
            Some(linearize(setup, halfspace, &anchor)?)
        } else {
            None
        };
        let (program, vars) = build_local_program(setup, halfspace, lin.as_ref())?;
        let sol = program.solve(&setup.solver);
        match sol.status {
            Status::Optimal => {}
            Status::Infeasible => {
                attempt.status = AttemptStatus::Infeasible;
                return Ok((attempt, None));
            }
            Status::Unbounded | Status::MaxIter => {
                attempt.status = AttemptStatus::SolverFailure;
                return Ok((attempt, None));
            }
        }
        let rows = extract(&sol, &vars, n);
        let worst = slacks(setup, halfspace, &rows)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        attempt.worst_slack = Some(worst);
        attempt.objective = Some(rows.distance(&setup.original));
        let moved = rows.distance(&anchor);
        let feasible = worst <= accept;
        if feasible {
            let objective = rows.distance(&setup.original);
            if best.as_ref().is_none_or(|b: &LocalRepair| objective <= b.objective) {
                best = Some(LocalRepair {
                    rows: rows.clone(),
                    halfspace,
                    objective,
                    rounds: round,
                });
            }
            // a linearized step can land strictly inside the true feasible
            // set, so keep going until the iterates settle
            if setup.horizon == 1
                || (round > 1 && moved <= STEP_TOL * (1.0 + rows.flatten().iter().map(|v| v.abs()).sum::<f64>()))
            {
                break;
            }
        }
        anchor = rows;
    }
    if let Some(b) = &best {
        attempt.status = AttemptStatus::Feasible;
        attempt.objective = Some(b.objective);
        attempt.worst_slack = Some(
            slacks(setup, halfspace, &b.rows)?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Ok((attempt, best))
}

/// Solves every halfspace in parallel and keeps the cheapest feasible repair
/// (lowest halfspace index on ties).
pub fn solve_local(setup: &LocalSetup) -> Result<(Vec<HalfspaceAttempt>, Option<LocalRepair>)> {
    if setup.horizon == 0 {
        return Err(Error::invalid("repair horizon must be positive"));
    }
    if !(setup.margin > 0.0) {
        return Err(Error::invalid("margin must be positive"));
    }
    let results = (0..setup.unsafe_set.n_rows())
        .into_par_iter()
        .map(|i| solve_halfspace(setup, i))
        .collect::<Result<Vec<_>>>()?;
    let mut attempts = Vec::with_capacity(results.len());
    let mut best: Option<LocalRepair> = None;
    for (attempt, repair) in results {
        attempts.push(attempt);
        if let Some(r) = repair {
            if best.as_ref().is_none_or(|b| r.objective < b.objective) {
                best = Some(r);
            }
        }
    }
    Ok((attempts, best))
}
