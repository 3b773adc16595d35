//! Re-activation of the repaired rows.
//!
//! After the local step the repaired row must still be the one the lattice
//! selects at the counterexample: it has to stay the minimum of its own group,
//! and every other group needs some member at or below it. For the other
//! groups the member chosen is the one that was lowest before repair.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::local::AffineRows;
use super::RowBudget;
use crate::error::{Error, Result};
use crate::socp::{AffineExpr, ConvexProgram, SolverOptions, Status, Var};
use crate::tll::{ActivationPattern, TllNetwork};

/// For each output, group `j != sel` mapped to the row of group `j` with the
/// smallest value at `x` (lowest index on ties).
pub fn choose_iota(net: &TllNetwork, x: &[f64], pattern: &ActivationPattern) -> Vec<BTreeMap<usize, usize>> {
    net.outputs()
        .iter()
        .zip(&pattern.sel)
        .map(|(out, &sel)| {
            (0..out.n_groups())
                .filter(|&j| j != sel)
                .map(|j| (j, out.group_argmin(j, x)))
                .collect()
        })
        .collect()
}

/// Rows of one output that enter the program, in increasing order.
fn involved_rows(net: &TllNetwork, k: usize, pattern: &ActivationPattern, iota: &BTreeMap<usize, usize>) -> Vec<usize> {
    let out = net.output(k);
    let mut rows: Vec<usize> = out.selectors()[pattern.sel[k]].clone();
    rows.push(pattern.act[k]);
    rows.extend(iota.values().copied());
    rows.sort_unstable();
    rows.dedup();
    rows
}

pub struct GlobalProgram {
    pub program: ConvexProgram,
    /// Per output: `(row, weight variable, bias variable)` for every row the
    /// program may move. All other rows keep their values.
    pub rows: Vec<Vec<(usize, Var, Var)>>,
}

/// Minimal Frobenius change of every linear layer such that, at `x`, the
/// repaired rows are the minimum of their selected group and every other
/// group's chosen row lies below them. `margin` separates the two sides so
/// that tie-breaking cannot undo the activation. With a `budget`, every moved
/// row also respects the per-row caps.
pub fn build_global_program(
    net: &TllNetwork,
    x: &[f64],
    pattern: &ActivationPattern,
    local: &AffineRows,
    iota: &[BTreeMap<usize, usize>],
    budget: Option<&RowBudget>,
    margin: f64,
) -> Result<GlobalProgram> {
    let n = net.input_dim();
    let m = net.output_dim();
    if x.len() != n {
        return Err(Error::dim("counterexample", n, x.len()));
    }
    if pattern.act.len() != m || pattern.sel.len() != m || iota.len() != m {
        return Err(Error::dim("activation pattern", m, pattern.act.len()));
    }
    if local.weights.shape() != (m, n) || local.bias.len() != m {
        return Err(Error::invalid("repaired rows do not match the network"));
    }
    let xv = DMatrix::from_row_slice(1, n, x);
    let mut p = ConvexProgram::new();
    let mut all_rows = Vec::with_capacity(m);

    for k in 0..m {
        let out = net.output(k);
        let (act, sel) = (pattern.act[k], pattern.sel[k]);
        if act >= out.n_linear() || sel >= out.n_groups() || !out.selectors()[sel].contains(&act) {
            return Err(Error::invalid(format!(
                "activation pattern is inconsistent for output {}",
                k + 1
            )));
        }
        let rows = involved_rows(net, k, pattern, &iota[k]);
        let vars: Vec<(usize, Var, Var)> = rows
            .iter()
            .map(|&i| {
                (
                    i,
                    p.add_variable(format!("W{}_{}", k + 1, i + 1), n),
                    p.add_variable(format!("b{}_{}", k + 1, i + 1), 1),
                )
            })
            .collect();
        let var_of = |i: usize| vars.iter().find(|v| v.0 == i).map(|v| (v.1, v.2)).unwrap();
        let value_at = |i: usize| {
            let (w, b) = var_of(i);
            AffineExpr::zeros(1)
                .term(xv.clone(), w)
                .term(DMatrix::from_element(1, 1, 1.0), b)
        };

        // ||W - W'||_F + ||b - b'|| restricted to the rows that may move
        let mut dw = AffineExpr::zeros(rows.len() * n);
        let mut db = AffineExpr::zeros(rows.len());
        let mut w0 = DVector::zeros(rows.len() * n);
        let mut b0 = DVector::zeros(rows.len());
        for (r, &(i, w, b)) in vars.iter().enumerate() {
            let mut place = DMatrix::zeros(rows.len() * n, n);
            place.view_mut((r * n, 0), (n, n)).fill_with_identity();
            dw = dw.term(place, w);
            let mut place_b = DMatrix::zeros(rows.len(), 1);
            place_b[(r, 0)] = 1.0;
            db = db.term(place_b, b);
            w0.rows_mut(r * n, n).copy_from(&out.weights().row(i).transpose());
            b0[r] = out.bias()[i];
        }
        p.add_norm_objective(dw.plus_constant(&(-w0)))?;
        p.add_norm_objective(db.plus_constant(&(-b0)))?;

        // pin the repaired row
        let (wa, ba) = var_of(act);
        p.add_eq(AffineExpr::var(wa).plus_constant(&(-local.weights.row(k).transpose())))?;
        p.add_eq(AffineExpr::var(ba).plus_scalar(-local.bias[k]))?;
        let active_value = local.weights.row(k).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + local.bias[k];

        for &i in &out.selectors()[sel] {
            if i != act {
                // active + margin <= l_i(x)
                p.add_ineq(value_at(i).scaled(-1.0).plus_scalar(active_value + margin))?;
            }
        }
        for (&j, &i) in &iota[k] {
            if out.selectors()[j].contains(&act) {
                // the repaired row is itself a member, so the group minimum
                // cannot exceed it
                continue;
            }
            // l_iota(x) <= active - margin
            p.add_ineq(value_at(i).plus_scalar(margin - active_value))?;
        }

        if let Some(budget) = budget {
            for &(i, w, b) in &vars {
                if i != act {
                    budget.add_caps(
                        &mut p,
                        AffineExpr::var(w),
                        AffineExpr::var(b),
                        &format!("{}_{}", k + 1, i + 1),
                    )?;
                }
            }
        }
        all_rows.push(vars);
    }
    Ok(GlobalProgram {
        program: p,
        rows: all_rows,
    })
}

#[derive(Debug, Clone)]
pub enum GlobalOutcome {
    Solved { network: TllNetwork, objective: f64 },
    Infeasible,
    SolverFailure(Status),
}

/// Solves the program and writes the moved rows back. The repaired rows are
/// copied from `local` exactly rather than from the solver output.
pub fn solve_global(
    net: &TllNetwork,
    gp: &GlobalProgram,
    pattern: &ActivationPattern,
    local: &AffineRows,
    opts: &SolverOptions,
) -> Result<GlobalOutcome> {
    let sol = gp.program.solve(opts);
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible => return Ok(GlobalOutcome::Infeasible),
        s => return Ok(GlobalOutcome::SolverFailure(s)),
    }
    let mut layers = Vec::with_capacity(net.output_dim());
    let mut objective = 0.0;
    for (k, out) in net.outputs().iter().enumerate() {
        let mut w = out.weights().clone();
        let mut b = out.bias().clone();
        for &(i, wv, bv) in &gp.rows[k] {
            w.row_mut(i).copy_from(&sol.value(wv).transpose());
            b[i] = sol.value(bv)[0];
        }
        let act = pattern.act[k];
        w.row_mut(act).copy_from(&local.weights.row(k));
        b[act] = local.bias[k];
        objective += (&w - out.weights()).norm() + (&b - out.bias()).norm();
        layers.push((w, b));
    }
    Ok(GlobalOutcome::Solved {
        network: net.set_linear_layers(layers)?,
        objective,
    })
}
