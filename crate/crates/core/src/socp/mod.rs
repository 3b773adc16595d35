//! Small second-order cone program builder and solver.
//!
//! Programs are assembled from vector variables and affine expressions:
//! equalities `e(z) = 0`, elementwise inequalities `e(z) <= 0`, norm cones
//! `||A(z)|| <= t(z)` and an objective that is a sum of Euclidean norms of
//! affine expressions (plus an optional linear term). Each norm term gets an
//! epigraph scalar, turning the program into a standard conic LP that is solved
//! by [`ipm`].

mod cone;
mod ipm;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use self::cone::ConeDims;
use crate::error::{Error, Result};

/// Handle to a declared variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    dim: usize,
}

impl Var {
    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// `sum_k C_k z_k + d` with `rows` output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineExpr {
    terms: Vec<(Var, DMatrix<f64>)>,
    constant: DVector<f64>,
}

impl AffineExpr {
    pub fn zeros(rows: usize) -> Self {
        Self {
            terms: Vec::new(),
            constant: DVector::zeros(rows),
        }
    }

    pub fn constant(c: DVector<f64>) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn scalar(c: f64) -> Self {
        Self::constant(DVector::from_element(1, c))
    }

    /// The variable itself.
    pub fn var(v: Var) -> Self {
        Self::zeros(v.dim).term(DMatrix::identity(v.dim, v.dim), v)
    }

    /// Component `i` of `v` as a scalar expression.
    pub fn component(v: Var, i: usize) -> Self {
        let mut row = DMatrix::zeros(1, v.dim);
        row[(0, i)] = 1.0;
        Self::zeros(1).term(row, v)
    }

    /// `coeffs . v` as a scalar expression.
    pub fn dot(coeffs: &[f64], v: Var) -> Self {
        Self::zeros(1).term(DMatrix::from_row_slice(1, coeffs.len(), coeffs), v)
    }

    pub fn rows(&self) -> usize {
        self.constant.len()
    }

    /// Adds `coeff * v`.
    pub fn term(mut self, coeff: DMatrix<f64>, v: Var) -> Self {
        self.terms.push((v, coeff));
        self
    }

    pub fn plus_constant(mut self, c: &DVector<f64>) -> Self {
        self.constant += c;
        self
    }

    pub fn plus_scalar(mut self, c: f64) -> Self {
        self.constant.add_scalar_mut(c);
        self
    }

    pub fn plus(mut self, other: &AffineExpr) -> Self {
        self.terms.extend(other.terms.iter().cloned());
        self.constant += &other.constant;
        self
    }

    pub fn scaled(mut self, k: f64) -> Self {
        for (_, c) in &mut self.terms {
            *c *= k;
        }
        self.constant *= k;
        self
    }

    pub fn minus(self, other: &AffineExpr) -> Self {
        self.plus(&other.clone().scaled(-1.0))
    }

    /// Evaluates the expression at per-variable values.
    pub fn eval(&self, values: &[DVector<f64>]) -> DVector<f64> {
        let mut out = self.constant.clone();
        for (v, c) in &self.terms {
            out += c * &values[v.index];
        }
        out
    }

    /// Dense coefficient block over a stacked variable vector.
    fn dense(&self, offsets: &[usize], width: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows(), width);
        for (v, c) in &self.terms {
            let mut block = m.view_mut((0, offsets[v.index]), (self.rows(), v.dim));
            block += c;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals {
    /// Largest equality or inequality violation.
    pub primal_feas: f64,
    /// Largest norm-cone violation `||A(z)|| - t(z)`.
    pub cone_feas: f64,
    /// Dual residual of the conic form.
    pub stationarity: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: Status,
    pub values: Vec<DVector<f64>>,
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl Solution {
    pub fn value(&self, v: Var) -> &DVector<f64> {
        &self.values[v.index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConvexProgram {
    variables: Vec<(String, usize)>,
    eqs: Vec<AffineExpr>,
    ineqs: Vec<AffineExpr>,
    cones: Vec<(AffineExpr, AffineExpr)>,
    norm_objective: Vec<AffineExpr>,
    linear_objective: Option<AffineExpr>,
}

/// Canonical conic form: minimize `c'x + c0` s.t. `A x = b`, `h - G x in K`.
#[derive(Debug, Clone, Serialize)]
pub struct CanonicalForm {
    pub n: usize,
    pub c: Vec<f64>,
    pub c0: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub orthant_dim: usize,
    pub soc_dims: Vec<usize>,
    pub variables: Vec<(String, usize)>,
}

impl ConvexProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, name: impl Into<String>, dim: usize) -> Var {
        let index = self.variables.len();
        self.variables.push((name.into(), dim));
        Var { index, dim }
    }

    pub fn variables(&self) -> &[(String, usize)] {
        &self.variables
    }

    /// Requires `expr = 0`.
    pub fn add_eq(&mut self, expr: AffineExpr) -> Result<()> {
        self.check(&expr)?;
        self.eqs.push(expr);
        Ok(())
    }

    /// Requires every row of `expr` to be `<= 0`.
    pub fn add_ineq(&mut self, expr: AffineExpr) -> Result<()> {
        self.check(&expr)?;
        self.ineqs.push(expr);
        Ok(())
    }

    /// Requires `||vector|| <= bound`, with `bound` a scalar expression.
    pub fn add_cone(&mut self, vector: AffineExpr, bound: AffineExpr) -> Result<()> {
        self.check(&vector)?;
        self.check(&bound)?;
        if bound.rows() != 1 {
            return Err(Error::Builder(format!(
                "cone bound must be scalar, got {} rows",
                bound.rows()
            )));
        }
        if vector.rows() == 0 {
            return Err(Error::Builder("cone vector has no rows".into()));
        }
        self.cones.push((vector, bound));
        Ok(())
    }

    /// Adds `||expr||` to the objective.
    pub fn add_norm_objective(&mut self, expr: AffineExpr) -> Result<()> {
        self.check(&expr)?;
        self.norm_objective.push(expr);
        Ok(())
    }

    /// Adds a scalar linear term to the objective.
    pub fn add_linear_objective(&mut self, expr: AffineExpr) -> Result<()> {
        self.check(&expr)?;
        if expr.rows() != 1 {
            return Err(Error::Builder("linear objective must be scalar".into()));
        }
        self.linear_objective = Some(match self.linear_objective.take() {
            Some(prev) => prev.plus(&expr),
            None => expr,
        });
        Ok(())
    }

    fn check(&self, expr: &AffineExpr) -> Result<()> {
        for (v, c) in &expr.terms {
            let Some((name, dim)) = self.variables.get(v.index) else {
                return Err(Error::Builder(format!("unknown variable #{}", v.index)));
            };
            if *dim != v.dim || c.ncols() != *dim {
                return Err(Error::Builder(format!(
                    "coefficient for `{name}` has {} columns, variable has dimension {dim}",
                    c.ncols()
                )));
            }
            if c.nrows() != expr.rows() {
                return Err(Error::Builder(format!(
                    "coefficient for `{name}` has {} rows, expression has {}",
                    c.nrows(),
                    expr.rows()
                )));
            }
        }
        Ok(())
    }

    /// Objective of the original program at per-variable values.
    pub fn objective_at(&self, values: &[DVector<f64>]) -> f64 {
        let norms: f64 = self.norm_objective.iter().map(|e| e.eval(values).norm()).sum();
        norms + self.linear_objective.as_ref().map_or(0.0, |e| e.eval(values)[0])
    }

    /// Largest equality/inequality and cone violations at per-variable values.
    pub fn violations_at(&self, values: &[DVector<f64>]) -> (f64, f64) {
        let mut primal = 0.0f64;
        for e in &self.eqs {
            primal = primal.max(e.eval(values).amax());
        }
        for e in &self.ineqs {
            primal = primal.max(e.eval(values).max());
        }
        let mut cone = 0.0f64;
        for (v, t) in &self.cones {
            cone = cone.max(v.eval(values).norm() - t.eval(values)[0]);
        }
        (primal, cone)
    }

    fn offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.variables.len());
        let mut acc = 0;
        for (_, d) in &self.variables {
            offsets.push(acc);
            acc += d;
        }
        (offsets, acc)
    }

    fn canonical(&self) -> (CanonicalMatrices, Vec<usize>, usize) {
        let (offsets, n_user) = self.offsets();
        let n_epi = self.norm_objective.len();
        let n = n_user + n_epi;

        let mut c = DVector::zeros(n);
        let mut c0 = 0.0;
        if let Some(lin) = &self.linear_objective {
            let row = lin.dense(&offsets, n_user);
            c.rows_mut(0, n_user).copy_from(&row.row(0).transpose());
            c0 = lin.constant[0];
        }
        for k in 0..n_epi {
            c[n_user + k] = 1.0;
        }

        let p: usize = self.eqs.iter().map(AffineExpr::rows).sum();
        let mut a = DMatrix::zeros(p, n);
        let mut b = DVector::zeros(p);
        let mut r = 0;
        for e in &self.eqs {
            let rows = e.rows();
            a.view_mut((r, 0), (rows, n_user)).copy_from(&e.dense(&offsets, n_user));
            b.rows_mut(r, rows).copy_from(&(-&e.constant));
            r += rows;
        }

        let l: usize = self.ineqs.iter().map(AffineExpr::rows).sum();
        let mut soc = Vec::new();
        for (v, _) in &self.cones {
            soc.push(v.rows() + 1);
        }
        for e in &self.norm_objective {
            soc.push(e.rows() + 1);
        }
        let dims = ConeDims { l, soc };
        let m = dims.total();
        let mut g = DMatrix::zeros(m, n);
        let mut h = DVector::zeros(m);
        let mut r = 0;
        for e in &self.ineqs {
            let rows = e.rows();
            g.view_mut((r, 0), (rows, n_user)).copy_from(&e.dense(&offsets, n_user));
            h.rows_mut(r, rows).copy_from(&(-&e.constant));
            r += rows;
        }
        for (v, t) in &self.cones {
            let tv = t.dense(&offsets, n_user);
            g.view_mut((r, 0), (1, n_user)).copy_from(&(-tv));
            h[r] = t.constant[0];
            let rows = v.rows();
            g.view_mut((r + 1, 0), (rows, n_user))
                .copy_from(&(-v.dense(&offsets, n_user)));
            h.rows_mut(r + 1, rows).copy_from(&v.constant);
            r += rows + 1;
        }
        for (k, e) in self.norm_objective.iter().enumerate() {
            g[(r, n_user + k)] = -1.0;
            let rows = e.rows();
            g.view_mut((r + 1, 0), (rows, n_user))
                .copy_from(&(-e.dense(&offsets, n_user)));
            h.rows_mut(r + 1, rows).copy_from(&e.constant);
            r += rows + 1;
        }
        (
            CanonicalMatrices {
                c,
                c0,
                a,
                b,
                g,
                h,
                dims,
            },
            offsets,
            n_user,
        )
    }

    /// Canonical conic form, for debugging and external cross-checks.
    pub fn canonical_form(&self) -> CanonicalForm {
        let (cm, _, _) = self.canonical();
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        CanonicalForm {
            n: cm.c.len(),
            c: cm.c.as_slice().to_vec(),
            c0: cm.c0,
            a: rows(&cm.a),
            b: cm.b.as_slice().to_vec(),
            g: rows(&cm.g),
            h: cm.h.as_slice().to_vec(),
            orthant_dim: cm.dims.l,
            soc_dims: cm.dims.soc.clone(),
            variables: self.variables.clone(),
        }
    }

    pub fn solve(&self, opts: &SolverOptions) -> Solution {
        let (cm, offsets, n_user) = self.canonical();
        let split = |x: &DVector<f64>| -> Vec<DVector<f64>> {
            self.variables
                .iter()
                .zip(&offsets)
                .map(|((_, d), &o)| x.rows(o, *d).into_owned())
                .collect()
        };

        if cm.c.is_empty() {
            return self.finish(Status::Optimal, Vec::new(), 0.0, 0);
        }
        if cm.dims.total() == 0 {
            return self.solve_equality_only(&cm, &split, opts);
        }

        let problem = ipm::Problem {
            c: &cm.c,
            a: &cm.a,
            b: &cm.b,
            g: &cm.g,
            h: &cm.h,
            dims: &cm.dims,
        };
        let res = ipm::solve(&problem, opts.tol, opts.max_iter);
        let status = match res.outcome {
            ipm::Outcome::Optimal => Status::Optimal,
            ipm::Outcome::PrimalInfeasible => Status::Infeasible,
            ipm::Outcome::DualInfeasible => Status::Unbounded,
            ipm::Outcome::MaxIter => Status::MaxIter,
        };
        let _ = n_user;
        let values = split(&res.iterate.x);
        self.finish(status, values, res.dual_residual, res.iterations)
    }

    fn solve_equality_only(
        &self,
        cm: &CanonicalMatrices,
        split: &dyn Fn(&DVector<f64>) -> Vec<DVector<f64>>,
        opts: &SolverOptions,
    ) -> Solution {
        // minimize c'x subject to A x = b: bounded iff c lies in range(A').
        let svd = cm.a.clone().svd(true, true);
        let x = svd.solve(&cm.b, 1e-12).unwrap_or_else(|_| DVector::zeros(cm.c.len()));
        let y =
            cm.a.transpose()
                .svd(true, true)
                .solve(&(-&cm.c), 1e-12)
                .unwrap_or_else(|_| DVector::zeros(cm.a.nrows()));
        let dres = (cm.a.transpose() * &y + &cm.c).amax();
        let feasible = cm.a.nrows() == 0 || (&cm.a * &x - &cm.b).amax() <= opts.tol;
        let status = match (feasible, dres <= opts.tol) {
            (false, _) => Status::Infeasible,
            (true, true) => Status::Optimal,
            (true, false) => Status::Unbounded,
        };
        self.finish(status, split(&x), dres, 0)
    }

    fn finish(&self, status: Status, values: Vec<DVector<f64>>, stationarity: f64, iterations: usize) -> Solution {
        let (primal, cone) = if values.is_empty() && !self.variables.is_empty() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            self.violations_at(&values)
        };
        let objective = if values.is_empty() && !self.variables.is_empty() {
            f64::NAN
        } else {
            self.objective_at(&values)
        };
        Solution {
            status,
            values,
            objective,
            residuals: Residuals {
                primal_feas: primal.max(0.0),
                cone_feas: cone.max(0.0),
                stationarity,
            },
            iterations,
        }
    }
}

struct CanonicalMatrices {
    c: DVector<f64>,
    c0: f64,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    dims: ConeDims,
}
