//! Safety-set geometry and reach-set bounds.
//!
//! A TLL controller with row norms at most `(||w||, |b|)` moves a trajectory
//! started in the safe set by at most `beta * sum_{k=0}^{T} L^k` in `T` steps,
//! with `beta` and `L` affine in the two norms ([`BoundFn`]). Fixing `beta_max`
//! from the original network and solving for the largest `L_max` that keeps
//! that radius within the safe distance gives the budget any repaired row must
//! respect.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{sampled_sups, BoxSet, DynamicsModel, Provenance, Sups};
use crate::error::{Error, Result};
use crate::socp::{AffineExpr, ConvexProgram, SolverOptions, Status};
use crate::tll::TllNetwork;

/// `{x : G x >= h}`, every row required.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    g: DMatrix<f64>,
    h: DVector<f64>,
}

impl Polytope {
    pub fn new(g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        if g.nrows() != h.len() {
            return Err(Error::dim("polytope offsets", g.nrows(), h.len()));
        }
        if g.nrows() == 0 || g.ncols() == 0 {
            return Err(Error::invalid("polytope needs at least one row and one column"));
        }
        if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("polytope has non-finite entries"));
        }
        Ok(Self { g, h })
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.g.nrows()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.g.row(i).iter().copied().collect()
    }

    /// `G_i x - h_i`; nonnegative on the polytope side of row `i`.
    pub fn row_slack(&self, i: usize, x: &[f64]) -> f64 {
        self.g.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - self.h[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && (0..self.n_rows()).all(|i| self.row_slack(i, x) >= 0.0)
    }
}

pub fn is_unsafe(unsafe_set: &Polytope, x: &[f64]) -> bool {
    unsafe_set.contains(x)
}

/// `c0 + c_w * w + c_b * b` for nonnegative coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundFn {
    pub c0: f64,
    pub c_w: f64,
    pub c_b: f64,
}

impl BoundFn {
    pub fn new(c0: f64, c_w: f64, c_b: f64) -> Result<Self> {
        if [c0, c_w, c_b].iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid(format!(
                "bound coefficients must be finite and nonnegative (got {c0}, {c_w}, {c_b})"
            )));
        }
        Ok(Self { c0, c_w, c_b })
    }

    pub fn value(&self, w_norm: f64, b_abs: f64) -> f64 {
        self.c0 + self.c_w * w_norm + self.c_b * b_abs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetySpec {
    pub workspace: BoxSet,
    pub safe: BoxSet,
    pub unsafe_set: Polytope,
    pub horizon: usize,
}

impl SafetySpec {
    pub fn new(workspace: BoxSet, safe: BoxSet, unsafe_set: Polytope, horizon: usize) -> Result<Self> {
        workspace.validate()?;
        safe.validate()?;
        let n = workspace.dim();
        if safe.dim() != n {
            return Err(Error::dim("safe set", n, safe.dim()));
        }
        if unsafe_set.dim() != n {
            return Err(Error::dim("unsafe set", n, unsafe_set.dim()));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon T must be positive"));
        }
        if !workspace.has_interior() {
            return Err(Error::invalid("workspace must have non-empty interior"));
        }
        if !safe.is_subset_of(&workspace) {
            return Err(Error::invalid("safe set is not contained in the workspace"));
        }
        Ok(Self {
            workspace,
            safe,
            unsafe_set,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.workspace.dim()
    }
}

/// `beta(w, b) = sup||f(x)-x|| + sup||g(x)|| ext(X_ws) w + sup||g(x)|| b`,
/// sups over the safe set.
pub fn make_beta_fn(spec: &SafetySpec, safe_sups: &Sups) -> BoundFn {
    BoundFn {
        c0: safe_sups.sup_f_minus_x,
        c_w: safe_sups.sup_g_norm * spec.workspace.ext(),
        c_b: safe_sups.sup_g_norm,
    }
}

/// `L(w, b) = L_f + (L_g sup||x|| + sup||g(x)||) w + L_g b`, sups over the safe set.
pub fn make_l_fn(model: &DynamicsModel, safe_sups: &Sups) -> BoundFn {
    BoundFn {
        c0: model.l_f(),
        c_w: model.l_g() * safe_sups.sup_x_norm + safe_sups.sup_g_norm,
        c_b: model.l_g(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OmegaNorms {
    pub omega_w: f64,
    pub omega_b: f64,
}

/// Largest row norm and largest bias magnitude over every output.
pub fn omega_norms(net: &TllNetwork) -> OmegaNorms {
    let mut omega_w = 0.0f64;
    let mut omega_b = 0.0f64;
    for out in net.outputs() {
        for i in 0..out.n_linear() {
            omega_w = omega_w.max(out.weights().row(i).norm());
            omega_b = omega_b.max(out.bias()[i].abs());
        }
    }
    OmegaNorms { omega_w, omega_b }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SafeDistance {
    /// Lower bound on the distance; exact when `exact` is set.
    pub distance: f64,
    pub exact: bool,
    /// Distance of the best pair found numerically, when computed.
    pub upper: Option<f64>,
    /// The safe set touches the unsafe set.
    pub intersects: bool,
}

/// `max(0, h - max_{x in box} a.x) / ||a||`: distance from a box to `{a.x >= h}`.
fn box_halfspace_distance(set: &BoxSet, a: &[f64], h: f64) -> f64 {
    let reach: f64 = a
        .iter()
        .enumerate()
        .map(|(i, &ai)| (ai * set.lower[i]).max(ai * set.upper[i]))
        .sum();
    let an = crate::linalg::norm(a);
    if an == 0.0 {
        return if h <= 0.0 { 0.0 } else { f64::INFINITY };
    }
    (h - reach).max(0.0) / an
}

/// Distance between the safe box and the unsafe polytope.
///
/// Each row's halfspace contains the polytope, so the largest box-to-halfspace
/// distance is a lower bound, exact for a single row. With several rows the
/// closest pair is also computed numerically and reported as `upper`.
pub fn safe_distance(safe: &BoxSet, unsafe_set: &Polytope) -> Result<SafeDistance> {
    if safe.dim() != unsafe_set.dim() {
        return Err(Error::dim("unsafe set", safe.dim(), unsafe_set.dim()));
    }
    let lower = (0..unsafe_set.n_rows())
        .map(|i| box_halfspace_distance(safe, &unsafe_set.row(i), unsafe_set.h()[i]))
        .fold(0.0f64, f64::max);

    if unsafe_set.n_rows() == 1 {
        return Ok(SafeDistance {
            distance: lower,
            exact: true,
            upper: Some(lower),
            intersects: lower == 0.0,
        });
    }

    let n = safe.dim();
    let mut p = ConvexProgram::new();
    let xs = p.add_variable("x_safe", n);
    let xu = p.add_variable("x_unsafe", n);
    for i in 0..n {
        p.add_ineq(AffineExpr::component(xs, i).plus_scalar(-safe.upper[i]))?;
        p.add_ineq(AffineExpr::component(xs, i).scaled(-1.0).plus_scalar(safe.lower[i]))?;
    }
    let g = unsafe_set.g();
    p.add_ineq(
        AffineExpr::zeros(g.nrows())
            .term(-g.clone(), xu)
            .plus_constant(unsafe_set.h()),
    )?;
    p.add_norm_objective(AffineExpr::var(xs).minus(&AffineExpr::var(xu)))?;
    let sol = p.solve(&SolverOptions::default());

    let (upper, intersects) = match sol.status {
        Status::Optimal => (Some(sol.objective.max(lower)), sol.objective <= 1e-7),
        // an empty polytope is infinitely far away; keep the halfspace bound
        _ => (None, false),
    };
    Ok(SafeDistance {
        distance: if intersects { 0.0 } else { lower },
        exact: false,
        upper,
        intersects: intersects || lower == 0.0 && upper.is_none_or(|u| u <= 1e-7),
    })
}

/// `beta * sum_{k=0}^{T} L^k`
pub fn reach_bound(beta: f64, l: f64, horizon: usize) -> f64 {
    let mut sum = 0.0;
    let mut pow = 1.0;
    for _ in 0..=horizon {
        sum += pow;
        pow *= l;
    }
    beta * sum
}

/// Positive root `L` of `beta_max * sum_{k=0}^{T} L^k = d`, by bisection.
pub fn solve_lmax(beta_max: f64, d: f64, horizon: usize) -> Result<f64> {
    if !(beta_max > 0.0 && beta_max.is_finite() && d.is_finite()) {
        return Err(Error::invalid(format!(
            "beta_max must be positive and finite (got {beta_max}), d finite (got {d})"
        )));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon T must be positive"));
    }
    if d <= beta_max {
        return Err(Error::InfeasibleBudget { beta_max, d });
    }
    let mut lo = 0.0f64;
    let mut hi = (d / beta_max).powf(1.0 / horizon as f64).max(1.0) + 1.0;
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if reach_bound(beta_max, mid, horizon) < d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Both `beta(Omega_W, Omega_b) <= beta_max` and `L(Omega_W, Omega_b) <= L_max`.
pub fn check_original_bounds(net: &TllNetwork, beta_fn: &BoundFn, l_fn: &BoundFn, beta_max: f64, l_max: f64) -> bool {
    let om = omega_norms(net);
    beta_fn.value(om.omega_w, om.omega_b) <= beta_max && l_fn.value(om.omega_w, om.omega_b) <= l_max
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCertificate {
    pub beta_max: f64,
    pub l_max: f64,
    pub d_safe: f64,
    pub reach_radius: f64,
    pub original_net_ok: bool,
}

/// Everything the repair budget is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundAnalysis {
    pub safe_sups: Sups,
    pub l_f: f64,
    pub l_g: f64,
    pub lipschitz_provenance: Provenance,
    pub beta_fn: BoundFn,
    pub l_fn: BoundFn,
    pub omega: OmegaNorms,
    pub distance: SafeDistance,
    pub certificate: BoundCertificate,
}

/// Sups over the safe set, bound functions, `beta_max = beta(Omega_W, Omega_b)`,
/// the safe distance and `L_max`.
pub fn analyze_bounds(
    model: &DynamicsModel,
    net: &TllNetwork,
    spec: &SafetySpec,
    samples: usize,
) -> Result<BoundAnalysis> {
    if model.state_dim() != spec.dim() {
        return Err(Error::dim("safety spec", model.state_dim(), spec.dim()));
    }
    if net.input_dim() != model.state_dim() {
        return Err(Error::dim("network inputs", model.state_dim(), net.input_dim()));
    }
    if net.output_dim() != model.input_dim() {
        return Err(Error::dim("network outputs", model.input_dim(), net.output_dim()));
    }
    let safe_sups = sampled_sups(model, &spec.safe, samples)?;
    let beta_fn = make_beta_fn(spec, &safe_sups);
    let l_fn = make_l_fn(model, &safe_sups);
    let omega = omega_norms(net);
    let beta_max = beta_fn.value(omega.omega_w, omega.omega_b);
    let distance = safe_distance(&spec.safe, &spec.unsafe_set)?;
    if distance.intersects {
        return Err(Error::invalid("the safe set intersects the unsafe set"));
    }
    let d_safe = distance.distance;
    let l_max = solve_lmax(beta_max, d_safe, spec.horizon)?;
    let original_net_ok = check_original_bounds(net, &beta_fn, &l_fn, beta_max, l_max);
    Ok(BoundAnalysis {
        safe_sups,
        l_f: model.l_f(),
        l_g: model.l_g(),
        lipschitz_provenance: model.provenance(),
        beta_fn,
        l_fn,
        omega,
        distance,
        certificate: BoundCertificate {
            beta_max,
            l_max,
            d_safe,
            reach_radius: reach_bound(beta_max, l_max, spec.horizon),
            original_net_ok,
        },
    })
}

/// Whether the closed loop from `x0` enters the unsafe set within `horizon` steps.
pub fn reaches_unsafe(
    model: &DynamicsModel,
    net: &TllNetwork,
    unsafe_set: &Polytope,
    x0: &[f64],
    horizon: usize,
) -> Result<bool> {
    let traj = model.simulate(|x| net.eval_lattice(x), x0, horizon)?;
    Ok(traj.first_step_where(|s| unsafe_set.contains(s)).is_some())
}

/// First grid point of `search` (lexicographic order) that lies in the
/// workspace, outside the safe and unsafe sets, and whose closed loop enters
/// the unsafe set within `ce_horizon` steps.
pub fn find_counterexample(
    model: &DynamicsModel,
    net: &TllNetwork,
    spec: &SafetySpec,
    search: &BoxSet,
    grid: usize,
    ce_horizon: usize,
) -> Result<Option<Vec<f64>>> {
    if grid == 0 || ce_horizon == 0 {
        return Err(Error::invalid("grid size and counterexample horizon must be positive"));
    }
    if search.dim() != spec.dim() {
        return Err(Error::dim("search box", spec.dim(), search.dim()));
    }
    let pts = search.grid(grid);
    let hits: Vec<Result<bool>> = pts
        .par_iter()
        .map(|x| {
            if !spec.workspace.contains(x) || spec.safe.contains(x) || spec.unsafe_set.contains(x) {
                return Ok(false);
            }
            reaches_unsafe(model, net, &spec.unsafe_set, x, ce_horizon)
        })
        .collect();
    for (x, hit) in pts.into_iter().zip(hits) {
        if hit? {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{car_model, linear_model};
    use crate::tll::ScalarTll;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn car_spec() -> SafetySpec {
        SafetySpec::new(
            BoxSet::new(vec![-3.0, -4.0, -PI], vec![3.0, 4.0, PI]).unwrap(),
            BoxSet::new(vec![-0.25, -0.75, -PI / 8.0], vec![0.25, -0.25, PI / 8.0]).unwrap(),
            Polytope::new(
                DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]),
                DVector::from_element(1, 3.0),
            )
            .unwrap(),
            7,
        )
        .unwrap()
    }

    fn single_row_net(w: &[f64], b: f64) -> TllNetwork {
        let out = ScalarTll::new(
            DMatrix::from_row_slice(1, w.len(), w),
            DVector::from_element(1, b),
            vec![vec![0]],
        )
        .unwrap();
        TllNetwork::new(vec![out]).unwrap()
    }

    #[test]
    fn unsafe_membership() {
        let spec = car_spec();
        assert!(is_unsafe(&spec.unsafe_set, &[0.0, 3.1, 0.0]));
        assert!(!is_unsafe(&spec.unsafe_set, &[0.0, 2.999, 0.2]));
        let quadrant = Polytope::new(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        assert!(!is_unsafe(&quadrant, &[1.0, -1.0]));
        assert!(is_unsafe(&quadrant, &[1.0, 0.0]));
    }

    #[test]
    fn car_bound_functions() {
        let spec = car_spec();
        let car = car_model(0.3, 0.01).unwrap();
        let sups = sampled_sups(&car, &spec.safe, 5).unwrap();
        let beta = make_beta_fn(&spec, &sups);
        assert_abs_diff_eq!(beta.c0, 0.003, epsilon = 1e-15);
        assert_abs_diff_eq!(beta.c_w, 0.01 * (25.0 + PI * PI).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(beta.c_b, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(beta.value(0.0, 0.0), 0.003, epsilon = 1e-15);
        assert_abs_diff_eq!(beta.value(1.0, 1.0), 0.072051, epsilon = 1e-6);

        let l = make_l_fn(&car, &sups);
        assert_abs_diff_eq!(l.c0, 1.003, epsilon = 1e-15);
        assert_abs_diff_eq!(l.c_w, 0.01, epsilon = 1e-15);
        assert_eq!(l.c_b, 0.0);
        assert_eq!(l.value(0.0, 0.0), car.l_f());
    }

    #[test]
    fn linear_model_l_fn() {
        let m = linear_model(
            DMatrix::identity(2, 2) * 2.0,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let safe = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let sups = sampled_sups(&m, &safe, 3).unwrap();
        let l = make_l_fn(&m, &sups);
        assert_eq!(l.c0, 2.0);
        assert_abs_diff_eq!(l.c_w, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn omega_of_small_nets() {
        let om = omega_norms(&crate::tll::tests::abs_tll());
        assert_eq!((om.omega_w, om.omega_b), (1.0, 0.0));
        let om = omega_norms(&single_row_net(&[3.0, 4.0], 5.0));
        assert_eq!((om.omega_w, om.omega_b), (5.0, 5.0));
        let om = omega_norms(&single_row_net(&[3.0, 4.0], -7.0));
        assert_eq!(om.omega_b, 7.0);
    }

    #[test]
    fn distances() {
        let spec = car_spec();
        let d = safe_distance(&spec.safe, &spec.unsafe_set).unwrap();
        assert!(d.exact && !d.intersects);
        assert_abs_diff_eq!(d.distance, 3.25, epsilon = 1e-15);

        let unit = BoxSet::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let everything = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, -5.0),
        )
        .unwrap();
        let d = safe_distance(&unit, &everything).unwrap();
        assert_eq!(d.distance, 0.0);
        assert!(d.intersects);

        let sq = BoxSet::new(vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let right = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert_abs_diff_eq!(safe_distance(&sq, &right).unwrap().distance, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn multi_row_distance_is_a_lower_bound() {
        // corner region {x1 >= 2, x2 >= 2}; true distance from [-1,1]^2 is sqrt(2)
        let sq = BoxSet::new(vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let corner = Polytope::new(DMatrix::identity(2, 2), DVector::from_element(2, 2.0)).unwrap();
        let d = safe_distance(&sq, &corner).unwrap();
        assert!(!d.exact && !d.intersects);
        assert_abs_diff_eq!(d.distance, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.upper.unwrap(), 2f64.sqrt(), epsilon = 1e-6);

        let overlapping = Polytope::new(DMatrix::identity(2, 2), DVector::from_element(2, 0.5)).unwrap();
        let d = safe_distance(&sq, &overlapping).unwrap();
        assert!(d.intersects);
        assert_eq!(d.distance, 0.0);
    }

    #[test]
    fn lmax_examples() {
        let l = solve_lmax(0.0865, 3.25, 7).unwrap();
        assert!((l - 1.4243).abs() <= 5e-3, "L_max = {l}");
        for t in 1..6 {
            assert_abs_diff_eq!(solve_lmax(1.0, (t + 1) as f64, t).unwrap(), 1.0, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(solve_lmax(1.0, 2.0, 1).unwrap(), 1.0, epsilon = 1e-8);
        assert!(matches!(solve_lmax(2.0, 1.0, 3), Err(Error::InfeasibleBudget { .. })));
        assert!(matches!(solve_lmax(1.0, 1.0, 3), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn reach_bound_examples() {
        assert_abs_diff_eq!(reach_bound(0.0865, 1.4243, 7), 3.249, epsilon = 2e-3);
        assert_eq!(reach_bound(0.3, 0.0, 5), 0.3);
        assert_abs_diff_eq!(reach_bound(0.3, 1.0, 5), 1.8, epsilon = 1e-15);
    }

    #[test]
    fn original_bounds_check() {
        let spec = car_spec();
        let car = car_model(0.3, 0.01).unwrap();
        let net = single_row_net(&[-0.1442, -0.5424, -0.425], 2.223);
        let a = analyze_bounds(&car, &net, &spec, 5).unwrap();
        assert!(a.certificate.original_net_ok);
        assert_abs_diff_eq!(a.certificate.reach_radius, a.certificate.d_safe, epsilon = 1e-6);
        assert_eq!(
            a.certificate.beta_max,
            a.beta_fn.value(a.omega.omega_w, a.omega.omega_b)
        );
        // a tiny L_max rejects the same network
        assert!(!check_original_bounds(
            &net,
            &a.beta_fn,
            &a.l_fn,
            a.certificate.beta_max,
            1.0
        ));
    }

    #[test]
    fn budget_error_surfaces() {
        let spec = car_spec();
        let car = car_model(0.3, 0.01).unwrap();
        let huge = single_row_net(&[0.0, 0.0, 0.0], 500.0);
        assert!(matches!(
            analyze_bounds(&car, &huge, &spec, 3),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn counterexample_search() {
        let spec = car_spec();
        let car = car_model(0.3, 0.01).unwrap();
        let faulty = single_row_net(&[-0.1442, -0.5424, -0.425], 2.223);
        let search = BoxSet::new(vec![0.0, 2.999, 0.0], vec![0.0, 2.999, 0.2]).unwrap();
        let ce = find_counterexample(&car, &faulty, &spec, &search, 3, 2)
            .unwrap()
            .unwrap();
        assert_eq!(ce, vec![0.0, 2.999, 0.2]);
        assert!(!spec.safe.contains(&ce) && !spec.unsafe_set.contains(&ce));

        let zero = single_row_net(&[0.0, 0.0, 0.0], 0.0);
        let far = BoxSet::new(vec![-1.0, -2.0, -0.1], vec![1.0, 0.0, 0.1]).unwrap();
        assert!(find_counterexample(&car, &zero, &spec, &far, 4, 2).unwrap().is_none());
    }
}
