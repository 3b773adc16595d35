//! Primal-dual interior-point method on the homogeneous self-dual embedding of
//!
//! ```text
//! minimize    c'x
//! subject to  G x + s = h,  A x = b,  s in K
//! ```
//!
//! with Nesterov-Todd scaling and a Mehrotra predictor-corrector. The
//! embedding yields either an optimal pair or a certificate of primal or
//! dual infeasibility.

use nalgebra::{DMatrix, DVector};

use super::cone::{ConeDims, Scaling};

const STATIC_REG: f64 = 1e-10;
const REFINE_STEPS: usize = 4;
const STEP_FRACTION: f64 = 0.99;

pub(crate) struct Problem<'a> {
    pub c: &'a DVector<f64>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub g: &'a DMatrix<f64>,
    pub h: &'a DVector<f64>,
    pub dims: &'a ConeDims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outcome {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
#[allow(dead_code)] // duals and slacks are only read by tests
pub(crate) struct Iterate {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub s: DVector<f64>,
}

pub(crate) struct IpmResult {
    pub outcome: Outcome,
    /// Normalized by tau when optimal; the raw certificate otherwise.
    pub iterate: Iterate,
    pub iterations: usize,
    pub dual_residual: f64,
}

/// Reduced KKT system
/// ```text
/// [ 0  A'  G'    ] [dx]   [r1]
/// [ A  0   0     ] [dy] = [r2]
/// [ G  0  -W'W   ] [dz]   [r3]
/// ```
/// solved by eliminating `dz`.
struct Kkt<'a> {
    p: &'a Problem<'a>,
    w: &'a Scaling,
    winv2_g: DMatrix<f64>,
    full: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl<'a> Kkt<'a> {
    fn new(p: &'a Problem<'a>, w: &'a Scaling) -> Self {
        let n = p.c.len();
        let np = p.a.nrows();
        let winv2_g = w.apply_inv_sq_rows(p.g);
        let hmat = p.g.transpose() * &winv2_g;
        let mut full = DMatrix::zeros(n + np, n + np);
        full.view_mut((0, 0), (n, n)).copy_from(&hmat);
        full.view_mut((0, n), (n, np)).copy_from(&p.a.transpose());
        full.view_mut((n, 0), (np, n)).copy_from(p.a);
        let mut reg = full.clone();
        let scale = (0..n).map(|i| hmat[(i, i)].abs()).fold(1.0, f64::max);
        for i in 0..n {
            reg[(i, i)] += STATIC_REG * scale;
        }
        for i in n..n + np {
            reg[(i, i)] -= STATIC_REG * scale;
        }
        Self {
            p,
            w,
            winv2_g,
            full,
            lu: reg.lu(),
        }
    }

    fn solve(
        &self,
        r1: &DVector<f64>,
        r2: &DVector<f64>,
        r3: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let n = self.p.c.len();
        let np = self.p.a.nrows();
        let mut rhs = DVector::zeros(n + np);
        rhs.rows_mut(0, n)
            .copy_from(&(r1 + self.p.g.transpose() * self.w.apply_inv_sq(r3)));
        rhs.rows_mut(n, np).copy_from(r2);
        let mut sol = self.lu.solve(&rhs)?;
        for _ in 0..REFINE_STEPS {
            let res = &rhs - &self.full * &sol;
            if res.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                break;
            }
            sol += self.lu.solve(&res)?;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let dx = sol.rows(0, n).into_owned();
        let dy = sol.rows(n, np).into_owned();
        let dz = &self.winv2_g * &dx - self.w.apply_inv_sq(r3);
        Some((dx, dy, dz))
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Largest violation of `v in K` (zero when inside).
pub(crate) fn cone_violation(dims: &ConeDims, v: &DVector<f64>) -> f64 {
    dims.boundary_shift(v).max(0.0)
}

fn shift_into_cone(dims: &ConeDims, v: DVector<f64>) -> DVector<f64> {
    let a = dims.boundary_shift(&v);
    if a < 0.0 {
        v
    } else {
        v + dims.identity() * (1.0 + a)
    }
}

pub(crate) fn solve(p: &Problem<'_>, tol: f64, max_iter: usize) -> IpmResult {
    let n = p.c.len();
    let np = p.a.nrows();
    let dims = p.dims;
    let degree = dims.degree() as f64;
    let e = dims.identity();

    // Initial point from two least-squares problems (unit scaling).
    let unit = Scaling::identity(dims);
    let kkt0 = Kkt::new(p, &unit);
    let zeros_n = DVector::zeros(n);
    let zeros_p = DVector::zeros(np);
    let zeros_m = DVector::zeros(dims.total());
    let Some((x_init, _, zp)) = kkt0.solve(&zeros_n, p.b, p.h) else {
        return failure(n, np, dims.total());
    };
    let Some((_, y_init, z_dual)) = kkt0.solve(&(-p.c), &zeros_p, &zeros_m) else {
        return failure(n, np, dims.total());
    };
    let mut x = x_init;
    let mut y = y_init;
    let mut s = shift_into_cone(dims, -zp);
    let mut z = shift_into_cone(dims, z_dual);
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut best = Iterate {
        x: x.clone(),
        y: y.clone(),
        z: z.clone(),
        s: s.clone(),
    };
    let mut best_dres = f64::INFINITY;
    let mut best_merit = f64::INFINITY;

    for iter in 0..=max_iter {
        let at = p.a.transpose();
        let gt = p.g.transpose();
        let rx = &at * &y + &gt * &z + p.c * tau;
        let ry = p.a * &x - p.b * tau;
        let rz = p.g * &x + &s - p.h * tau;
        let cx = p.c.dot(&x);
        let by = p.b.dot(&y);
        let hz = p.h.dot(&z);
        let rtau = kappa + cx + by + hz;
        let sz = s.dot(&z);
        let mu = (sz + tau * kappa) / (degree + 1.0);

        // Convergence in the original (tau-normalized) scale.
        let xh = &x / tau;
        let pres_eq = inf_norm(&(p.a * &xh - p.b));
        let pres_cone = cone_violation(dims, &(p.h - p.g * &xh));
        let dres = inf_norm(&((&at * &y + &gt * &z) / tau + p.c));
        let gap = sz / (tau * tau);
        let pcost = cx / tau;
        let merit = pres_eq.max(pres_cone).max(dres);
        if merit < best_merit {
            best_merit = merit;
            best_dres = dres;
            best = Iterate {
                x: xh.clone(),
                y: &y / tau,
                z: &z / tau,
                s: &s / tau,
            };
        }
        if pres_eq <= tol && pres_cone <= tol && dres <= tol && gap <= tol * pcost.abs().max(1.0) {
            return IpmResult {
                outcome: Outcome::Optimal,
                iterate: Iterate {
                    x: xh,
                    y: &y / tau,
                    z: &z / tau,
                    s: &s / tau,
                },
                iterations: iter,
                dual_residual: dres,
            };
        }

        // Infeasibility certificates.
        let hz_by = hz + by;
        if hz_by < 0.0 {
            let res = inf_norm(&(&at * &y + &gt * &z)) / -hz_by;
            if res <= tol {
                let scale = -hz_by;
                return IpmResult {
                    outcome: Outcome::PrimalInfeasible,
                    iterate: Iterate {
                        x: x.clone(),
                        y: &y / scale,
                        z: &z / scale,
                        s: s.clone(),
                    },
                    iterations: iter,
                    dual_residual: res,
                };
            }
        }
        if cx < 0.0 {
            let res = inf_norm(&(p.a * &x)).max(inf_norm(&(p.g * &x + &s))) / -cx;
            if res <= tol {
                let scale = -cx;
                return IpmResult {
                    outcome: Outcome::DualInfeasible,
                    iterate: Iterate {
                        x: &x / scale,
                        y: y.clone(),
                        z: z.clone(),
                        s: &s / scale,
                    },
                    iterations: iter,
                    dual_residual: res,
                };
            }
        }
        if iter == max_iter {
            break;
        }

        let w = Scaling::nesterov_todd(dims, &s, &z);
        let lambda = w.lambda.clone();
        let kkt = Kkt::new(p, &w);
        let Some((x1, y1, z1)) = kkt.solve(&(-p.c), p.b, p.h) else {
            break;
        };
        let denom_base = p.c.dot(&x1) + p.b.dot(&y1) + p.h.dot(&z1) - kappa / tau;

        // One Newton direction for given centering and complementarity targets.
        let direction = |gamma: f64, ds: &DVector<f64>, dkappa: f64| {
            let scaled = dims.inverse_product(&lambda, ds);
            let r1 = -(&rx * (1.0 - gamma));
            let r2 = -(&ry * (1.0 - gamma));
            let r3 = -(&rz * (1.0 - gamma)) + w.apply(&scaled);
            let (x2, y2, z2) = kkt.solve(&r1, &r2, &r3)?;
            let num = -(1.0 - gamma) * rtau + dkappa / tau - (p.c.dot(&x2) + p.b.dot(&y2) + p.h.dot(&z2));
            let dtau = num / denom_base;
            let dx = x2 + &x1 * dtau;
            let dy = y2 + &y1 * dtau;
            let dz = z2 + &z1 * dtau;
            let ds_dir = -(w.apply(&(scaled + w.apply(&dz))));
            let dk = -(dkappa + kappa * dtau) / tau;
            Some((dx, dy, dz, ds_dir, dtau, dk))
        };

        let step_len = |dz: &DVector<f64>, ds: &DVector<f64>, dtau: f64, dk: f64| {
            let mut a = dims.max_step(&s, ds).min(dims.max_step(&z, dz));
            if dtau < 0.0 {
                a = a.min(-tau / dtau);
            }
            if dk < 0.0 {
                a = a.min(-kappa / dk);
            }
            a
        };

        // Predictor.
        let ds_aff = dims.product(&lambda, &lambda);
        let Some((_, _, dz_a, ds_a, dtau_a, dk_a)) = direction(0.0, &ds_aff, tau * kappa) else {
            break;
        };
        let alpha_aff = step_len(&dz_a, &ds_a, dtau_a, dk_a).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // Corrector.
        let corr = dims.product(&w.apply_inv(&ds_a), &w.apply(&dz_a));
        let ds_comb = ds_aff + corr - &e * (sigma * mu);
        let dk_comb = tau * kappa + dtau_a * dk_a - sigma * mu;
        let Some((dx, dy, dz, ds_dir, dtau, dk)) = direction(sigma, &ds_comb, dk_comb) else {
            break;
        };
        let alpha = (STEP_FRACTION * step_len(&dz, &ds_dir, dtau, dk)).min(1.0);
        if !(alpha > 1e-14) {
            break;
        }
        x += dx * alpha;
        y += dy * alpha;
        z += dz * alpha;
        s += ds_dir * alpha;
        tau += dtau * alpha;
        kappa += dk * alpha;
        if !(tau > 0.0 && kappa > 0.0) || !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }

    IpmResult {
        outcome: Outcome::MaxIter,
        iterate: best,
        iterations: max_iter,
        dual_residual: best_dres,
    }
}

fn failure(n: usize, np: usize, m: usize) -> IpmResult {
    IpmResult {
        outcome: Outcome::MaxIter,
        iterate: Iterate {
            x: DVector::zeros(n),
            y: DVector::zeros(np),
            z: DVector::zeros(m),
            s: DVector::zeros(m),
        },
        iterations: 0,
        dual_residual: f64::INFINITY,
    }
}
