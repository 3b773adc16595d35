//! Product cone `R^l_+ x Q^{q_1} x ... x Q^{q_k}`: Jordan algebra operations,
//! Nesterov-Todd scaling and step lengths.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConeDims {
    pub l: usize,
    pub soc: Vec<usize>,
}

impl ConeDims {
    pub fn total(&self) -> usize {
        self.l + self.soc.iter().sum::<usize>()
    }

    /// Degree of the cone (number of "scalar" constraints).
    pub fn degree(&self) -> usize {
        self.l + self.soc.len()
    }

    /// Offsets of each second-order block.
    pub fn soc_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = self.l;
        self.soc
            .iter()
            .map(|&q| {
                let r = start..start + q;
                start += q;
                r
            })
            .collect()
    }

    pub fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.total());
        for i in 0..self.l {
            e[i] = 1.0;
        }
        for r in self.soc_ranges() {
            e[r.start] = 1.0;
        }
        e
    }

    /// Smallest `a` with `v + a e` on the cone boundary; negative when `v` is interior.
    pub fn boundary_shift(&self, v: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.l {
            worst = worst.max(-v[i]);
        }
        for r in self.soc_ranges() {
            let t = v[r.start];
            let u = v.rows(r.start + 1, r.len() - 1).norm();
            worst = worst.max(u - t);
        }
        worst
    }

    /// Largest `a >= 0` keeping `v + a dv` in the cone (may be infinite).
    pub fn max_step(&self, v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for i in 0..self.l {
            if dv[i] < 0.0 {
                alpha = alpha.min(-v[i] / dv[i]);
            }
        }
        for r in self.soc_ranges() {
            alpha = alpha.min(soc_max_step(
                v.rows(r.start, r.len()).as_slice(),
                dv.rows(r.start, r.len()).as_slice(),
            ));
        }
        alpha.max(0.0)
    }

    /// Jordan product `a o b`.
    pub fn product(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total());
        for i in 0..self.l {
            out[i] = a[i] * b[i];
        }
        for r in self.soc_ranges() {
            let (s, q) = (r.start, r.len());
            out[s] = a.rows(s, q).dot(&b.rows(s, q));
            for k in 1..q {
                out[s + k] = a[s] * b[s + k] + b[s] * a[s + k];
            }
        }
        out
    }

    /// Solves `lambda o x = d` for `x`.
    pub fn inverse_product(&self, lambda: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total());
        for i in 0..self.l {
            out[i] = d[i] / lambda[i];
        }
        for r in self.soc_ranges() {
            let (s, q) = (r.start, r.len());
            let l0 = lambda[s];
            let l1 = lambda.rows(s + 1, q - 1);
            let d1 = d.rows(s + 1, q - 1);
            let det = l0 * l0 - l1.norm_squared();
            let x0 = (l0 * d[s] - l1.dot(&d1)) / det;
            out[s] = x0;
            for k in 1..q {
                out[s + k] = (d[s + k] - x0 * lambda[s + k]) / l0;
            }
        }
        out
    }
}

/// Step to the boundary of `{(t, u) : ||u|| <= t}` from an interior point.
fn soc_max_step(v: &[f64], dv: &[f64]) -> f64 {
    let (t, dt) = (v[0], dv[0]);
    let uu: f64 = v[1..].iter().map(|x| x * x).sum();
    let ud: f64 = v[1..].iter().zip(&dv[1..]).map(|(a, b)| a * b).sum();
    let dd: f64 = dv[1..].iter().map(|x| x * x).sum();
    // q(a) = qa a^2 + qb a + qc, with qc > 0 at an interior point
    let qa = dt * dt - dd;
    let qb = 2.0 * (t * dt - ud);
    let qc = t * t - uu;
    if qc <= 0.0 || t <= 0.0 {
        return 0.0;
    }
    // q >= 0 also holds on the negative nappe, so the head must stay positive
    let head = if dt < 0.0 { -t / dt } else { f64::INFINITY };
    let scale = qa.abs().max(qb.abs()).max(qc);
    if qa.abs() <= 1e-15 * scale {
        return head.min(if qb < 0.0 { -qc / qb } else { f64::INFINITY });
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        // q never vanishes; the sign of q stays positive iff qa > 0
        return if qa > 0.0 { head } else { 0.0 };
    }
    let sq = disc.sqrt();
    // numerically stable roots
    let qq = -0.5 * (qb + qb.signum() * sq);
    let r1 = if qq != 0.0 { qq / qa } else { f64::INFINITY };
    let r2 = if qq != 0.0 { qc / qq } else { f64::INFINITY };
    let mut best = head;
    for r in [r1, r2] {
        if r > 0.0 && r < best {
            best = r;
        }
    }
    best
}

/// Nesterov-Todd scaling `W` with `W z = W^{-1} s = lambda`. Every block is
/// symmetric.
pub(crate) struct Scaling {
    dims: ConeDims,
    orth: Vec<f64>,
    soc_w: Vec<DMatrix<f64>>,
    soc_winv: Vec<DMatrix<f64>>,
    pub lambda: DVector<f64>,
}

impl Scaling {
    pub fn identity(dims: &ConeDims) -> Self {
        let soc_w: Vec<_> = dims.soc.iter().map(|&q| DMatrix::identity(q, q)).collect();
        Self {
            dims: dims.clone(),
            orth: vec![1.0; dims.l],
            soc_winv: soc_w.clone(),
            soc_w,
            lambda: DVector::zeros(dims.total()),
        }
    }

    pub fn nesterov_todd(dims: &ConeDims, s: &DVector<f64>, z: &DVector<f64>) -> Self {
        let mut orth = Vec::with_capacity(dims.l);
        for i in 0..dims.l {
            orth.push((s[i] / z[i]).sqrt());
        }
        let mut soc_w = Vec::with_capacity(dims.soc.len());
        let mut soc_winv = Vec::with_capacity(dims.soc.len());
        for r in dims.soc_ranges() {
            let q = r.len();
            let sb = s.rows(r.start, q);
            let zb = z.rows(r.start, q);
            let s_j = j_norm(sb.as_slice());
            let z_j = j_norm(zb.as_slice());
            let s_bar = sb / s_j;
            let z_bar = zb / z_j;
            let gamma = ((1.0 + s_bar.dot(&z_bar)) / 2.0).max(0.0).sqrt();
            let mut w_bar = DVector::zeros(q);
            w_bar[0] = (s_bar[0] + z_bar[0]) / (2.0 * gamma);
            for k in 1..q {
                w_bar[k] = (s_bar[k] - z_bar[k]) / (2.0 * gamma);
            }
            let eta = (s_j / z_j).sqrt();
            let w0 = w_bar[0];
            let w1 = w_bar.rows(1, q - 1);
            let mut w = DMatrix::zeros(q, q);
            let mut winv = DMatrix::zeros(q, q);
            w[(0, 0)] = w0;
            winv[(0, 0)] = w0;
            for k in 1..q {
                w[(0, k)] = w1[k - 1];
                w[(k, 0)] = w1[k - 1];
                winv[(0, k)] = -w1[k - 1];
                winv[(k, 0)] = -w1[k - 1];
                for j in 1..q {
                    let v = w1[k - 1] * w1[j - 1] / (1.0 + w0) + if j == k { 1.0 } else { 0.0 };
                    w[(k, j)] = v;
                    winv[(k, j)] = v;
                }
            }
            soc_w.push(w * eta);
            soc_winv.push(winv / eta);
        }
        let mut scaling = Self {
            dims: dims.clone(),
            orth,
            soc_w,
            soc_winv,
            lambda: DVector::zeros(dims.total()),
        };
        scaling.lambda = scaling.apply(z);
        scaling
    }

    /// `W v`
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_blocks(v, &self.soc_w, false)
    }

    /// `W^{-1} v`
    pub fn apply_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_blocks(v, &self.soc_winv, true)
    }

    fn apply_blocks(&self, v: &DVector<f64>, blocks: &[DMatrix<f64>], inverse: bool) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for i in 0..self.dims.l {
            out[i] = if inverse {
                v[i] / self.orth[i]
            } else {
                v[i] * self.orth[i]
            };
        }
        for (r, b) in self.dims.soc_ranges().into_iter().zip(blocks) {
            let res = b * v.rows(r.start, r.len());
            out.rows_mut(r.start, r.len()).copy_from(&res);
        }
        out
    }

    /// `W^{-2} M` for a matrix with one row per cone coordinate.
    pub fn apply_inv_sq_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for i in 0..self.dims.l {
            let f = 1.0 / (self.orth[i] * self.orth[i]);
            out.row_mut(i).scale_mut(f);
        }
        for (r, b) in self.dims.soc_ranges().into_iter().zip(&self.soc_winv) {
            let b2 = b * b;
            let block = &b2 * m.rows(r.start, r.len());
            out.rows_mut(r.start, r.len()).copy_from(&block);
        }
        out
    }

    /// `W^{-2} v`
    pub fn apply_inv_sq(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_inv(&self.apply_inv(v))
    }
}

fn j_norm(v: &[f64]) -> f64 {
    let u: f64 = v[1..].iter().map(|x| x * x).sum();
    ((v[0] - u.sqrt()) * (v[0] + u.sqrt())).max(f64::MIN_POSITIVE).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ConeDims {
        ConeDims { l: 2, soc: vec![3, 2] }
    }

    #[test]
    fn nt_scaling_maps_z_and_s_to_lambda() {
        let d = dims();
        let s = DVector::from_vec(vec![1.5, 0.2, 2.0, 0.3, -1.1, 1.0, 0.4]);
        let z = DVector::from_vec(vec![0.7, 3.0, 1.2, -0.5, 0.6, 2.0, -1.5]);
        let w = Scaling::nesterov_todd(&d, &s, &z);
        let wz = w.apply(&z);
        let winv_s = w.apply_inv(&s);
        for i in 0..7 {
            assert!((wz[i] - winv_s[i]).abs() < 1e-12, "{i}: {} vs {}", wz[i], winv_s[i]);
        }
        let round = w.apply(&w.apply_inv(&s));
        assert!((round - &s).amax() < 1e-12);
    }

    #[test]
    fn inverse_product_inverts_product() {
        let d = dims();
        let lambda = DVector::from_vec(vec![1.0, 2.0, 2.0, 0.5, 0.5, 1.0, 0.1]);
        let x = DVector::from_vec(vec![0.3, -1.0, 0.7, 2.0, -0.4, 0.9, 5.0]);
        let prod = d.product(&lambda, &x);
        let back = d.inverse_product(&lambda, &prod);
        assert!((back - x).amax() < 1e-12);
    }

    #[test]
    fn soc_step_stops_at_the_apex() {
        // moving straight down the axis: the quadratic has a double root
        let dims = ConeDims { l: 0, soc: vec![3] };
        let v = DVector::from_vec(vec![0.037, 0.0, 0.0]);
        let dv = DVector::from_vec(vec![-0.1, 0.0, 0.0]);
        let a = dims.max_step(&v, &dv);
        assert!((a - 0.37).abs() < 1e-12, "step {a}");
    }

    #[test]
    fn soc_step_reaches_boundary() {
        // from (1, 0) moving along (0, 1): boundary at a = 1
        let a = soc_max_step(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((a - 1.0).abs() < 1e-14);
        // moving inward never leaves
        assert_eq!(soc_max_step(&[1.0, 0.0, 0.0], &[1.0, 0.5, 0.0]), f64::INFINITY);
    }

    #[test]
    fn boundary_shift_signs() {
        let d = ConeDims { l: 1, soc: vec![2] };
        assert!(d.boundary_shift(&DVector::from_vec(vec![1.0, 2.0, 1.0])) < 0.0);
        assert!(d.boundary_shift(&DVector::from_vec(vec![1.0, 1.0, 2.0])) > 0.0);
    }
}
