//! Deterministic grid estimates of the suprema and Lipschitz constants used by
//! the reach-set bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BoxSet, DynamicsModel};
use crate::error::{Error, Result};
use crate::linalg::{norm, spectral_norm};

/// Multiplier applied to sampled Lipschitz quotients. Grid quotients
/// under-approximate the true constant.
pub const LIPSCHITZ_INFLATION: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sups {
    /// `sup ||f(x) - x||`
    pub sup_f_minus_x: f64,
    /// `sup ||g(x)||` (spectral norm)
    pub sup_g_norm: f64,
    /// `sup ||x||`
    pub sup_x_norm: f64,
    /// `ext` of the set, in closed form.
    pub ext: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub l_f: f64,
    pub l_g: f64,
}

fn grid_with_corners(set: &BoxSet, samples: usize) -> Vec<Vec<f64>> {
    let mut pts = set.grid(samples);
    pts.extend(set.corners());
    pts
}

/// Maxima over a `samples`-per-axis grid of `set` plus its corners.
pub fn sampled_sups(model: &DynamicsModel, set: &BoxSet, samples: usize) -> Result<Sups> {
    if samples == 0 {
        return Err(Error::invalid("sampled_sups needs at least one sample per axis"));
    }
    if set.dim() != model.state_dim() {
        return Err(Error::dim("sampling box", model.state_dim(), set.dim()));
    }
    let pts = grid_with_corners(set, samples);
    let (f_minus_x, g_norm, x_norm) = pts
        .par_iter()
        .map(|x| {
            let fx = model.f(x);
            let d: Vec<f64> = fx.iter().zip(x).map(|(a, b)| a - b).collect();
            (norm(&d), spectral_norm(&model.g(x)), norm(x))
        })
        .reduce(|| (0.0, 0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)));
    Ok(Sups {
        sup_f_minus_x: f_minus_x,
        sup_g_norm: g_norm,
        sup_x_norm: x_norm,
        ext: set.ext(),
    })
}

/// Largest difference quotients of `f` and `g` over all pairs of grid points,
/// inflated by [`LIPSCHITZ_INFLATION`].
pub fn sampled_lipschitz(model: &DynamicsModel, set: &BoxSet, samples: usize) -> Result<LipschitzEstimate> {
    if samples < 2 {
        return Err(Error::invalid("sampled_lipschitz needs at least two samples per axis"));
    }
    if set.dim() != model.state_dim() {
        return Err(Error::dim("sampling box", model.state_dim(), set.dim()));
    }
    if !set.has_interior() {
        return Err(Error::invalid(
            "cannot estimate Lipschitz constants on a degenerate box",
        ));
    }
    let pts = set.grid(samples);
    let fs: Vec<Vec<f64>> = pts.iter().map(|x| model.f(x).as_slice().to_vec()).collect();
    let gs: Vec<_> = pts.iter().map(|x| model.g(x)).collect();

    let (qf, qg) = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut best = (0.0f64, 0.0f64);
            for j in (i + 1)..pts.len() {
                let dx: Vec<f64> = pts[i].iter().zip(&pts[j]).map(|(a, b)| a - b).collect();
                let dist = norm(&dx);
                let df: Vec<f64> = fs[i].iter().zip(&fs[j]).map(|(a, b)| a - b).collect();
                best.0 = best.0.max(norm(&df) / dist);
                best.1 = best.1.max(spectral_norm(&(&gs[i] - &gs[j])) / dist);
            }
            best
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));

    Ok(LipschitzEstimate {
        l_f: qf * LIPSCHITZ_INFLATION,
        l_g: qg * LIPSCHITZ_INFLATION,
    })
}
