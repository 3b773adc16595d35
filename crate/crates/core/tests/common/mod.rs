#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use tll_repair::dynamics::BoxSet;
use tll_repair::tll::{ScalarTll, TllNetwork};

/// Random TLL with `n` inputs, `m` outputs, `n_linear` rows and `n_groups`
/// non-empty selector sets; every entry uniform in `[-scale, scale]`.
pub fn random_tll<R: Rng>(rng: &mut R, n: usize, m: usize, n_linear: usize, n_groups: usize, scale: f64) -> TllNetwork {
    let outputs = (0..m)
        .map(|_| {
            let w = DMatrix::from_fn(n_linear, n, |_, _| rng.gen_range(-scale..=scale));
            let b = DVector::from_fn(n_linear, |_, _| rng.gen_range(-scale..=scale));
            let selectors = (0..n_groups)
                .map(|_| {
                    let k = rng.gen_range(1..=n_linear);
                    let mut rows: Vec<usize> = (0..n_linear).collect();
                    rows.shuffle(rng);
                    rows.truncate(k);
                    rows.sort_unstable();
                    rows
                })
                .collect();
            ScalarTll::new(w, b, selectors).unwrap()
        })
        .collect();
    TllNetwork::new(outputs).unwrap()
}

/// TLL with random sizes in the ranges `n <= 3`, `N <= 8`, `M <= 4`.
pub fn random_small_tll<R: Rng>(rng: &mut R, m: usize) -> TllNetwork {
    let n = rng.gen_range(1..=3);
    let n_linear = rng.gen_range(1..=8);
    let n_groups = rng.gen_range(1..=4);
    random_tll(rng, n, m, n_linear, n_groups, 2.0)
}

pub fn uniform_in<R: Rng>(rng: &mut R, set: &BoxSet) -> Vec<f64> {
    set.lower
        .iter()
        .zip(&set.upper)
        .map(|(&l, &u)| if l < u { rng.gen_range(l..=u) } else { l })
        .collect()
}

pub fn uniform_cube<R: Rng>(rng: &mut R, n: usize, half: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-half..=half)).collect()
}
