use nalgebra::DMatrix;

/// Largest singular value. Vectors (single row or column) short-circuit to the
/// Euclidean norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.singular_values().max()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `k` evenly spaced points on `[lo, hi]`, both ends included exactly.
/// A single point sits at the midpoint.
pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..k)
            .map(|i| {
                if i == k - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (k - 1) as f64
                }
            })
            .collect(),
    }
}
