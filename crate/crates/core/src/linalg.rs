//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Numerical rank with singular values compared against `rel_tol * sigma_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// 2-norm condition number; `inf` for singular or empty-but-required matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.singular_values();
    let smin = sv.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / smin
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `I_count ⊗ block`.
pub fn block_diag_repeat(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

/// Ratio of smallest to largest absolute diagonal entry of a triangular matrix.
pub fn diagonal_ratio(l: &DMatrix<f64>) -> f64 {
    let n = l.nrows().min(l.ncols());
    if n == 0 {
        return 1.0;
    }
    let d = l.diagonal();
    let max = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let min = d.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Forward substitution for lower-triangular `l`; `None` when a pivot is zero.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    l.solve_lower_triangular(b)
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute when `b = 0`).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Stack `vectors` vertically.
pub fn vstack(vectors: &[&DVector<f64>]) -> DVector<f64> {
    let len = vectors.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for v in vectors {
        out.rows_mut(at, v.len()).copy_from(v);
        at += v.len();
    }
    out
}
