//! Multi-step output predictor in gamma coordinates and the finite-sample
//! variance formulas that drive regularization tuning.
//!
//! With `[Zp; Uf; Yf] = L Q` and `gamma = Q alpha`, the predictor reads
//!
//! ```text
//! u_f  = L21 g1 + L22 g2
//! y_f  = L31 g1 + L32 g2 + L33 g3,     g1 = L11^{-1} z_init
//! ```
//!
//! and the prediction error of the `g3 = 0` predictor has average variance
//! `T sigma^2 ‖[g1; g2]‖^2 / N`.

pub mod diagnostics;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hankel::LqFactors;
use crate::linalg;

/// Smallest admissible `min|diag| / max|diag|` of a triangular factor that
/// is about to be inverted.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GammaVector {
    pub g1: DVector<f64>,
    pub g2: DVector<f64>,
    pub g3: DVector<f64>,
}

impl GammaVector {
    pub fn new(g1: DVector<f64>, g2: DVector<f64>, g3: DVector<f64>) -> Self {
        Self { g1, g2, g3 }
    }

    pub fn zeros(f: &LqFactors) -> Self {
        let (a, b, c) = f.block_sizes();
        Self::new(DVector::zeros(a), DVector::zeros(b), DVector::zeros(c))
    }

    /// `[g1; g2]`
    pub fn g12(&self) -> DVector<f64> {
        linalg::vstack(&[&self.g1, &self.g2])
    }

    pub fn g12_norm_squared(&self) -> f64 {
        self.g1.norm_squared() + self.g2.norm_squared()
    }
}

/// Past window `[z(t-rho); ...; z(t-1)]`, oldest first, `z = [u; y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitWindow {
    pub z_init: DVector<f64>,
}

impl InitWindow {
    /// From `m x rho` past inputs and `p x rho` past outputs (oldest column first).
    pub fn from_history(u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::input("past input and output windows differ in length"));
        }
        let (m, p) = (u.nrows(), y.nrows());
        let mut z = DVector::zeros((m + p) * u.ncols());
        for t in 0..u.ncols() {
            z.rows_mut(t * (m + p), m).copy_from(&u.column(t));
            z.rows_mut(t * (m + p) + m, p).copy_from(&y.column(t));
        }
        Ok(Self { z_init: z })
    }
}

/// Solve `L11 g1 = z_init` by forward substitution.
pub fn gamma1_star(l11: &DMatrix<f64>, z_init: &InitWindow) -> Result<DVector<f64>> {
    if z_init.z_init.len() != l11.nrows() {
        return Err(Error::input(format!(
            "z_init has length {}, L11 is {}x{}",
            z_init.z_init.len(),
            l11.nrows(),
            l11.ncols()
        )));
    }
    let ratio = linalg::diagonal_ratio(l11);
    if ratio <= SINGULAR_TOL {
        return Err(Error::Singular { what: "L11", ratio });
    }
    linalg::solve_lower(l11, &z_init.z_init).ok_or(Error::Singular { what: "L11", ratio })
}

/// `(u_f, y_f)` generated by `g`. With `g3 = 0` the output is the
/// unregularized prediction `y_0f`.
pub fn predict(f: &LqFactors, g: &GammaVector) -> Result<(DVector<f64>, DVector<f64>)> {
    let (a, b, c) = f.block_sizes();
    if g.g1.len() != a || g.g2.len() != b || g.g3.len() != c {
        return Err(Error::input(format!(
            "gamma blocks ({}, {}, {}) do not match factor blocks ({a}, {b}, {c})",
            g.g1.len(),
            g.g2.len(),
            g.g3.len()
        )));
    }
    let u = &f.l21 * &g.g1 + &f.l22 * &g.g2;
    let y = &f.l31 * &g.g1 + &f.l32 * &g.g2 + &f.l33 * &g.g3;
    Ok((u, y))
}

/// `T sigma2 ‖g12‖^2 / N`: average scalar variance of the prediction-error
/// term. For `p > 1` pass `horizon = p T`.
pub fn variance_trace_bound(g: &GammaVector, horizon: usize, n_cols: usize, sigma2_hat: f64) -> f64 {
    horizon as f64 * sigma2_hat * g.g12_norm_squared() / n_cols as f64
}

/// Unbiased lag-`k` covariance `1/(N-|k|) sum_t c(t+k) c(t)'` of the columns of `cols`.
pub fn lagged_covariance(cols: &DMatrix<f64>, k: isize) -> Result<DMatrix<f64>> {
    let n = cols.ncols();
    let lag = k.unsigned_abs();
    if lag >= n {
        return Err(Error::input(format!("lag |{k}| must be smaller than N = {n}")));
    }
    let count = n - lag;
    let (lead, trail) = if k >= 0 {
        (cols.columns(lag, count), cols.columns(0, count))
    } else {
        (cols.columns(0, count), cols.columns(lag, count))
    };
    Ok(lead * trail.transpose() / count as f64)
}

/// Sample estimate of `Sigma_q(k) = E[q(t+k) q(t)']`, where `q(t)` is the
/// t-th column of `sqrt(N) [Q1; Q2]`.
pub fn estimate_sigma_q(f: &LqFactors, k: isize) -> Result<DMatrix<f64>> {
    lagged_covariance(&q12_columns(f), k)
}

/// `sqrt(N) [Q1; Q2]`
pub fn q12_columns(f: &LqFactors) -> DMatrix<f64> {
    let (a, b, _) = f.block_sizes();
    let mut q = DMatrix::zeros(a + b, f.n_cols);
    q.rows_mut(0, a).copy_from(&f.q1);
    q.rows_mut(a, b).copy_from(&f.q2);
    q * (f.n_cols as f64).sqrt()
}

/// `J_k`: ones where `col - row = k`, zeros elsewhere.
pub fn shift_matrix(k: isize, size: usize) -> DMatrix<f64> {
    DMatrix::from_fn(size, size, |h, c| if c as isize - h as isize == k { 1.0 } else { 0.0 })
}

/// Asymptotic `Var[sqrt(N) e_f]`:
///
/// ```text
/// sum_{k=-T..T} (J_k ⊗ sigma2) (N-|k|)/N  g12' Sigma_q(k)' g12
/// ```
///
/// `sigma_q[k + T]` holds `Sigma_q(k)`.
pub fn prop1_variance(
    g12: &DVector<f64>,
    sigma2: &DMatrix<f64>,
    sigma_q: &[DMatrix<f64>],
    horizon: usize,
    n_cols: usize,
) -> Result<DMatrix<f64>> {
    if sigma_q.len() != 2 * horizon + 1 {
        return Err(Error::input(format!(
            "need Sigma_q for lags -{horizon}..{horizon} ({} matrices), got {}",
            2 * horizon + 1,
            sigma_q.len()
        )));
    }
    let p = sigma2.nrows();
    let mut out = DMatrix::zeros(p * horizon, p * horizon);
    for (idx, sq) in sigma_q.iter().enumerate() {
        if sq.shape() != (g12.len(), g12.len()) {
            return Err(Error::input("Sigma_q has wrong dimension"));
        }
        let k = idx as isize - horizon as isize;
        let weight = (n_cols as f64 - k.unsigned_abs() as f64) / n_cols as f64 * g12.dot(&(sq.transpose() * g12));
        out += shift_matrix(k, horizon).kronecker(sigma2) * weight;
    }
    Ok(out)
}

/// Innovation variance read off the leading `p x p` block of `L33 L33'`,
/// whose limit is `sigma2 * I` (first block of `H_s` is the identity).
pub fn estimate_sigma(l33: &DMatrix<f64>, p: usize) -> f64 {
    let lead = l33.rows(0, p) * l33.rows(0, p).transpose();
    lead.trace() / p as f64
}

/// `T (‖g1‖^2 + ‖g2‖^2) / N`, the expected squared norm of the slack
/// coordinates that explain the prediction error.
pub fn gamma3_norm_target(g1: &DVector<f64>, g2: &DVector<f64>, horizon: usize, n_cols: usize) -> f64 {
    horizon as f64 * (g1.norm_squared() + g2.norm_squared()) / n_cols as f64
}
