//! Past/future block-Hankel matrices and their LQ factorization.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::DataSet;

/// Relative singular-value tolerance for the full-row-rank check.
pub const RANK_TOL: f64 = 1e-10;

/// Block Hankel matrix of `w` (one sample per column) with block rows
/// `t0..=t1` and `n` columns, scaled by `1/sqrt(n)`. Block `(i, j)` (0-based)
/// is `w(t0 + i + j) / sqrt(n)`.
pub fn hankel(w: &DMatrix<f64>, t0: usize, t1: usize, n: usize) -> Result<DMatrix<f64>> {
    if t1 < t0 {
        return Err(Error::input(format!("t1 ({t1}) < t0 ({t0})")));
    }
    if n == 0 {
        return Err(Error::input("Hankel matrix needs at least one column"));
    }
    let needed = t1 + n;
    if needed > w.ncols() {
        return Err(Error::input(format!(
            "Hankel W[{t0},{t1}] with {n} columns needs {needed} samples, signal has {}",
            w.ncols()
        )));
    }
    let s = w.nrows();
    let rows = t1 - t0 + 1;
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = DMatrix::zeros(s * rows, n);
    for j in 0..n {
        for i in 0..rows {
            let src = w.column(t0 + i + j);
            out.view_mut((i * s, j), (s, 1)).copy_from(&(src * scale));
        }
    }
    Ok(out)
}

/// `Zp = Z[0, rho-1]`, `Uf = U[rho, rho+T-1]`, `Yf = Y[rho, rho+T-1]`, all
/// with `N = N_data - T - rho + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelBundle {
    pub zp: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub rho: usize,
    pub horizon: usize,
    pub n_cols: usize,
    pub m: usize,
    pub p: usize,
}

impl HankelBundle {
    /// `[Zp; Uf; Yf]`
    pub fn stacked(&self) -> DMatrix<f64> {
        let (a, b, c) = (self.zp.nrows(), self.uf.nrows(), self.yf.nrows());
        let mut out = DMatrix::zeros(a + b + c, self.n_cols);
        out.rows_mut(0, a).copy_from(&self.zp);
        out.rows_mut(a, b).copy_from(&self.uf);
        out.rows_mut(a + b, c).copy_from(&self.yf);
        out
    }

    pub fn total_rows(&self) -> usize {
        (self.m + self.p) * self.rho + (self.m + self.p) * self.horizon
    }
}

pub fn build_bundle(data: &DataSet, rho: usize, horizon: usize) -> Result<HankelBundle> {
    if rho == 0 || horizon == 0 {
        return Err(Error::input("rho and T must be positive"));
    }
    let n_data = data.len();
    if n_data < horizon + rho {
        return Err(Error::input(format!(
            "N = N_data - T - rho + 1 = {n_data} - {horizon} - {rho} + 1 is not positive"
        )));
    }
    let n = n_data + 1 - horizon - rho;
    let (m, p) = (data.n_inputs(), data.n_outputs());
    let rows = (m + p) * (rho + horizon);
    if n < rows {
        return Err(Error::input(format!(
            "N = {n} columns cannot give full row rank for {rows} rows; need N_data >= {}",
            rows + horizon + rho - 1
        )));
    }
    if n < 5 * rows {
        // Monte-Carlo runs build one bundle per replica; say it once
        static WARNED: AtomicBool = AtomicBool::new(false);
        if WARNED.swap(true, Ordering::Relaxed) {
            debug!("Hankel bundle has N = {n} columns for {rows} rows (< 5x)");
        } else {
            warn!("Hankel bundle has N = {n} columns for {rows} rows (< 5x); estimates will be noisy");
        }
    }
    Ok(HankelBundle {
        zp: hankel(&data.joint(), 0, rho - 1, n)?,
        uf: hankel(&data.u, rho, rho + horizon - 1, n)?,
        yf: hankel(&data.y, rho, rho + horizon - 1, n)?,
        rho,
        horizon,
        n_cols: n,
        m,
        p,
    })
}

/// `[Zp; Uf; Yf] = L Q` with `L` block lower-triangular (positive diagonal)
/// and `Q` with orthonormal rows.
#[derive(Debug, Clone)]
pub struct LqFactors {
    pub l11: DMatrix<f64>,
    pub l21: DMatrix<f64>,
    pub l22: DMatrix<f64>,
    pub l31: DMatrix<f64>,
    pub l32: DMatrix<f64>,
    pub l33: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub q3: DMatrix<f64>,
    /// 2-norm condition numbers of `L11`, `L22`, `L33`.
    pub cond: [f64; 3],
    /// Numerical rank of the stacked matrix.
    pub rank: usize,
    pub rank_deficient: bool,
    pub rho: usize,
    pub horizon: usize,
    pub n_cols: usize,
    pub m: usize,
    pub p: usize,
}

impl LqFactors {
    /// Full lower-triangular factor.
    pub fn l(&self) -> DMatrix<f64> {
        let (a, b, c) = self.block_sizes();
        let mut l = DMatrix::zeros(a + b + c, a + b + c);
        l.view_mut((0, 0), (a, a)).copy_from(&self.l11);
        l.view_mut((a, 0), (b, a)).copy_from(&self.l21);
        l.view_mut((a, a), (b, b)).copy_from(&self.l22);
        l.view_mut((a + b, 0), (c, a)).copy_from(&self.l31);
        l.view_mut((a + b, a), (c, b)).copy_from(&self.l32);
        l.view_mut((a + b, a + b), (c, c)).copy_from(&self.l33);
        l
    }

    pub fn q(&self) -> DMatrix<f64> {
        let (a, b, c) = self.block_sizes();
        let mut q = DMatrix::zeros(a + b + c, self.n_cols);
        q.rows_mut(0, a).copy_from(&self.q1);
        q.rows_mut(a, b).copy_from(&self.q2);
        q.rows_mut(a + b, c).copy_from(&self.q3);
        q
    }

    /// Row counts of the `(Zp, Uf, Yf)` blocks.
    pub fn block_sizes(&self) -> (usize, usize, usize) {
        (self.l11.nrows(), self.l22.nrows(), self.l33.nrows())
    }

    /// Each L block as `(name, csv)`, for inspection dumps.
    pub fn l_blocks_csv(&self) -> Vec<(&'static str, String)> {
        [
            ("L11", &self.l11),
            ("L21", &self.l21),
            ("L22", &self.l22),
            ("L31", &self.l31),
            ("L32", &self.l32),
            ("L33", &self.l33),
        ]
        .into_iter()
        .map(|(name, m)| (name, matrix_csv(m)))
        .collect()
    }
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Lower-triangular factor of `m = L Q` with positive diagonal, via QR of
/// `m'`. Returns `(L, Q)`; `Q` is only formed when `want_q` is set.
fn lq_of(m: &DMatrix<f64>, want_q: bool) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let qr = m.transpose().qr();
    let mut l = qr.r().transpose();
    let mut q = want_q.then(|| qr.q().transpose());
    for i in 0..l.nrows() {
        if l[(i, i)] < 0.0 {
            let mut col = l.column_mut(i);
            col.neg_mut();
            if let Some(q) = q.as_mut() {
                q.row_mut(i).neg_mut();
            }
        }
    }
    (l, q)
}

pub fn lq_decompose(bundle: &HankelBundle) -> Result<LqFactors> {
    let m = bundle.stacked();
    let (l, q) = lq_of(&m, true);
    let q = q.expect("Q requested");
    let (a, b, c) = (bundle.zp.nrows(), bundle.uf.nrows(), bundle.yf.nrows());
    let block = |r0, c0, nr, nc| l.view((r0, c0), (nr, nc)).into_owned();
    let l11: DMatrix<f64> = block(0, 0, a, a);
    let l22: DMatrix<f64> = block(a, a, b, b);
    let l33: DMatrix<f64> = block(a + b, a + b, c, c);
    let rank = linalg::rank(&l, RANK_TOL);
    let rank_deficient = rank < a + b + c;
    if rank_deficient {
        warn!(
            "stacked Hankel matrix has rank {rank} < {} rows (noise-free data?)",
            a + b + c
        );
    }
    let cond = [
        linalg::condition_number(&l11),
        linalg::condition_number(&l22),
        linalg::condition_number(&l33),
    ];
    Ok(LqFactors {
        l21: block(a, 0, b, a),
        l31: block(a + b, 0, c, a),
        l32: block(a + b, a, c, b),
        l11,
        l22,
        l33,
        q1: q.rows(0, a).into_owned(),
        q2: q.rows(a, b).into_owned(),
        q3: q.rows(a + b, c).into_owned(),
        cond,
        rank,
        rank_deficient,
        rho: bundle.rho,
        horizon: bundle.horizon,
        n_cols: bundle.n_cols,
        m: bundle.m,
        p: bundle.p,
    })
}

/// `L33` alone, skipping formation of `Q`. Used by large-N diagnostics.
pub fn l33_only(bundle: &HankelBundle) -> DMatrix<f64> {
    let (l, _) = lq_of(&bundle.stacked(), false);
    let c = bundle.yf.nrows();
    let start = l.nrows() - c;
    l.view((start, start), (c, c)).into_owned()
}
