//! Dense strictly convex QP
//!
//! ```text
//! minimize   ½ z'Hz + f'z
//! subject to G z <= h
//! ```
//!
//! solved with a dual active-set method in the style of Goldfarb–Idnani:
//! start from the unconstrained minimizer, repeatedly add the most violated
//! constraint and take primal/dual steps that keep the multipliers
//! nonnegative. The iterate is dual feasible throughout, so an empty
//! feasible set shows up as a step of infinite length and yields a Farkas
//! certificate. Problems here are small (tens of variables), so the
//! equality-constrained subproblems are re-solved from a Cholesky factor of
//! `H` at each step instead of updating factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-10;
const DEPENDENCE_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// `c x d`; may have zero rows.
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let d = linear.len();
        Self {
            hessian,
            linear,
            g: DMatrix::zeros(0, d),
            h: DVector::zeros(0),
        }
    }

    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        Self { hessian, linear, g, h }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Smallest eigenvalue of the (symmetrized) Hessian.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.hessian + self.hessian.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    fn check(&self) -> Result<Cholesky<f64, Dyn>> {
        let d = self.dim();
        if self.hessian.shape() != (d, d) || self.g.ncols() != d || self.g.nrows() != self.h.len() {
            return Err(Error::input(format!(
                "QP shapes: H {:?}, f {}, G {:?}, h {}",
                self.hessian.shape(),
                d,
                self.g.shape(),
                self.h.len()
            )));
        }
        let scale = self.hessian.amax().max(1.0);
        if (&self.hessian - self.hessian.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::input("QP Hessian is not symmetric"));
        }
        self.hessian.clone().cholesky().ok_or(Error::NotPositiveDefinite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpStatus {
    Optimal,
    /// `certificate` is `y >= 0` with `y'G = 0`, `y'h < 0`.
    Infeasible {
        certificate: DVector<f64>,
    },
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// One multiplier per constraint; zero off the active set.
    pub multipliers: DVector<f64>,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub status: QpStatus,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Default)]
pub struct QpOptions {
    /// Defaults to `50 * max(d, 1)`.
    pub max_iter: Option<usize>,
    /// Constraints assumed active at the start (e.g. the previous solve's set).
    pub warm_start: Option<Vec<usize>>,
}

/// `z* = −H^{-1} f` through a Cholesky factorization.
pub fn solve_unconstrained(p: &QpProblem) -> Result<DVector<f64>> {
    let chol = p.check()?;
    Ok(-chol.solve(&p.linear))
}

struct ActiveSystem<'a> {
    p: &'a QpProblem,
    chol: Cholesky<f64, Dyn>,
}

impl ActiveSystem<'_> {
    fn row(&self, j: usize) -> DVector<f64> {
        self.p.g.row(j).transpose()
    }

    fn normals(&self, active: &[usize]) -> DMatrix<f64> {
        let d = self.p.dim();
        let mut n = DMatrix::zeros(d, active.len());
        for (c, &j) in active.iter().enumerate() {
            n.set_column(c, &self.row(j));
        }
        n
    }

    /// Solve the Schur system `(N' H^{-1} N) x = rhs`.
    fn schur_solve(&self, hinv_n: &DMatrix<f64>, n: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
        let s = n.transpose() * hinv_n;
        match s.clone().cholesky() {
            Some(c) => c.solve(rhs),
            None => s
                .pseudo_inverse(1e-14)
                .map(|pinv| pinv * rhs)
                .unwrap_or_else(|_| DVector::zeros(rhs.len())),
        }
    }

    /// Minimizer and multipliers with `active` held as equalities.
    fn equality_solve(&self, active: &[usize]) -> (DVector<f64>, DVector<f64>) {
        let hinv_f = self.chol.solve(&self.p.linear);
        if active.is_empty() {
            return (-hinv_f, DVector::zeros(0));
        }
        let n = self.normals(active);
        let hinv_n = self.chol.solve(&n);
        let h_a = DVector::from_iterator(active.len(), active.iter().map(|&j| self.p.h[j]));
        let rhs = -(h_a + n.transpose() * &hinv_f);
        let lambda = self.schur_solve(&hinv_n, &n, &rhs);
        let x = -(hinv_f + hinv_n * &lambda);
        (x, lambda)
    }

    /// Primal/dual change per unit multiplier on constraint `j`.
    fn direction(&self, active: &[usize], j: usize) -> (DVector<f64>, DVector<f64>) {
        let gp = self.row(j);
        let hinv_g = self.chol.solve(&gp);
        if active.is_empty() {
            return (-hinv_g, DVector::zeros(0));
        }
        let n = self.normals(active);
        let hinv_n = self.chol.solve(&n);
        let rhs = -(n.transpose() * &hinv_g);
        let dl = self.schur_solve(&hinv_n, &n, &rhs);
        let dx = -(hinv_g + hinv_n * &dl);
        (dx, dl)
    }

    /// `g_j` lies (numerically) in the span of the active normals.
    fn is_dependent(&self, active: &[usize], j: usize) -> bool {
        let gp = self.row(j);
        let (dx, _) = self.direction(active, j);
        let full = gp.dot(&self.chol.solve(&gp));
        -gp.dot(&dx) <= DEPENDENCE_TOL * full.max(f64::MIN_POSITIVE)
    }

    fn violation(&self, x: &DVector<f64>, j: usize) -> f64 {
        self.p.g.row(j).dot(&x.transpose()) - self.p.h[j]
    }
}

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    solve_qp_with(p, &QpOptions::default())
}

pub fn solve_qp_with(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    let chol = p.check()?;
    let c = p.n_constraints();
    let sys = ActiveSystem { p, chol };
    let max_iter = opts.max_iter.unwrap_or(50 * p.dim().max(1));

    let mut active: Vec<usize> = Vec::new();
    if let Some(warm) = &opts.warm_start {
        for &j in warm {
            if j < c && !active.contains(&j) && !sys.is_dependent(&active, j) {
                active.push(j);
            }
        }
    }
    // restore dual feasibility of the warm set by dropping the most negative multiplier
    let (mut x, mut lambda) = loop {
        let (x, lambda) = sys.equality_solve(&active);
        match lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1))
        {
            Some((k, _)) => {
                active.remove(k);
            }
            None => break (x, lambda),
        }
    };

    let mut iterations = 0;
    let finish = |x: DVector<f64>, lambda: &DVector<f64>, active: Vec<usize>, iterations, status| {
        let mut mult = DVector::zeros(c);
        for (k, &j) in active.iter().enumerate() {
            mult[j] = lambda[k].max(0.0);
        }
        let mut active = active;
        active.sort_unstable();
        QpSolution {
            z: x,
            multipliers: mult,
            active_set: active,
            iterations,
            status,
        }
    };

    loop {
        // most violated constraint, lowest index on ties
        let mut pick: Option<(usize, f64)> = None;
        for j in 0..c {
            if active.contains(&j) {
                continue;
            }
            let v = sys.violation(&x, j);
            if v > FEAS_TOL * (1.0 + p.h[j].abs()) && pick.is_none_or(|(_, best)| v > best) {
                pick = Some((j, v));
            }
        }
        let Some((j, _)) = pick else {
            return Ok(finish(x, &lambda, active, iterations, QpStatus::Optimal));
        };

        let mut lam_j = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Ok(finish(x, &lambda, active, iterations - 1, QpStatus::MaxIter));
            }
            let (dx, dl) = sys.direction(&active, j);
            let gp = sys.row(j);
            let slope = gp.dot(&dx);
            let full = gp.dot(&sys.chol.solve(&gp));
            let primal_step = if -slope > DEPENDENCE_TOL * full.max(f64::MIN_POSITIVE) {
                Some(-sys.violation(&x, j) / slope)
            } else {
                None
            };
            // blocking multiplier, lowest index on ties
            let mut block: Option<(usize, f64)> = None;
            for k in 0..active.len() {
                if dl[k] < 0.0 {
                    let t = lambda[k] / -dl[k];
                    if block.is_none_or(|(_, best)| t < best) {
                        block = Some((k, t));
                    }
                }
            }
            match (primal_step, block) {
                (None, None) => {
                    let mut y = DVector::zeros(c);
                    y[j] = 1.0;
                    for (k, &a) in active.iter().enumerate() {
                        y[a] = dl[k].max(0.0);
                    }
                    return Ok(finish(
                        x,
                        &lambda,
                        active,
                        iterations,
                        QpStatus::Infeasible { certificate: y },
                    ));
                }
                (None, Some((k, t))) => {
                    // dual-only step: drop the blocking constraint
                    lambda += &dl * t;
                    lam_j += t;
                    active.remove(k);
                    lambda = lambda.remove_row(k);
                }
                (Some(t1), block) => {
                    let (t, drop) = match block {
                        Some((k, t2)) if t2 < t1 => (t2, Some(k)),
                        _ => (t1, None),
                    };
                    x += &dx * t;
                    lambda += &dl * t;
                    lam_j += t;
                    match drop {
                        Some(k) => {
                            active.remove(k);
                            lambda = lambda.remove_row(k);
                        }
                        None => {
                            active.push(j);
                            lambda = lambda.push(lam_j);
                            // re-solve to keep the iterate exact on the active set
                            let (xs, ls) = sys.equality_solve(&active);
                            if ls.iter().all(|&l| l >= -1e-12) {
                                x = xs;
                                lambda = ls.map(|l| l.max(0.0));
                            }
                            break;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `‖Hz + f + G'λ‖_inf`
    pub stationarity: f64,
    /// `max(0, max(Gz − h))`
    pub primal: f64,
    /// `max(0, −min λ)`
    pub dual: f64,
    /// `max |λ_j (G_j z − h_j)|`
    pub complementarity: f64,
}

pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktReport {
    let grad = &p.hessian * &sol.z + &p.linear + p.g.transpose() * &sol.multipliers;
    let slack = &p.g * &sol.z - &p.h;
    KktReport {
        stationarity: grad.amax(),
        primal: slack.iter().fold(0.0f64, |a, &s| a.max(s)),
        dual: sol.multipliers.iter().fold(0.0f64, |a, &l| a.max(-l)),
        complementarity: slack
            .iter()
            .zip(sol.multipliers.iter())
            .fold(0.0f64, |a, (s, l)| a.max((s * l).abs())),
    }
}
