//! The three step problems of gamma-DDPC.
//!
//! All share the stage cost `½ Σ_k ‖ŷ(k) − y_r(k)‖²_Q + ‖u(k)‖²_R` and differ
//! in the decision variable and penalty:
//!
//! | problem        | variables  | predictor            | penalty     |
//! |----------------|------------|----------------------|-------------|
//! | unregularized  | `g2`       | `L31 g1 + L32 g2`    | none        |
//! | `beta2`        | `g2`       | `L31 g1 + L32 g2`    | `β2 ‖g2‖²`  |
//! | `beta3`        | `g2`, `g3` | `... + L33 g3`       | `β3 ‖g3‖²`  |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::LqFactors;
use crate::linalg;
use crate::predictor::{self, GammaVector, SINGULAR_TOL};
use crate::qp::{self, QpOptions, QpProblem, QpStatus};

const PSD_TOL: f64 = 1e-12;

/// Per-step weights, lifted block-diagonally over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl ControlWeights {
    /// Requires both weights symmetric positive semidefinite. Whether the
    /// resulting problem is strictly convex is checked at solve time.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, w) in [("Q", &q), ("R", &r)] {
            if !w.is_square() {
                return Err(Error::input(format!("{name} must be square")));
            }
            if (w - w.transpose()).amax() > PSD_TOL * w.amax().max(1.0) {
                return Err(Error::input(format!("{name} must be symmetric")));
            }
            if w.nrows() > 0 && w.clone().symmetric_eigenvalues().min() < -PSD_TOL * w.amax().max(1.0) {
                return Err(Error::input(format!("{name} must be positive semidefinite")));
            }
        }
        Ok(Self { q, r })
    }

    /// `Q = q I_p`, `R = r I_m`.
    pub fn scaled_identity(q: f64, r: f64, m: usize, p: usize) -> Result<Self> {
        Self::new(DMatrix::identity(p, p) * q, DMatrix::identity(m, m) * r)
    }

    /// `‖y‖²_Q + ‖u‖²_R` for one sample.
    pub fn stage_cost(&self, y_err: &DVector<f64>, u: &DVector<f64>) -> f64 {
        y_err.dot(&(&self.q * y_err)) + u.dot(&(&self.r * u))
    }
}

/// Elementwise box sets for `u(k)` and the predicted `ŷ(k)`, repeated over
/// the horizon. Absent bounds are unconstrained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxConstraints {
    pub u_lo: Option<DVector<f64>>,
    pub u_hi: Option<DVector<f64>>,
    pub y_lo: Option<DVector<f64>>,
    pub y_hi: Option<DVector<f64>>,
}

impl BoxConstraints {
    pub fn new(
        u_lo: Option<DVector<f64>>,
        u_hi: Option<DVector<f64>>,
        y_lo: Option<DVector<f64>>,
        y_hi: Option<DVector<f64>>,
    ) -> Result<Self> {
        for (lo, hi, name) in [(&u_lo, &u_hi, "u"), (&y_lo, &y_hi, "y")] {
            if let (Some(lo), Some(hi)) = (lo, hi) {
                if lo.len() != hi.len() {
                    return Err(Error::input(format!("{name} bounds differ in length")));
                }
                if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
                    return Err(Error::input(format!("{name}_lo exceeds {name}_hi")));
                }
            }
        }
        Ok(Self { u_lo, u_hi, y_lo, y_hi })
    }

    pub fn unconstrained() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.u_lo.is_none() && self.u_hi.is_none() && self.y_lo.is_none() && self.y_hi.is_none()
    }

    fn check_dims(&self, m: usize, p: usize) -> Result<()> {
        for (b, len, name) in [
            (&self.u_lo, m, "u_lo"),
            (&self.u_hi, m, "u_hi"),
            (&self.y_lo, p, "y_lo"),
            (&self.y_hi, p, "y_hi"),
        ] {
            if let Some(b) = b {
                if b.len() != len {
                    return Err(Error::input(format!("{name} has length {}, expected {len}", b.len())));
                }
            }
        }
        Ok(())
    }
}

/// Quadratic tracking problem in `z` with affine signals `u = u0 + Bu z`,
/// `y = y0 + By z`, cost `½(‖y − y_r‖²_Q̄ + ‖u‖²_R̄) + z' S z` with diagonal
/// `S = beta * diag(mask)`.
#[derive(Debug, Clone)]
pub(crate) struct AffineTracking {
    pub u0: DVector<f64>,
    pub y0: DVector<f64>,
    hess0: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
    g: DMatrix<f64>,
    h: DVector<f64>,
}

impl AffineTracking {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        u0: DVector<f64>,
        bu: DMatrix<f64>,
        y0: DVector<f64>,
        by: DMatrix<f64>,
        y_r: &DVector<f64>,
        w: &ControlWeights,
        cons: &BoxConstraints,
        horizon: usize,
    ) -> Result<Self> {
        let (m, p) = (w.r.nrows(), w.q.nrows());
        if y_r.len() != y0.len() || y0.len() != p * horizon || u0.len() != m * horizon {
            return Err(Error::input(format!(
                "reference has length {}, expected p*T = {}",
                y_r.len(),
                p * horizon
            )));
        }
        cons.check_dims(m, p)?;
        let qbar = linalg::block_diag_repeat(&w.q, horizon);
        let rbar = linalg::block_diag_repeat(&w.r, horizon);
        let qby = &qbar * &by;
        let rbu = &rbar * &bu;
        let mut hess0 = by.transpose() * &qby + bu.transpose() * &rbu;
        hess0 = (&hess0 + hess0.transpose()) * 0.5;
        let dy = &y0 - y_r;
        let linear = qby.transpose() * &dy + rbu.transpose() * &u0;
        let constant = 0.5 * (dy.dot(&(&qbar * &dy)) + u0.dot(&(&rbar * &u0)));

        // G z <= h from the boxes, one block of rows per bound
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut add = |bound: &Option<DVector<f64>>, sign: f64, base: &DVector<f64>, lift: &DMatrix<f64>| {
            if let Some(b) = bound {
                let k = b.len();
                for i in 0..base.len() {
                    rows.push(lift.row(i).transpose() * sign);
                    rhs.push(sign * (b[i % k] - base[i]));
                }
            }
        };
        add(&cons.u_hi, 1.0, &u0, &bu);
        add(&cons.u_lo, -1.0, &u0, &bu);
        add(&cons.y_hi, 1.0, &y0, &by);
        add(&cons.y_lo, -1.0, &y0, &by);
        let d = bu.ncols();
        let mut g = DMatrix::zeros(rows.len(), d);
        for (i, r) in rows.iter().enumerate() {
            g.set_row(i, &r.transpose());
        }
        Ok(Self {
            u0,
            y0,
            hess0,
            linear,
            constant,
            g,
            h: DVector::from_vec(rhs),
        })
    }

    pub fn problem(&self, beta: f64, mask: &[bool]) -> QpProblem {
        let mut hess = self.hess0.clone();
        for (i, &on) in mask.iter().enumerate() {
            if on {
                hess[(i, i)] += 2.0 * beta;
            }
        }
        QpProblem::new(hess, self.linear.clone(), self.g.clone(), self.h.clone())
    }

    /// Full objective value at `z`, constants included.
    pub fn objective(&self, z: &DVector<f64>, beta: f64, mask: &[bool]) -> f64 {
        let pen: f64 = z.iter().zip(mask).filter(|(_, &on)| on).map(|(v, _)| v * v).sum();
        0.5 * z.dot(&(&self.hess0 * z)) + self.linear.dot(z) + self.constant + beta * pen
    }

    pub fn solve(&self, beta: f64, mask: &[bool], warm: Option<&[usize]>) -> Result<(DVector<f64>, qp::QpSolution)> {
        let prob = self.problem(beta, mask);
        let opts = QpOptions {
            max_iter: None,
            warm_start: warm.map(<[usize]>::to_vec),
        };
        let sol = qp::solve_qp_with(&prob, &opts)?;
        match &sol.status {
            QpStatus::Optimal => Ok((sol.z.clone(), sol)),
            QpStatus::Infeasible { certificate } => Err(Error::Infeasible {
                certificate: certificate.iter().copied().collect(),
            }),
            QpStatus::MaxIter => Err(Error::MaxIter(sol.iterations)),
        }
    }
}

/// Which step problem to solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "beta")]
pub enum Regularization {
    None,
    Beta2(f64),
    Beta3(f64),
}

impl Regularization {
    pub fn beta(&self) -> Option<f64> {
        match *self {
            Regularization::None => None,
            Regularization::Beta2(b) | Regularization::Beta3(b) => Some(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub g2: DVector<f64>,
    /// Zero unless the slack problem was solved.
    pub g3: DVector<f64>,
    pub u_f: DVector<f64>,
    pub y_hat_f: DVector<f64>,
    pub beta_used: Option<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub active_set: Vec<usize>,
}

/// One receding-horizon step: factors, `g1 = L11^{-1} z_init`, previewed
/// reference and weights. Precomputes the quadratic forms so that repeated
/// solves at different `beta` (tuning) only touch the diagonal.
pub struct StepContext<'a> {
    pub factors: &'a LqFactors,
    pub g1: DVector<f64>,
    pub y_r: DVector<f64>,
    two: AffineTracking,
    three: Option<AffineTracking>,
    weights: &'a ControlWeights,
    constraints: &'a BoxConstraints,
}

impl<'a> StepContext<'a> {
    pub fn new(
        factors: &'a LqFactors,
        g1: DVector<f64>,
        y_r: DVector<f64>,
        weights: &'a ControlWeights,
        constraints: &'a BoxConstraints,
    ) -> Result<Self> {
        let ratio = linalg::diagonal_ratio(&factors.l22);
        if ratio <= SINGULAR_TOL {
            return Err(Error::Singular { what: "L22", ratio });
        }
        if g1.len() != factors.l11.ncols() {
            return Err(Error::input(format!(
                "g1 has length {}, expected {}",
                g1.len(),
                factors.l11.ncols()
            )));
        }
        if weights.r.nrows() != factors.m || weights.q.nrows() != factors.p {
            return Err(Error::input("weight dimensions do not match the data"));
        }
        let two = AffineTracking::new(
            &factors.l21 * &g1,
            factors.l22.clone(),
            &factors.l31 * &g1,
            factors.l32.clone(),
            &y_r,
            weights,
            constraints,
            factors.horizon,
        )?;
        Ok(Self {
            factors,
            g1,
            y_r,
            two,
            three: None,
            weights,
            constraints,
        })
    }

    fn slack_problem(&mut self) -> Result<&AffineTracking> {
        if self.three.is_none() {
            let f = self.factors;
            let (b, c) = (f.l22.ncols(), f.l33.ncols());
            let mut bu = DMatrix::zeros(f.l22.nrows(), b + c);
            bu.columns_mut(0, b).copy_from(&f.l22);
            let mut by = DMatrix::zeros(f.l32.nrows(), b + c);
            by.columns_mut(0, b).copy_from(&f.l32);
            by.columns_mut(b, c).copy_from(&f.l33);
            self.three = Some(AffineTracking::new(
                self.two.u0.clone(),
                bu,
                self.two.y0.clone(),
                by,
                &self.y_r,
                self.weights,
                self.constraints,
                f.horizon,
            )?);
        }
        Ok(self.three.as_ref().expect("just built"))
    }

    pub fn solve(&mut self, reg: Regularization) -> Result<StepSolution> {
        self.solve_warm(reg, None)
    }

    /// As [`Self::solve`], starting the QP from a guessed active set.
    pub fn solve_warm(&mut self, reg: Regularization, warm: Option<&[usize]>) -> Result<StepSolution> {
        let b = self.factors.l22.ncols();
        let c = self.factors.l33.ncols();
        if let Some(beta) = reg.beta() {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(Error::input(format!("beta must be finite and >= 0, got {beta}")));
            }
        }
        let (g2, g3, obj, sol) = match reg {
            Regularization::None | Regularization::Beta2(_) => {
                let beta = reg.beta().unwrap_or(0.0);
                let mask = vec![true; b];
                let (z, sol) = self.two.solve(beta, &mask, warm)?;
                let obj = self.two.objective(&z, beta, &mask);
                (z, DVector::zeros(c), obj, sol)
            }
            Regularization::Beta3(beta) => {
                let mut mask = vec![false; b + c];
                mask[b..].iter_mut().for_each(|v| *v = true);
                let prob = self.slack_problem()?;
                let (z, sol) = prob.solve(beta, &mask, warm)?;
                let obj = prob.objective(&z, beta, &mask);
                (z.rows(0, b).into_owned(), z.rows(b, c).into_owned(), obj, sol)
            }
        };
        let gamma = GammaVector::new(self.g1.clone(), g2, g3);
        let (u_f, y_hat_f) = predictor::predict(self.factors, &gamma)?;
        Ok(StepSolution {
            g2: gamma.g2,
            g3: gamma.g3,
            u_f,
            y_hat_f,
            beta_used: reg.beta(),
            objective: obj,
            iterations: sol.iterations,
            active_set: sol.active_set,
        })
    }

    /// Unregularized predictor output `L31 g1 + L32 g2`.
    pub fn y0_of(&self, g2: &DVector<f64>) -> DVector<f64> {
        &self.two.y0 + &self.factors.l32 * g2
    }
}

pub fn solve_unregularized(
    f: &LqFactors,
    g1: &DVector<f64>,
    y_r: &DVector<f64>,
    w: &ControlWeights,
    cons: &BoxConstraints,
) -> Result<StepSolution> {
    StepContext::new(f, g1.clone(), y_r.clone(), w, cons)?.solve(Regularization::None)
}

pub fn solve_beta2(
    f: &LqFactors,
    g1: &DVector<f64>,
    y_r: &DVector<f64>,
    w: &ControlWeights,
    cons: &BoxConstraints,
    beta2: f64,
) -> Result<StepSolution> {
    StepContext::new(f, g1.clone(), y_r.clone(), w, cons)?.solve(Regularization::Beta2(beta2))
}

pub fn solve_beta3(
    f: &LqFactors,
    g1: &DVector<f64>,
    y_r: &DVector<f64>,
    w: &ControlWeights,
    cons: &BoxConstraints,
    beta3: f64,
) -> Result<StepSolution> {
    StepContext::new(f, g1.clone(), y_r.clone(), w, cons)?.solve(Regularization::Beta3(beta3))
}
