//! Choosing the regularization weight.
//!
//! Online: at each step, pick `β` so that the matching condition holds,
//!
//! ```text
//! β2:  ‖L33^{-1}(ŷ_0f − y_r)‖² ≃ pT (‖g1‖² + ‖g2(β2)‖²) / N
//! β3:  ‖g3(β3)‖²              ≃ pT (‖g1‖² + ‖g2(β3)‖²) / N
//! ```
//!
//! by a log-grid scan for a sign change followed by bisection. Offline
//! ("oracle"): average realized closed-loop cost over Monte-Carlo runs for
//! every grid point and keep the minimizer.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{ControllerMode, Experiment};
use crate::config::{log_grid, GridSpec};
use crate::controllers::{Regularization, StepContext, StepSolution};
use crate::error::{Error, Result};
use crate::linalg;
use crate::predictor::SINGULAR_TOL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuneMode {
    Beta2,
    Beta3,
}

impl TuneMode {
    pub fn regularization(self, beta: f64) -> Regularization {
        match self {
            TuneMode::Beta2 => Regularization::Beta2(beta),
            TuneMode::Beta3 => Regularization::Beta3(beta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TuneMode::Beta2 => "beta2",
            TuneMode::Beta3 => "beta3",
        }
    }
}

impl std::str::FromStr for TuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta2" => Ok(TuneMode::Beta2),
            "beta3" => Ok(TuneMode::Beta3),
            _ => Err(Error::input(format!("unknown tuning mode `{s}` (beta2 | beta3)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneConfig {
    pub mode: TuneMode,
    pub beta_min: f64,
    pub beta_max: f64,
    pub grid_points: usize,
    /// Stop bisecting once `|lhs − rhs| <= tol_rel * |rhs|`.
    pub tol_rel: f64,
    pub max_bisect: usize,
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::config(format!(
                "tuning bracket [{}, {}] must satisfy 0 < min < max",
                self.beta_min, self.beta_max
            )));
        }
        if self.grid_points < 2 {
            return Err(Error::config("tuning needs at least 2 grid points"));
        }
        if !(self.tol_rel > 0.0) {
            return Err(Error::config("tol_rel must be positive"));
        }
        Ok(())
    }
}

/// The `[tuning]` table of an experiment config; the bracket comes from the
/// matching grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSettings {
    pub grid_points: usize,
    pub tol_rel: f64,
    pub max_bisect: usize,
    /// Half-width in decades of the per-step bracket centered at the
    /// previous step's `β`. Zero searches the full bracket every step.
    pub warm_window: f64,
}

impl Default for TuningSettings {
    fn default() -> Self {
        Self {
            grid_points: 41,
            tol_rel: 1e-3,
            max_bisect: 60,
            warm_window: 0.0,
        }
    }
}

impl TuningSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.warm_window >= 0.0) {
            return Err(Error::config("warm_window must be >= 0"));
        }
        TuneConfig {
            mode: TuneMode::Beta2,
            beta_min: 1.0,
            beta_max: 2.0,
            grid_points: self.grid_points,
            tol_rel: self.tol_rel,
            max_bisect: self.max_bisect,
        }
        .validate()
    }

    pub fn config(&self, mode: TuneMode, grid: &GridSpec) -> TuneConfig {
        TuneConfig {
            mode,
            beta_min: grid.min,
            beta_max: grid.max,
            grid_points: self.grid_points,
            tol_rel: self.tol_rel,
            max_bisect: self.max_bisect,
        }
    }
}

/// Two sides of a matching condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub lhs: f64,
    pub rhs: f64,
}

impl Matching {
    pub fn residual(&self) -> f64 {
        self.lhs - self.rhs
    }

    pub fn converged(&self, tol_rel: f64) -> bool {
        self.residual().abs() <= tol_rel * self.rhs.abs()
    }
}

/// `pT (‖g1‖² + ‖g2‖²) / N`
fn variance_target(ctx: &StepContext, sol: &StepSolution) -> f64 {
    let f = ctx.factors;
    f.l33.nrows() as f64 * (ctx.g1.norm_squared() + sol.g2.norm_squared()) / f.n_cols as f64
}

/// `L33^{-1} v`, through the pseudo-inverse when `L33` is numerically
/// singular. The flag reports the fallback.
pub fn l33_solve(ctx: &StepContext, v: &DVector<f64>) -> (DVector<f64>, bool) {
    let l33 = &ctx.factors.l33;
    if linalg::diagonal_ratio(l33) > SINGULAR_TOL {
        if let Some(x) = linalg::solve_lower(l33, v) {
            return (x, false);
        }
    }
    let pinv = l33.clone().pseudo_inverse(1e-12 * l33.amax().max(f64::MIN_POSITIVE));
    (pinv.map(|p| p * v).unwrap_or_else(|_| DVector::zeros(v.len())), true)
}

/// Solve the `β2` problem and evaluate both sides of its matching condition.
pub fn beta2_matching(ctx: &mut StepContext, beta2: f64) -> Result<(Matching, StepSolution)> {
    let sol = ctx.solve(Regularization::Beta2(beta2))?;
    let (w, _) = l33_solve(ctx, &(&sol.y_hat_f - &ctx.y_r));
    let m = Matching {
        lhs: w.norm_squared(),
        rhs: variance_target(ctx, &sol),
    };
    Ok((m, sol))
}

pub fn beta2_residual(ctx: &mut StepContext, beta2: f64) -> Result<f64> {
    Ok(beta2_matching(ctx, beta2)?.0.residual())
}

/// Solve the `β3` problem and evaluate both sides of its matching condition.
pub fn beta3_matching(ctx: &mut StepContext, beta3: f64) -> Result<(Matching, StepSolution)> {
    let sol = ctx.solve(Regularization::Beta3(beta3))?;
    let m = Matching {
        lhs: sol.g3.norm_squared(),
        rhs: variance_target(ctx, &sol),
    };
    Ok((m, sol))
}

pub fn beta3_residual(ctx: &mut StepContext, beta3: f64) -> Result<f64> {
    Ok(beta3_matching(ctx, beta3)?.0.residual())
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T> {
    pub beta: f64,
    pub matching: Matching,
    pub value: T,
    /// False when no sign change was found and the smallest `|residual|`
    /// grid point was returned instead.
    pub bracketed: bool,
    pub evaluations: usize,
}

/// Root search of `lhs − rhs` over `[lo, hi]` on a log scale. Returns the
/// evaluated point with the smallest `|residual|`.
pub fn search<T, F>(mut eval: F, lo: f64, hi: f64, cfg: &TuneConfig) -> Result<SearchOutcome<T>>
where
    F: FnMut(f64) -> Result<(Matching, T)>,
{
    let mut evaluations = 0;
    let mut best: Option<(f64, Matching, T)> = None;
    let mut last_err = None;
    let keep = |beta: f64, m: Matching, v: T, best: &mut Option<(f64, Matching, T)>| {
        if best
            .as_ref()
            .is_none_or(|(_, b, _)| m.residual().abs() < b.residual().abs())
        {
            *best = Some((beta, m, v));
        }
    };

    let grid = log_grid(lo, hi, cfg.grid_points.max(2));
    let mut scan: Vec<Option<f64>> = Vec::with_capacity(grid.len());
    for &beta in &grid {
        evaluations += 1;
        match eval(beta) {
            Ok((m, v)) => {
                scan.push(Some(m.residual()));
                keep(beta, m, v, &mut best);
            }
            Err(e) => {
                scan.push(None);
                last_err = Some(e);
            }
        }
    }
    let Some((best_beta, _, _)) = best.as_ref() else {
        return Err(Error::Tuning(format!(
            "no admissible solve in [{lo}, {hi}]: {}",
            last_err.map_or_else(String::new, |e| e.to_string())
        )));
    };
    if best.as_ref().is_some_and(|(_, m, _)| m.residual() == 0.0) {
        let (beta, matching, value) = best.expect("checked");
        return Ok(SearchOutcome {
            beta,
            matching,
            value,
            bracketed: true,
            evaluations,
        });
    }

    // sign change nearest to the best grid point
    let best_idx = grid.iter().position(|g| g == best_beta).unwrap_or(0);
    let pair = (0..grid.len() - 1)
        .filter(|&i| matches!((scan[i], scan[i + 1]), (Some(a), Some(b)) if a * b < 0.0))
        .min_by_key(|&i| {
            (i as isize - best_idx as isize)
                .abs()
                .min((i as isize + 1 - best_idx as isize).abs())
        });
    let Some(i) = pair else {
        let (beta, matching, value) = best.expect("checked");
        return Ok(SearchOutcome {
            beta,
            matching,
            value,
            bracketed: false,
            evaluations,
        });
    };

    let (mut a, mut b) = (grid[i].ln(), grid[i + 1].ln());
    let sign_a = scan[i].expect("admissible").signum();
    for _ in 0..cfg.max_bisect {
        if b - a < 1e-14 {
            break;
        }
        let mid = 0.5 * (a + b);
        let beta = mid.exp();
        evaluations += 1;
        let Ok((m, v)) = eval(beta) else {
            break;
        };
        let r = m.residual();
        let done = m.converged(cfg.tol_rel) || r == 0.0;
        keep(beta, m, v, &mut best);
        if done {
            break;
        }
        if r.signum() == sign_a {
            a = mid;
        } else {
            b = mid;
        }
    }
    let (beta, matching, value) = best.expect("checked");
    Ok(SearchOutcome {
        beta,
        matching,
        value,
        bracketed: true,
        evaluations,
    })
}

/// Pick `β` for one step. With `center` and a positive `warm_window`, the
/// bracket is first narrowed around `center`; the full bracket is searched
/// if no sign change shows up there.
pub fn tune_beta(
    ctx: &mut StepContext,
    cfg: &TuneConfig,
    center: Option<f64>,
    warm_window: f64,
) -> Result<SearchOutcome<StepSolution>> {
    cfg.validate()?;
    let mut eval = |beta: f64| match cfg.mode {
        TuneMode::Beta2 => beta2_matching(ctx, beta),
        TuneMode::Beta3 => beta3_matching(ctx, beta),
    };
    if let (Some(c), true) = (center, warm_window > 0.0) {
        let span = 10f64.powf(warm_window);
        let lo = (c / span).max(cfg.beta_min);
        let hi = (c * span).min(cfg.beta_max);
        if lo < hi {
            let out = search(&mut eval, lo, hi, cfg)?;
            if out.bracketed {
                return Ok(out);
            }
        }
    }
    search(eval, cfg.beta_min, cfg.beta_max, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub j_av: f64,
    /// Averaged over non-diverged episodes; NaN if all diverged.
    pub j_u_av: f64,
    pub j_y_av: f64,
    pub n_diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: TuneMode,
    pub points: Vec<SweepPoint>,
    pub beta_bar: f64,
    /// Cost charged to diverged episodes.
    pub cap: f64,
}

impl SweepResult {
    pub fn to_csv(&self, comment: &[String]) -> String {
        let mut out = String::new();
        for c in comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("beta,J_av,J_u_av,J_y_av,n_diverged\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.beta, p.j_av, p.j_u_av, p.j_y_av, p.n_diverged
            ));
        }
        out
    }

    pub fn point_at_min(&self) -> &SweepPoint {
        self.points
            .iter()
            .find(|p| p.beta == self.beta_bar)
            .expect("beta_bar is a grid point")
    }
}

/// Index of the smallest value, lowest index on ties; NaN never wins.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_nan() && best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Average closed-loop cost over `n_mc` replicas at each grid point.
/// Diverged or failed episodes are charged `cap`.
pub fn oracle_sweep(grid: &[f64], mode: TuneMode, n_mc: usize, exp: &Experiment, cap: f64) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::input("sweep grid is empty"));
    }
    let factors: Vec<_> = (0..n_mc).into_par_iter().map(|j| exp.factors(j)).collect();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|i| (0..n_mc).map(move |j| (i, j))).collect();
    // (grid index, (J, J_u, J_y) when the run completed)
    type Run = (usize, Option<(f64, f64, f64)>);
    let results: Vec<Run> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let ctl = match mode {
                TuneMode::Beta2 => ControllerMode::Beta2Fixed(grid[i]),
                TuneMode::Beta3 => ControllerMode::Beta3Fixed(grid[i]),
            };
            let ep = match &factors[j] {
                Ok(f) => exp.run_with_factors(ctl, Some(f), j),
                Err(e) => crate::closed_loop::Episode::failed(ctl, exp.replica_seed(j), e.to_string()),
            };
            let idx = exp.indices(&ep);
            let ok = !(ep.diverged || ep.failure.is_some()) && idx.j.is_finite();
            (i, ok.then_some((idx.j, idx.j_u, idx.j_y)))
        })
        .collect();

    let mut points = Vec::with_capacity(grid.len());
    for (i, &beta) in grid.iter().enumerate() {
        let mine: Vec<_> = results.iter().filter(|(k, _)| *k == i).map(|(_, r)| *r).collect();
        let good: Vec<(f64, f64, f64)> = mine.iter().flatten().copied().collect();
        let n_diverged = mine.len() - good.len();
        let total: f64 = good.iter().map(|g| g.0).sum::<f64>() + cap * n_diverged as f64;
        let mean = |k: fn(&(f64, f64, f64)) -> f64| {
            if good.is_empty() {
                f64::NAN
            } else {
                good.iter().map(k).sum::<f64>() / good.len() as f64
            }
        };
        points.push(SweepPoint {
            beta,
            j_av: total / n_mc.max(1) as f64,
            j_u_av: mean(|g| g.1),
            j_y_av: mean(|g| g.2),
            n_diverged,
        });
    }
    let j: Vec<f64> = points.iter().map(|p| p.j_av).collect();
    let beta_bar = grid[argmin(&j).unwrap_or(0)];
    Ok(SweepResult {
        mode,
        points,
        beta_bar,
        cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::tests::factors;
    use crate::controllers::{BoxConstraints, ControlWeights};

    fn cfg(lo: f64, hi: f64, tol_rel: f64) -> TuneConfig {
        TuneConfig {
            mode: TuneMode::Beta2,
            beta_min: lo,
            beta_max: hi,
            grid_points: 9,
            tol_rel,
            max_bisect: 60,
        }
    }

    #[test]
    fn log_residual_root_is_one() {
        let out = search(
            |b: f64| Ok((Matching { lhs: b.ln(), rhs: 0.0 }, ())),
            0.1,
            10.0,
            &TuneConfig {
                grid_points: 10,
                ..cfg(0.1, 10.0, 1e-6)
            },
        )
        .unwrap();
        assert!(out.bracketed);
        assert!((out.beta - 1.0).abs() < 1e-9, "{}", out.beta);
    }

    #[test]
    fn no_sign_change_returns_smallest_residual() {
        let out = search(
            |b: f64| {
                Ok((
                    Matching {
                        lhs: (b - 3.0).powi(2) + 1.0,
                        rhs: 0.0,
                    },
                    (),
                ))
            },
            1.0,
            10.0,
            &cfg(1.0, 10.0, 1e-3),
        )
        .unwrap();
        assert!(!out.bracketed);
        assert!((1.0..=10.0).contains(&out.beta));
        let grid = log_grid(1.0, 10.0, 9);
        let best = grid.iter().map(|g| (g - 3.0).powi(2)).fold(f64::INFINITY, f64::min);
        assert!(((out.beta - 3.0).powi(2) - best).abs() < 1e-12);
    }

    #[test]
    fn all_failures_is_an_error() {
        let out: Result<SearchOutcome<()>> =
            search(|_| Err(Error::NotPositiveDefinite), 1.0, 10.0, &cfg(1.0, 10.0, 1e-3));
        assert!(matches!(out, Err(Error::Tuning(_))));
    }

    #[test]
    fn bad_bracket_rejected() {
        assert!(cfg(0.0, 1.0, 1e-3).validate().is_err());
        assert!(cfg(2.0, 1.0, 1e-3).validate().is_err());
        assert!(TuneConfig {
            grid_points: 1,
            ..cfg(1.0, 2.0, 1e-3)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn tighter_tolerance_never_worsens_residual() {
        let f = |b: f64| {
            Ok((
                Matching {
                    lhs: b.sqrt(),
                    rhs: 2.2,
                },
                (),
            ))
        };
        let mut prev = f64::INFINITY;
        let mut betas = vec![];
        for tol in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            let out = search(f, 1.0, 100.0, &cfg(1.0, 100.0, tol)).unwrap();
            let r = out.matching.residual().abs();
            assert!(r <= prev);
            assert!(r <= tol * 2.2);
            prev = r;
            betas.push(out.beta);
        }
        let root = 2.2f64 * 2.2;
        for w in betas.windows(2) {
            assert!((w[1] - root).abs() <= (w[0] - root).abs() + 1e-12);
        }
    }

    fn context_parts() -> (crate::hankel::LqFactors, DVector<f64>, DVector<f64>, ControlWeights) {
        let f = factors(11, 4, 8, 400);
        let g1 = DVector::from_fn(f.l11.ncols(), |i, _| 0.3 * ((i + 1) as f64).sin());
        let y_r = DVector::from_fn(8, |i, _| (0.4 * i as f64).sin());
        let w = ControlWeights::scaled_identity(2000.0, 0.01, 1, 1).unwrap();
        (f, g1, y_r, w)
    }

    #[test]
    fn perfect_tracking_at_origin_has_zero_residual() {
        let (f, _, _, w) = context_parts();
        let cons = BoxConstraints::default();
        let mut ctx = StepContext::new(&f, DVector::zeros(f.l11.ncols()), DVector::zeros(8), &w, &cons).unwrap();
        assert_eq!(beta2_residual(&mut ctx, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn beta2_residual_is_continuous() {
        let (f, g1, y_r, w) = context_parts();
        let cons = BoxConstraints::default();
        let mut ctx = StepContext::new(&f, g1, y_r, &w, &cons).unwrap();
        let grid = log_grid(1.0, 1e4, 400);
        let r: Vec<f64> = grid.iter().map(|&b| beta2_residual(&mut ctx, b).unwrap()).collect();
        let scale = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for w in r.windows(2) {
            assert!((w[1] - w[0]).abs() < 0.05 * scale);
        }
    }

    #[test]
    fn beta2_residual_large_beta_limit() {
        let (f, g1, y_r, w) = context_parts();
        let cons = BoxConstraints::default();
        let mut ctx = StepContext::new(&f, g1.clone(), y_r.clone(), &w, &cons).unwrap();
        let (m, _) = beta2_matching(&mut ctx, 1e12).unwrap();
        let (e, _) = l33_solve(&ctx, &(&f.l31 * &g1 - &y_r));
        let rhs = 8.0 * g1.norm_squared() / f.n_cols as f64;
        assert!((m.lhs - e.norm_squared()).abs() <= 1e-6 * e.norm_squared());
        assert!((m.rhs - rhs).abs() <= 1e-6 * rhs);
    }

    #[test]
    fn tuned_beta2_meets_tolerance() {
        let (f, g1, y_r, w) = context_parts();
        let cons = BoxConstraints::default();
        let mut ctx = StepContext::new(&f, g1, y_r, &w, &cons).unwrap();
        let c = TuneConfig {
            grid_points: 41,
            ..cfg(1.0, 1e4, 1e-3)
        };
        let out = tune_beta(&mut ctx, &c, None, 0.0).unwrap();
        assert!((c.beta_min..=c.beta_max).contains(&out.beta));
        assert!(out.matching.rhs > 0.0 && out.matching.rhs.is_finite());
        if out.bracketed {
            assert!(out.matching.converged(1e-3), "{:?}", out.matching);
        }
    }

    #[test]
    fn warm_window_keeps_result_in_bracket() {
        let (f, g1, y_r, w) = context_parts();
        let cons = BoxConstraints::default();
        let mut ctx = StepContext::new(&f, g1, y_r, &w, &cons).unwrap();
        let c = TuneConfig {
            mode: TuneMode::Beta3,
            grid_points: 21,
            ..cfg(1e-4, 1.0, 1e-3)
        };
        let out = tune_beta(&mut ctx, &c, Some(0.9), 1.0).unwrap();
        assert!((1e-4..=1.0).contains(&out.beta));
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin(&[3.0, 1.0, 1.0]), Some(1));
        assert_eq!(argmin(&[f64::NAN, 2.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }
}
