//! Monte-Carlo checks of the predictor's finite-sample error statistics:
//! the asymptotic covariance of the projected innovations, the limit of
//! `L33 L33'`, and the size of the slack that explains the prediction error.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::{estimate_sigma, lagged_covariance, prop1_variance, q12_columns};
use crate::error::{Error, Result};
use crate::hankel::{build_bundle, hankel, l33_only, lq_decompose};
use crate::linalg;
use crate::lti::{self, noise_toeplitz, DataMeta, DataSet, NoiseMode, SystemModel};
use crate::rng;

/// One innovation-driven record with the signals the checks need.
struct Record {
    data: DataSet,
    e: DMatrix<f64>,
    x: DMatrix<f64>,
}

fn record(sys: &SystemModel, n_data: usize, input_variance: f64, seed: u64) -> Result<Record> {
    let (n, m) = (sys.order(), sys.n_inputs());
    let u = rng::standard_normal(&mut rng::stream(seed, rng::STREAM_INPUT), m, n_data) * input_variance.sqrt();
    let e = lti::draw_innovations(&sys.sigma2, n_data, &mut rng::stream(seed, rng::STREAM_NOISE))?;
    // burn-in so the state is stationary at t = 0
    let burn = 200;
    let ub = rng::standard_normal(&mut rng::stream(seed, 3), m, burn) * input_variance.sqrt();
    let eb = lti::draw_innovations(&sys.sigma2, burn, &mut rng::stream(seed, 4))?;
    let (_, xb) = lti::simulate(sys, &ub, &eb, &DVector::zeros(n))?;
    let x0 = if burn > 0 && n > 0 {
        &sys.a * xb.column(burn - 1) + &sys.b * ub.column(burn - 1) + &sys.k * eb.column(burn - 1)
    } else {
        DVector::zeros(n)
    };
    let (y, x) = lti::simulate(sys, &u, &e, &x0)?;
    let meta = DataMeta {
        seed,
        snr_db: None,
        mode: NoiseMode::Innovation,
    };
    Ok(Record {
        data: DataSet::new(u, y, meta)?,
        e,
        x,
    })
}

fn unit_vector(len: usize, seed: u64) -> DVector<f64> {
    let v = rng::standard_normal(&mut rng::stream(seed, 5), len, 1)
        .column(0)
        .into_owned();
    let norm = v.norm();
    v / norm
}

fn sigma2_scalar(sys: &SystemModel) -> f64 {
    sys.sigma2.trace() / sys.n_outputs() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Config {
    pub rho: usize,
    pub horizon: usize,
    pub n_cols: usize,
    pub redraws: usize,
    pub seed: u64,
    pub input_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop1Report {
    pub n_cols: usize,
    pub redraws: usize,
    pub gamma12_norm2: f64,
    /// `‖S − V‖_F / ‖V‖_F` between sample and predicted covariance.
    pub cov_rel_err: f64,
    pub trace_sample: f64,
    /// `pT sigma^2 ‖g12‖^2`
    pub trace_predicted: f64,
    pub trace_rel_err: f64,
    /// Every component of the sample mean is within 3 standard errors of 0.
    pub mean_ok: bool,
    #[serde(skip)]
    pub sample_cov: DMatrix<f64>,
    #[serde(skip)]
    pub predicted_cov: DMatrix<f64>,
}

/// Redraw input and innovations `redraws` times with a fixed unit `g12`,
/// form `sqrt(N) e_f = sqrt(N) E_f [Q1; Q2]' g12` from the true innovations
/// and compare its sample covariance with the asymptotic expression.
pub fn prop1_monte_carlo(sys: &SystemModel, cfg: &Prop1Config) -> Result<Prop1Report> {
    if cfg.redraws < 2 {
        return Err(Error::input("need at least two redraws"));
    }
    let (m, p) = (sys.n_inputs(), sys.n_outputs());
    let (rho, t, n) = (cfg.rho, cfg.horizon, cfg.n_cols);
    let n_data = n + rho + t - 1;
    let g12 = unit_vector((m + p) * rho + m * t, cfg.seed);

    let draws: Vec<(DVector<f64>, Vec<DMatrix<f64>>)> = (0..cfg.redraws)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let rec = record(sys, n_data, cfg.input_variance, rng::derive_seed(cfg.seed, r as u64))?;
            let f = lq_decompose(&build_bundle(&rec.data, rho, t)?)?;
            let ef = hankel(&rec.e, rho, rho + t - 1, n)?;
            let q12 = q12_columns(&f);
            // the formula only sees g12' Sigma_q(k) g12, the lag-k covariance of s(t) = g12' q(t)
            let s = DMatrix::from_iterator(1, n, (q12.transpose() * &g12).iter().copied());
            let scaled: DVector<f64> = (ef * s.transpose()).column(0).into_owned();
            let lags = (-(t as isize)..=t as isize)
                .map(|k| lagged_covariance(&s, k))
                .collect::<Result<Vec<_>>>()?;
            Ok((scaled, lags))
        })
        .collect::<Result<Vec<_>>>()?;

    let dim = p * t;
    let count = draws.len() as f64;
    let mean = draws.iter().fold(DVector::zeros(dim), |acc, (v, _)| acc + v) / count;
    let mut cov = DMatrix::zeros(dim, dim);
    for (v, _) in &draws {
        let c = v - &mean;
        cov += &c * c.transpose();
    }
    cov /= count - 1.0;

    let mut avg_lags = vec![DMatrix::zeros(1, 1); 2 * t + 1];
    for (_, lags) in &draws {
        for (acc, l) in avg_lags.iter_mut().zip(lags) {
            *acc += l;
        }
    }
    for l in &mut avg_lags {
        *l /= count;
    }
    let predicted = prop1_variance(&DVector::from_element(1, 1.0), &sys.sigma2, &avg_lags, t, n)?;
    let trace_predicted = dim as f64 * sigma2_scalar(sys) * g12.norm_squared();
    let std_err = cov.diagonal().map(|v| (v / count).sqrt());
    let mean_ok = mean.iter().zip(std_err.iter()).all(|(m, s)| m.abs() <= 3.0 * s);
    Ok(Prop1Report {
        n_cols: n,
        redraws: cfg.redraws,
        gamma12_norm2: g12.norm_squared(),
        cov_rel_err: linalg::rel_frobenius(&cov, &predicted),
        trace_sample: cov.trace(),
        trace_predicted,
        trace_rel_err: (cov.trace() - trace_predicted).abs() / trace_predicted,
        mean_ok,
        sample_cov: cov,
        predicted_cov: predicted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaConfig {
    pub rho: usize,
    pub horizon: usize,
    pub n_values: Vec<usize>,
    pub seeds: usize,
    pub seed: u64,
    pub input_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaRow {
    pub n_cols: usize,
    /// Median over seeds of `‖L33 L33' − sigma2 H_s H_s'‖_F / ‖sigma2 H_s H_s'‖_F`.
    pub median_rel_err: f64,
    pub median_sigma2_hat: f64,
    pub rel_errs: Vec<f64>,
    pub sigma2_hats: Vec<f64>,
}

/// `sigma2 H_s H_s'` (with `I_T ⊗ Sigma_e` for vector outputs).
pub fn noise_gram(sys: &SystemModel, horizon: usize) -> DMatrix<f64> {
    let hs = noise_toeplitz(sys, horizon);
    let sig = linalg::block_diag_repeat(&sys.sigma2, horizon);
    &hs * sig * hs.transpose()
}

pub fn lemma_convergence(sys: &SystemModel, cfg: &LemmaConfig) -> Result<Vec<LemmaRow>> {
    let target = noise_gram(sys, cfg.horizon);
    let p = sys.n_outputs();
    cfg.n_values
        .iter()
        .map(|&n| {
            let n_data = n + cfg.rho + cfg.horizon - 1;
            let per_seed: Vec<(f64, f64)> = (0..cfg.seeds)
                .into_par_iter()
                .map(|s| -> Result<(f64, f64)> {
                    let seed = rng::derive_seed(cfg.seed ^ n as u64, s as u64);
                    let rec = record(sys, n_data, cfg.input_variance, seed)?;
                    let l33 = l33_only(&build_bundle(&rec.data, cfg.rho, cfg.horizon)?);
                    let gram = &l33 * l33.transpose();
                    Ok((linalg::rel_frobenius(&gram, &target), estimate_sigma(&l33, p)))
                })
                .collect::<Result<Vec<_>>>()?;
            let rel_errs: Vec<f64> = per_seed.iter().map(|v| v.0).collect();
            let sigma2_hats: Vec<f64> = per_seed.iter().map(|v| v.1).collect();
            Ok(LemmaRow {
                n_cols: n,
                median_rel_err: median(&rel_errs),
                median_sigma2_hat: median(&sigma2_hats),
                rel_errs,
                sigma2_hats,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop2Config {
    pub rho: usize,
    pub horizon: usize,
    pub n_cols: usize,
    pub redraws: usize,
    pub seed: u64,
    pub input_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop2Report {
    pub n_cols: usize,
    pub redraws: usize,
    /// Sample mean of `‖L33^{-1} (y_0f − y*_f)‖^2`.
    pub mean_norm2: f64,
    /// `pT ‖g12‖^2 / N`
    pub target: f64,
    pub rel_err: f64,
}

/// Compare the data-driven prediction `L31 g1 + L32 g2` against the true
/// predictor `(Gamma X + H_d U_F) alpha`, `alpha = [Q1; Q2]' g12`, whitened
/// by `L33`.
pub fn prop2_check(sys: &SystemModel, cfg: &Prop2Config) -> Result<Prop2Report> {
    let (m, p) = (sys.n_inputs(), sys.n_outputs());
    let (rho, t, n) = (cfg.rho, cfg.horizon, cfg.n_cols);
    let n_data = n + rho + t - 1;
    let a = (m + p) * rho;
    let g12 = unit_vector(a + m * t, cfg.seed);
    let gamma_obs = sys.observability_matrix(t);
    let hd = lti::input_toeplitz(sys, t);

    let norms: Vec<f64> = (0..cfg.redraws)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let rec = record(sys, n_data, cfg.input_variance, rng::derive_seed(cfg.seed, r as u64))?;
            let bundle = build_bundle(&rec.data, rho, t)?;
            let f = lq_decompose(&bundle)?;
            let alpha = q12_columns(&f).transpose() * &g12 / (n as f64).sqrt();
            let x_rho = hankel(&rec.x, rho, rho, n)?;
            let y_true = (&gamma_obs * x_rho + &hd * &bundle.uf) * &alpha;
            let g1 = g12.rows(0, a);
            let g2 = g12.rows(a, m * t);
            let y0 = &f.l31 * g1 + &f.l32 * g2;
            let white = f.l33.solve_lower_triangular(&(y0 - y_true)).ok_or(Error::Singular {
                what: "L33",
                ratio: linalg::diagonal_ratio(&f.l33),
            })?;
            Ok(white.norm_squared())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let target = (p * t) as f64 * g12.norm_squared() / n as f64;
    Ok(Prop2Report {
        n_cols: n,
        redraws: cfg.redraws,
        mean_norm2: mean,
        target,
        rel_err: (mean - target).abs() / target,
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first_order() -> SystemModel {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        SystemModel::new(one(0.7), one(1.0), one(1.0), one(0.0), one(0.4), one(1.0)).unwrap()
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn noise_gram_of_first_order_system() {
        let g = noise_gram(&first_order(), 2);
        // H_s = [1 0; CK 1] with CK = 0.4
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.16]);
        assert!((g - expect).amax() < 1e-14);
    }

    #[test]
    fn small_prop1_run_is_consistent() {
        let cfg = Prop1Config {
            rho: 4,
            horizon: 3,
            n_cols: 2000,
            redraws: 200,
            seed: 1,
            input_variance: 1.0,
        };
        let rep = prop1_monte_carlo(&first_order(), &cfg).unwrap();
        assert!(rep.trace_rel_err < 0.25, "{rep:?}");
        assert!(rep.cov_rel_err < 0.3, "{rep:?}");
    }

    #[test]
    fn small_prop2_run_is_consistent() {
        let cfg = Prop2Config {
            rho: 6,
            horizon: 3,
            n_cols: 2000,
            redraws: 200,
            seed: 2,
            input_variance: 1.0,
        };
        let rep = prop2_check(&first_order(), &cfg).unwrap();
        assert!(rep.rel_err < 0.3, "{rep:?}");
    }
}
