//! Receding-horizon simulation: solve, apply the first input, measure,
//! slide the past window, repeat.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SystemConfig};
use crate::controllers::{BoxConstraints, ControlWeights, Regularization, StepContext};
use crate::error::{Error, Result};
use crate::hankel::{build_bundle, lq_decompose, LqFactors};
use crate::lti::{self, benchmark_system, DataSet, InputSpec, NoiseMode, NoiseSpec, SystemModel};
use crate::oracle_mpc::{kalman_step, solve_mpc, KalmanState};
use crate::predictor::{diagnostics::median, gamma1_star, InitWindow};
use crate::rng;
use crate::tuning::{tune_beta, TuneConfig, TuneMode};

/// `y_r(t) = sin(5πt / (T + T_v − 1))` for `t = 0..T + T_v − 1`, one row per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignal {
    pub values: DMatrix<f64>,
}

pub fn reference_signal(horizon: usize, t_v: usize) -> Result<ReferenceSignal> {
    reference_signal_for(horizon, t_v, 1)
}

/// The same sinusoid on each of `p` outputs.
pub fn reference_signal_for(horizon: usize, t_v: usize, p: usize) -> Result<ReferenceSignal> {
    if horizon == 0 || t_v == 0 {
        return Err(Error::input("T and T_v must be positive"));
    }
    let span = (horizon + t_v - 1) as f64;
    let values = DMatrix::from_fn(p, horizon + t_v, |_, t| {
        (5.0 * std::f64::consts::PI * t as f64 / span).sin()
    });
    Ok(ReferenceSignal { values })
}

impl ReferenceSignal {
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// `y_r(t)`, holding the last sample past the end.
    pub fn at(&self, t: usize) -> DVector<f64> {
        self.values.column(t.min(self.len() - 1)).into_owned()
    }

    /// Stacked preview `[y_r(t); ...; y_r(t + T − 1)]`.
    pub fn window(&self, t: usize, horizon: usize) -> DVector<f64> {
        let p = self.values.nrows();
        let mut out = DVector::zeros(p * horizon);
        for k in 0..horizon {
            out.rows_mut(k * p, p).copy_from(&self.at(t + k));
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerMode {
    Unregularized,
    Beta2Fixed(f64),
    Beta3Fixed(f64),
    Beta2Online,
    Beta3Online,
    KalmanOracle,
}

impl ControllerMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerMode::Unregularized => "unreg",
            ControllerMode::Beta2Fixed(_) => "beta2-fixed",
            ControllerMode::Beta3Fixed(_) => "beta3-fixed",
            ControllerMode::Beta2Online => "beta2-online",
            ControllerMode::Beta3Online => "beta3-online",
            ControllerMode::KalmanOracle => "kalman-oracle",
        }
    }

    /// Parse a CLI mode name; fixed modes take their `β` from the arguments.
    pub fn parse(name: &str, beta2: Option<f64>, beta3: Option<f64>) -> Result<Self> {
        let need = |b: Option<f64>, which: &str| {
            b.ok_or_else(|| Error::config(format!("mode `{name}` needs `{which}_fixed` in the config")))
        };
        Ok(match name {
            "unreg" => ControllerMode::Unregularized,
            "beta2-fixed" => ControllerMode::Beta2Fixed(need(beta2, "beta2")?),
            "beta3-fixed" => ControllerMode::Beta3Fixed(need(beta3, "beta3")?),
            "beta2-online" => ControllerMode::Beta2Online,
            "beta3-online" => ControllerMode::Beta3Online,
            "kalman-oracle" => ControllerMode::KalmanOracle,
            other => {
                return Err(Error::input(format!(
                    "unknown mode `{other}` (unreg | beta2-fixed | beta3-fixed | beta2-online | beta3-online | kalman-oracle)"
                )))
            }
        })
    }

    pub fn is_online(&self) -> bool {
        matches!(self, ControllerMode::Beta2Online | ControllerMode::Beta3Online)
    }
}

/// Measurement noise injected while the loop runs.
#[derive(Debug, Clone, PartialEq)]
pub enum LoopNoise {
    None,
    /// White output noise with these per-channel variances.
    Output(DVector<f64>),
    /// Innovations with the plant's covariance, through `K` as well.
    Innovation,
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub rho: usize,
    pub horizon: usize,
    pub t_v: usize,
    pub reference: ReferenceSignal,
    pub weights: ControlWeights,
    pub constraints: BoxConstraints,
    pub noise: LoopNoise,
    /// Divergence when `|y(t)| > blowup_bound`.
    pub blowup_bound: f64,
    pub tune_beta2: TuneConfig,
    pub tune_beta3: TuneConfig,
    pub warm_window: f64,
}

/// One closed-loop sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub y_r: Vec<f64>,
    pub beta: Option<f64>,
    pub objective: f64,
    /// Online modes: whether the matching condition had a sign change.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bracketed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub mode: &'static str,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// `m x len` applied inputs and `p x len` measured outputs.
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub diverged: bool,
    pub failure: Option<String>,
}

impl Episode {
    pub fn failed(mode: ControllerMode, seed: u64, msg: String) -> Self {
        Self {
            mode: mode.name(),
            seed,
            steps: vec![],
            u: DMatrix::zeros(0, 0),
            y: DMatrix::zeros(0, 0),
            diverged: false,
            failure: Some(msg),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Completed without divergence or solver failure.
    pub fn is_complete(&self) -> bool {
        !self.diverged && self.failure.is_none()
    }

    pub fn betas(&self) -> Vec<Option<f64>> {
        self.steps.iter().map(|s| s.beta).collect()
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

fn column_vec(m: &DMatrix<f64>, t: usize) -> DVector<f64> {
    m.column(t).into_owned()
}

/// Simulate one episode from rest. `factors` is required for every mode but
/// `KalmanOracle`. Solver errors end the episode and are recorded in
/// `failure`; they never propagate.
pub fn run_closed_loop(
    mode: ControllerMode,
    plant: &SystemModel,
    factors: Option<&LqFactors>,
    cfg: &LoopConfig,
    seed: u64,
) -> Episode {
    let (m, p) = (plant.n_inputs(), plant.n_outputs());
    let (rho, horizon) = (cfg.rho, cfg.horizon);
    let mut ep = Episode {
        mode: mode.name(),
        seed,
        steps: Vec::with_capacity(cfg.t_v),
        u: DMatrix::zeros(m, 0),
        y: DMatrix::zeros(p, 0),
        diverged: false,
        failure: None,
    };
    if mode != ControllerMode::KalmanOracle && factors.is_none() {
        ep.failure = Some("data-driven mode needs LQ factors".into());
        return ep;
    }

    // history columns 0..rho are the zero warm-up
    let mut u_hist = DMatrix::zeros(m, rho + cfg.t_v);
    let mut y_hist = DMatrix::zeros(p, rho + cfg.t_v);
    let mut x = DVector::zeros(plant.order());
    let mut ks = KalmanState::zeros(plant);
    let mut noise_rng = rng::stream(seed, rng::STREAM_LOOP_NOISE);
    let innov_chol = match cfg.noise {
        LoopNoise::Innovation => plant.sigma2.clone().cholesky().map(|c| c.l()),
        _ => None,
    };
    let mut prev_beta: Option<f64> = None;

    for t in 0..cfg.t_v {
        let y_r = cfg.reference.window(t, horizon);
        let planned = match mode {
            ControllerMode::KalmanOracle => solve_mpc(plant, &ks.x_hat, &y_r, &cfg.weights, &cfg.constraints, horizon)
                .map(|plan| (plan.u_f, None, plan.objective, None)),
            _ => (|| {
                let f = factors.expect("checked above");
                let win = InitWindow::from_history(
                    &u_hist.columns(t, rho).into_owned(),
                    &y_hist.columns(t, rho).into_owned(),
                )?;
                let g1 = gamma1_star(&f.l11, &win)?;
                let mut ctx = StepContext::new(f, g1, y_r.clone(), &cfg.weights, &cfg.constraints)?;
                let mut fixed = |reg| -> Result<_> {
                    let s = ctx.solve(reg)?;
                    Ok((s.u_f, s.beta_used, s.objective, None))
                };
                match mode {
                    ControllerMode::Unregularized => fixed(Regularization::None),
                    ControllerMode::Beta2Fixed(b) => fixed(Regularization::Beta2(b)),
                    ControllerMode::Beta3Fixed(b) => fixed(Regularization::Beta3(b)),
                    ControllerMode::Beta2Online | ControllerMode::Beta3Online => {
                        let tc = if mode == ControllerMode::Beta2Online {
                            &cfg.tune_beta2
                        } else {
                            &cfg.tune_beta3
                        };
                        let out = tune_beta(&mut ctx, tc, prev_beta, cfg.warm_window)?;
                        Ok((out.value.u_f, Some(out.beta), out.value.objective, Some(out.bracketed)))
                    }
                    ControllerMode::KalmanOracle => unreachable!(),
                }
            })(),
        };
        let (u_f, beta, objective, bracketed) = match planned {
            Ok(v) => v,
            Err(e) => {
                ep.failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        prev_beta = beta.or(prev_beta);

        // apply the first input block only
        let u_t = u_f.rows(0, m).into_owned();
        let (y_t, e_t) = match &cfg.noise {
            LoopNoise::None => (&plant.c * &x + &plant.d * &u_t, None),
            LoopNoise::Output(var) => {
                let z = rng::standard_normal(&mut noise_rng, p, 1).column(0).into_owned();
                let v = z.component_mul(&var.map(f64::sqrt));
                (&plant.c * &x + &plant.d * &u_t + v, None)
            }
            LoopNoise::Innovation => {
                let z = rng::standard_normal(&mut noise_rng, p, 1).column(0).into_owned();
                let e = innov_chol.as_ref().map_or_else(|| DVector::zeros(p), |l| l * z);
                (&plant.c * &x + &plant.d * &u_t + &e, Some(e))
            }
        };
        x = &plant.a * &x + &plant.b * &u_t;
        if let Some(e) = &e_t {
            x += &plant.k * e;
        }
        if let Ok(next) = kalman_step(plant, &ks, &u_t, &y_t) {
            ks = next;
        }
        u_hist.set_column(rho + t, &u_t);
        y_hist.set_column(rho + t, &y_t);
        ep.steps.push(StepRecord {
            t,
            u: u_t.iter().copied().collect(),
            y: y_t.iter().copied().collect(),
            y_r: cfg.reference.at(t).iter().copied().collect(),
            beta,
            objective,
            bracketed,
        });
        if !y_t.iter().all(|v| v.is_finite() && v.abs() <= cfg.blowup_bound) {
            ep.diverged = true;
            break;
        }
    }
    let len = ep.steps.len();
    ep.u = u_hist.columns(rho, len).into_owned();
    ep.y = y_hist.columns(rho, len).into_owned();
    ep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Indices {
    /// `T_v^{-1} Σ ‖y − y_r‖²_Q + ‖u‖²_R`
    pub j: f64,
    /// `T_v^{-1} Σ ‖u‖²`
    pub j_u: f64,
    /// `Σ ‖y − y_r‖² / Σ ‖y_r‖²`; `+inf` when the reference is zero.
    pub j_y: f64,
}

/// Indices over the recorded prefix (the full run unless it stopped early).
pub fn performance_indices(ep: &Episode, refs: &ReferenceSignal, w: &ControlWeights) -> Indices {
    let len = ep.u.ncols();
    if len == 0 {
        return Indices {
            j: f64::INFINITY,
            j_u: f64::INFINITY,
            j_y: f64::INFINITY,
        };
    }
    let (mut j, mut j_u, mut err, mut norm) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..len {
        let u = column_vec(&ep.u, t);
        let yr = refs.at(t);
        let e = column_vec(&ep.y, t) - &yr;
        j += w.stage_cost(&e, &u);
        j_u += u.norm_squared();
        err += e.norm_squared();
        norm += yr.norm_squared();
    }
    Indices {
        j: j / len as f64,
        j_u: j_u / len as f64,
        j_y: if norm > 0.0 { err / norm } else { f64::INFINITY },
    }
}

/// Plant, noise-free training record and loop settings of one study.
/// Replica `j` owns seed `derive_seed(master, j + 1)`, used both for its
/// training noise and (on a separate stream) its in-loop noise.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub plant: SystemModel,
    pub base: DataSet,
    pub loop_cfg: LoopConfig,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, plant: SystemModel) -> Result<Self> {
        config.validate()?;
        let (m, p) = (plant.n_inputs(), plant.n_outputs());
        let base = lti::generate_dataset(
            &plant,
            config.n_data,
            &InputSpec {
                variance: config.input_variance,
            },
            &NoiseSpec::noise_free(),
            rng::derive_seed(config.master_seed, 0),
        )?;
        let reference = reference_signal_for(config.horizon, config.t_v, p)?;
        let noise = match (config.noise_mode, config.effective_loop_snr()) {
            (_, None) => LoopNoise::None,
            (NoiseMode::AdditiveOutput, Some(snr)) => LoopNoise::Output(lti::noise_variance_for_snr(&base.y, snr)),
            (NoiseMode::Innovation, Some(_)) => LoopNoise::Innovation,
        };
        let loop_cfg = LoopConfig {
            rho: config.rho,
            horizon: config.horizon,
            t_v: config.t_v,
            blowup_bound: config.blowup_factor * reference.max_abs().max(f64::MIN_POSITIVE),
            reference,
            weights: config.weights(m, p)?,
            constraints: config.box_constraints()?,
            noise,
            tune_beta2: config.tuning.config(TuneMode::Beta2, &config.grid.beta2),
            tune_beta3: config.tuning.config(TuneMode::Beta3, &config.grid.beta3),
            warm_window: config.tuning.warm_window,
        };
        Ok(Self {
            config,
            plant,
            base,
            loop_cfg,
        })
    }

    /// Load the plant named by `config.system`.
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        let plant = benchmark_system(&SystemConfig::load(Path::new(&config.system))?)?;
        Self::new(config, plant)
    }

    pub fn replica_seed(&self, j: usize) -> u64 {
        rng::derive_seed(self.config.master_seed, j as u64 + 1)
    }

    /// Training record of replica `j`.
    pub fn replica(&self, j: usize) -> Result<DataSet> {
        let seed = self.replica_seed(j);
        match self.config.noise_mode {
            NoiseMode::AdditiveOutput => Ok(lti::add_output_noise(&self.base, self.config.snr_db, seed)?.0),
            NoiseMode::Innovation => lti::generate_dataset(
                &self.plant,
                self.config.n_data,
                &InputSpec {
                    variance: self.config.input_variance,
                },
                &NoiseSpec {
                    mode: NoiseMode::Innovation,
                    snr_db: None,
                },
                seed,
            ),
        }
    }

    pub fn factors(&self, j: usize) -> Result<LqFactors> {
        let data = self.replica(j)?;
        lq_decompose(&build_bundle(&data, self.config.rho, self.config.horizon)?)
    }

    pub fn run(&self, mode: ControllerMode, j: usize) -> Episode {
        if mode == ControllerMode::KalmanOracle {
            return self.run_with_factors(mode, None, j);
        }
        match self.factors(j) {
            Ok(f) => self.run_with_factors(mode, Some(&f), j),
            Err(e) => Episode::failed(mode, self.replica_seed(j), e.to_string()),
        }
    }

    pub fn run_with_factors(&self, mode: ControllerMode, factors: Option<&LqFactors>, j: usize) -> Episode {
        run_closed_loop(mode, &self.plant, factors, &self.loop_cfg, self.replica_seed(j))
    }

    pub fn indices(&self, ep: &Episode) -> Indices {
        performance_indices(ep, &self.loop_cfg.reference, &self.loop_cfg.weights)
    }

    /// Episodes for replicas `0..n_mc`, in replica order.
    pub fn monte_carlo(&self, mode: ControllerMode, n_mc: usize) -> Vec<Episode> {
        (0..n_mc).into_par_iter().map(|j| self.run(mode, j)).collect()
    }

    /// `divergence_cap_factor` times the median Kalman-oracle cost.
    pub fn divergence_cap(&self, n_mc: usize) -> f64 {
        let costs: Vec<f64> = self
            .monte_carlo(ControllerMode::KalmanOracle, n_mc)
            .iter()
            .map(|ep| self.indices(ep).j)
            .filter(|j| j.is_finite())
            .collect();
        self.config.divergence_cap_factor * median(&costs)
    }
}

/// Cost with the divergence policy applied.
pub fn capped_cost(ep: &Episode, idx: &Indices, cap: f64) -> f64 {
    if ep.is_complete() && idx.j.is_finite() {
        idx.j
    } else {
        cap
    }
}
