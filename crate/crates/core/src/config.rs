//! TOML configuration for plants and experiments.
//!
//! A plant file holds exactly one of `[transfer_function]` or `[state_space]`
//! plus an optional `[innovation]` table:
//!
//! ```toml
//! name = "flexible-transmission"
//! sigma2 = 1.0                      # innovation variance (times I_p)
//!
//! [transfer_function]               # coefficients of q^-k, k = 0, 1, ...
//! num = [0.0, 0.0, 0.0, 0.28261, 0.50666]
//! den = [1.0, -1.41833, 1.58939, -1.31608, 0.88642]
//!
//! [innovation]                      # either an explicit gain ...
//! k = [[0.5], [0.1], [0.0], [0.0]]
//! # ... or covariances, solved through the filter Riccati equation
//! # process_cov = [[...]]
//! # measurement_cov = [[1.0]]
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controllers::{BoxConstraints, ControlWeights};
use crate::error::{Error, Result};
use crate::lti::NoiseMode;
use crate::tuning::TuningSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InnovationConfig {
    Gain {
        k: Vec<Vec<f64>>,
    },
    Covariances {
        process_cov: Vec<Vec<f64>>,
        measurement_cov: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default)]
    pub transfer_function: Option<TransferFunction>,
    #[serde(default)]
    pub state_space: Option<StateSpaceConfig>,
    #[serde(default)]
    pub innovation: Option<InnovationConfig>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            sigma2: 1.0,
            transfer_function: None,
            state_space: None,
            innovation: None,
        }
    }
}

fn one() -> f64 {
    1.0
}

impl SystemConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// Flexible-transmission benchmark (unloaded case, 20 Hz sampling),
    /// output-error noise structure.
    pub fn flexible_transmission() -> Self {
        Self::from_toml(include_str!("../../../configs/flexible_transmission.toml"))
            .expect("shipped plant config parses")
    }
}

/// Log-spaced grid `[min, max]` with `points` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        log_grid(self.min, self.max, self.points)
    }
}

pub fn log_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![min],
        _ => {
            let (lo, hi) = (min.log10(), max.log10());
            (0..points)
                .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (points - 1) as f64))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub beta2: GridSpec,
    pub beta3: GridSpec,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            beta2: GridSpec {
                min: 1.0,
                max: 1e4,
                points: 200,
            },
            beta3: GridSpec {
                min: 1e-4,
                max: 1.0,
                points: 200,
            },
        }
    }
}

/// Box limits as written in the config; absent keys leave a side open.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintsConfig {
    pub u_lo: Option<Vec<f64>>,
    pub u_hi: Option<Vec<f64>>,
    pub y_lo: Option<Vec<f64>>,
    pub y_hi: Option<Vec<f64>>,
}

/// Everything needed to reproduce a Monte-Carlo study. Defaults reproduce
/// the published setup except `n_mc`, which is reduced for desk runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Plant config path, resolved relative to the experiment file.
    pub system: PathBuf,
    pub n_data: usize,
    pub rho: usize,
    pub horizon: usize,
    pub t_v: usize,
    pub q: f64,
    pub r: f64,
    pub input_variance: f64,
    pub noise_mode: NoiseMode,
    /// Training-data SNR. `None` disables training noise.
    pub snr_db: Option<f64>,
    /// In-loop output noise SNR, relative to the noise-free training output.
    /// Defaults to `snr_db`; set `loop_noise = false` to disable.
    pub loop_snr_db: Option<f64>,
    pub loop_noise: bool,
    pub n_mc: usize,
    pub master_seed: u64,
    pub grid: Grids,
    pub tuning: TuningSettings,
    pub constraints: ConstraintsConfig,
    /// Fixed regularization used by `beta2-fixed` / `beta3-fixed` when no
    /// sweep result is supplied.
    pub beta2_fixed: Option<f64>,
    pub beta3_fixed: Option<f64>,
    /// Divergence flag: `|y| > blowup_factor * max|y_r|`.
    pub blowup_factor: f64,
    /// Cost assigned to diverged episodes, as a multiple of the
    /// Kalman-oracle median cost.
    pub divergence_cap_factor: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: PathBuf::from("flexible_transmission.toml"),
            n_data: 250,
            rho: 20,
            horizon: 20,
            t_v: 50,
            q: 2000.0,
            r: 0.01,
            input_variance: 1.0,
            noise_mode: NoiseMode::AdditiveOutput,
            snr_db: Some(13.0),
            loop_snr_db: None,
            loop_noise: true,
            n_mc: 100,
            master_seed: 2023,
            grid: Grids::default(),
            tuning: TuningSettings::default(),
            constraints: ConstraintsConfig::default(),
            beta2_fixed: None,
            beta3_fixed: None,
            blowup_factor: 1e4,
            divergence_cap_factor: 1e6,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Load and resolve `system` relative to the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            msg,
        })?;
        if cfg.system.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.system = dir.join(&cfg.system);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.n_data, "n_data"),
            (self.rho, "rho"),
            (self.horizon, "horizon"),
            (self.t_v, "t_v"),
            (self.n_mc, "n_mc"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{name}` must be positive")));
            }
        }
        if !(self.q >= 0.0 && self.r > 0.0) {
            return Err(Error::config("need q >= 0 and r > 0"));
        }
        if !(self.input_variance > 0.0) {
            return Err(Error::config("input_variance must be positive"));
        }
        if !(self.blowup_factor > 0.0 && self.divergence_cap_factor > 0.0) {
            return Err(Error::config("blowup and cap factors must be positive"));
        }
        for g in [&self.grid.beta2, &self.grid.beta3] {
            if !(g.min > 0.0 && g.min <= g.max && g.points >= 1) {
                return Err(Error::config(format!("bad grid {g:?}")));
            }
        }
        self.tuning.validate()
    }

    pub fn weights(&self, m: usize, p: usize) -> Result<ControlWeights> {
        ControlWeights::scaled_identity(self.q, self.r, m, p)
    }

    pub fn box_constraints(&self) -> Result<BoxConstraints> {
        let c = &self.constraints;
        BoxConstraints::new(
            c.u_lo.clone().map(DVector::from_vec),
            c.u_hi.clone().map(DVector::from_vec),
            c.y_lo.clone().map(DVector::from_vec),
            c.y_hi.clone().map(DVector::from_vec),
        )
    }

    /// In-loop SNR after applying the `loop_noise` switch and the default.
    pub fn effective_loop_snr(&self) -> Option<f64> {
        if self.loop_noise {
            self.loop_snr_db.or(self.snr_db)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1.0, 1e4, 5);
        assert_eq!(g.len(), 5);
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[2] - 100.0).abs() < 1e-9);
        assert!((g[4] - 1e4).abs() < 1e-8);
        assert_eq!(log_grid(3.0, 5.0, 1), vec![3.0]);
    }

    #[test]
    fn defaults_match_published_setup() {
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.n_data, cfg.horizon, cfg.t_v), (250, 20, 50));
        assert_eq!((cfg.q, cfg.r), (2000.0, 0.01));
        assert_eq!(cfg.snr_db, Some(13.0));
        assert_eq!(cfg.grid.beta2.points, 200);
        assert_eq!((cfg.grid.beta3.min, cfg.grid.beta3.max), (1e-4, 1.0));
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("n_mc = 7\nrho = 6\n[grid.beta2]\nmin = 1.0\nmax = 10.0\npoints = 3\n")
            .unwrap();
        assert_eq!(cfg.n_mc, 7);
        assert_eq!(cfg.rho, 6);
        assert_eq!(cfg.grid.beta2.values().len(), 3);
        assert_eq!(cfg.horizon, 20);
        assert!(ExperimentConfig::from_toml("rho = 0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn shipped_plant_config_parses() {
        let cfg = SystemConfig::flexible_transmission();
        assert_eq!(cfg.transfer_function.as_ref().unwrap().den.len(), 5);
    }

    #[test]
    fn innovation_variants() {
        let gain: SystemConfig = SystemConfig::from_toml(
            "[state_space]\na=[[0.5]]\nb=[[1.0]]\nc=[[1.0]]\nd=[[0.0]]\n[innovation]\nk=[[0.2]]\n",
        )
        .unwrap();
        assert!(matches!(gain.innovation, Some(InnovationConfig::Gain { .. })));
        let cov: SystemConfig = SystemConfig::from_toml(
            "[state_space]\na=[[0.5]]\nb=[[1.0]]\nc=[[1.0]]\nd=[[0.0]]\n[innovation]\nprocess_cov=[[1.0]]\nmeasurement_cov=[[1.0]]\n",
        )
        .unwrap();
        assert!(matches!(cov.innovation, Some(InnovationConfig::Covariances { .. })));
    }
}
