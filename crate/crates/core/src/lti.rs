//! Innovation-form LTI plants: simulation, training-data generation and
//! realization of the benchmark plant from a transfer-function config.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{InnovationConfig, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Relative singular-value tolerance for reachability/observability checks.
pub const MINIMALITY_TOL: f64 = 1e-8;

/// Discrete-time innovation-form model
///
/// ```text
/// x(t+1) = A x(t) + B u(t) + K e(t)
/// y(t)   = C x(t) + D u(t) + e(t),    e ~ N(0, sigma2)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Innovation covariance, `p x p`.
    pub sigma2: DMatrix<f64>,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        k: DMatrix<f64>,
        sigma2: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let p = c.nrows();
        let checks = [
            (a.ncols() == n, "A must be square"),
            (b.nrows() == n, "B must have n rows"),
            (c.ncols() == n, "C must have n columns"),
            (d.shape() == (p, m), "D must be p x m"),
            (k.shape() == (n, p), "K must be n x p"),
            (sigma2.shape() == (p, p), "sigma2 must be p x p"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::input(msg));
            }
        }
        if m == 0 || p == 0 {
            return Err(Error::input("system needs at least one input and one output"));
        }
        let all = [&a, &b, &c, &d, &k, &sigma2];
        if all.iter().any(|mat| mat.iter().any(|v| !v.is_finite())) {
            return Err(Error::input("system matrices must be finite"));
        }
        Ok(Self { a, b, c, d, k, sigma2 })
    }

    /// Noise-free model (`K = 0`, unit innovation variance) from `(A, B, C, D)`.
    pub fn deterministic(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let p = c.nrows();
        Self::new(a, b, c, d, DMatrix::zeros(n, p), DMatrix::identity(p, p))
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn with_gain(mut self, k: DMatrix<f64>, sigma2: DMatrix<f64>) -> Result<Self> {
        if k.shape() != self.k.shape() || sigma2.shape() != self.sigma2.shape() {
            return Err(Error::input("gain or covariance has wrong shape"));
        }
        self.k = k;
        self.sigma2 = sigma2;
        Ok(self)
    }

    /// `[B, AB, ..., A^{n-1}B]`
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.order(), self.n_inputs());
        let mut out = DMatrix::zeros(n, n * m);
        let mut blk = self.b.clone();
        for i in 0..n {
            out.view_mut((0, i * m), (n, m)).copy_from(&blk);
            blk = &self.a * blk;
        }
        out
    }

    /// Extended observability matrix `[C; CA; ...; CA^{horizon-1}]`.
    pub fn observability_matrix(&self, horizon: usize) -> DMatrix<f64> {
        let (n, p) = (self.order(), self.n_outputs());
        let mut out = DMatrix::zeros(horizon * p, n);
        let mut blk = self.c.clone();
        for i in 0..horizon {
            out.view_mut((i * p, 0), (p, n)).copy_from(&blk);
            blk *= &self.a;
        }
        out
    }

    pub fn is_reachable(&self) -> bool {
        linalg::rank(&self.controllability_matrix(), MINIMALITY_TOL) == self.order()
    }

    pub fn is_observable(&self) -> bool {
        linalg::rank(&self.observability_matrix(self.order()), MINIMALITY_TOL) == self.order()
    }

    /// Spectral radius of the one-step predictor dynamics `A − KC`.
    pub fn predictor_spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&(&self.a - &self.k * &self.c))
    }

    /// `D, CB, CAB, ...` (first `count` terms).
    pub fn markov_parameters(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return out;
        }
        out.push(self.d.clone());
        let mut ab = self.b.clone();
        for _ in 1..count {
            out.push(&self.c * &ab);
            ab = &self.a * ab;
        }
        out
    }

    /// Innovation-path Markov parameters `I, CK, CAK, ...`.
    pub fn noise_markov_parameters(&self, count: usize) -> Vec<DMatrix<f64>> {
        let p = self.n_outputs();
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return out;
        }
        out.push(DMatrix::identity(p, p));
        let mut ak = self.k.clone();
        for _ in 1..count {
            out.push(&self.c * &ak);
            ak = &self.a * ak;
        }
        out
    }
}

/// Lower block-Toeplitz matrix whose block `(i, j)`, `i >= j`, is `blocks[i - j]`.
pub fn block_toeplitz(blocks: &[DMatrix<f64>], horizon: usize) -> DMatrix<f64> {
    let (r, c) = blocks[0].shape();
    let mut out = DMatrix::zeros(horizon * r, horizon * c);
    for i in 0..horizon {
        for j in 0..=i {
            out.view_mut((i * r, j * c), (r, c)).copy_from(&blocks[i - j]);
        }
    }
    out
}

/// Toeplitz matrix of input Markov parameters over `horizon` steps.
pub fn input_toeplitz(sys: &SystemModel, horizon: usize) -> DMatrix<f64> {
    block_toeplitz(&sys.markov_parameters(horizon.max(1)), horizon)
}

/// Toeplitz matrix of innovation Markov parameters (unit block diagonal).
pub fn noise_toeplitz(sys: &SystemModel, horizon: usize) -> DMatrix<f64> {
    block_toeplitz(&sys.noise_markov_parameters(horizon.max(1)), horizon)
}

/// Run the innovation-form recursion. Signals are stored one sample per
/// column. Returns `(y, x)` where `x[:, t]` is the state at time `t`.
pub fn simulate(
    sys: &SystemModel,
    u: &DMatrix<f64>,
    e: &DMatrix<f64>,
    x0: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m, p) = (sys.order(), sys.n_inputs(), sys.n_outputs());
    if u.nrows() != m || e.nrows() != p {
        return Err(Error::input(format!(
            "signal rows (u: {}, e: {}) do not match system (m: {m}, p: {p})",
            u.nrows(),
            e.nrows()
        )));
    }
    if u.ncols() != e.ncols() {
        return Err(Error::input(format!(
            "input length {} != innovation length {}",
            u.ncols(),
            e.ncols()
        )));
    }
    if x0.len() != n {
        return Err(Error::input(format!("x0 has length {}, expected {n}", x0.len())));
    }
    let len = u.ncols();
    let mut y = DMatrix::zeros(p, len);
    let mut xs = DMatrix::zeros(n, len);
    let mut x = x0.clone();
    for t in 0..len {
        let ut = u.column(t);
        let et = e.column(t);
        xs.set_column(t, &x);
        let yt = &sys.c * &x + &sys.d * ut + et;
        y.set_column(t, &yt);
        x = &sys.a * &x + &sys.b * ut + &sys.k * et;
    }
    Ok((y, xs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// `e(t) ~ N(0, sigma2)` drives the innovation-form recursion.
    Innovation,
    /// Noise-free record plus white output noise at a target SNR.
    AdditiveOutput,
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseMode::Innovation => "innovation",
            NoiseMode::AdditiveOutput => "additive-output",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputSpec {
    /// Variance of the white Gaussian excitation.
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    /// Additive-output mode only. `None` or `+inf` disables noise.
    pub snr_db: Option<f64>,
}

impl NoiseSpec {
    pub fn noise_free() -> Self {
        Self {
            mode: NoiseMode::AdditiveOutput,
            snr_db: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub mode: NoiseMode,
}

/// Recorded input/output sequences, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub meta: DataMeta,
}

impl DataSet {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>, meta: DataMeta) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::input(format!(
                "u has {} samples but y has {}",
                u.ncols(),
                y.ncols()
            )));
        }
        if u.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("dataset contains non-finite entries"));
        }
        Ok(Self { u, y, meta })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_inputs(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.y.nrows()
    }

    /// Joint signal `z(t) = [u(t); y(t)]` as an `(m+p) x len` matrix.
    pub fn joint(&self) -> DMatrix<f64> {
        let (m, p) = (self.n_inputs(), self.n_outputs());
        let mut z = DMatrix::zeros(m + p, self.len());
        z.rows_mut(0, m).copy_from(&self.u);
        z.rows_mut(m, p).copy_from(&self.y);
        z
    }

    /// CSV with header `t,u_1..u_m,y_1..y_p`. `comment` lines are written
    /// first, each prefixed by `# `.
    pub fn to_csv(&self, comment: &[String]) -> String {
        let mut out = String::new();
        for line in comment {
            let _ = writeln!(out, "# {line}");
        }
        out.push('t');
        for i in 1..=self.n_inputs() {
            let _ = write!(out, ",u_{i}");
        }
        for i in 1..=self.n_outputs() {
            let _ = write!(out, ",y_{i}");
        }
        out.push('\n');
        for t in 0..self.len() {
            let _ = write!(out, "{t}");
            for v in self.u.column(t).iter().chain(self.y.column(t).iter()) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, comment: &[String]) -> Result<()> {
        std::fs::write(path, self.to_csv(comment)).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let (_, header) = lines.next().ok_or("missing header")?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err("header must start with `t`".into());
        }
        let m = cols.iter().filter(|c| c.starts_with("u_")).count();
        let p = cols.iter().filter(|c| c.starts_with("y_")).count();
        if m + p + 1 != cols.len() || m == 0 || p == 0 {
            return Err(format!("unexpected header `{header}`"));
        }
        let mut values = Vec::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(format!("row {}: expected {} fields", lineno + 1, cols.len()));
            }
            for f in &fields[1..] {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| format!("row {}: bad number `{f}`", lineno + 1))?;
                values.push(v);
            }
        }
        let len = values.len() / (m + p);
        let all = DMatrix::from_column_slice(m + p, len, &values);
        let meta = DataMeta {
            seed: 0,
            snr_db: None,
            mode: NoiseMode::AdditiveOutput,
        };
        DataSet::new(all.rows(0, m).into_owned(), all.rows(m, p).into_owned(), meta).map_err(|e| e.to_string())
    }
}

/// Per-channel empirical (population) variance of a signal.
pub fn channel_variance(sig: &DMatrix<f64>) -> DVector<f64> {
    let len = sig.ncols() as f64;
    DVector::from_iterator(
        sig.nrows(),
        sig.row_iter().map(|row| {
            let mean = row.sum() / len;
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len
        }),
    )
}

/// Output-noise variance per channel giving `10 log10(var(y)/var(v)) = snr_db`.
pub fn noise_variance_for_snr(y_clean: &DMatrix<f64>, snr_db: f64) -> DVector<f64> {
    let ratio = 10f64.powf(snr_db / 10.0);
    channel_variance(y_clean).map(|v| v / ratio)
}

fn check_snr(snr_db: Option<f64>) -> Result<Option<f64>> {
    match snr_db {
        None => Ok(None),
        Some(s) if s == f64::INFINITY => Ok(None),
        Some(s) if s.is_finite() => Ok(Some(s)),
        Some(s) => Err(Error::input(format!("snr_db must be finite or +inf, got {s}"))),
    }
}

/// Add white Gaussian noise to the outputs of `clean` at `snr_db`. Returns the
/// noisy copy and the per-channel noise variance used.
pub fn add_output_noise(clean: &DataSet, snr_db: Option<f64>, seed: u64) -> Result<(DataSet, DVector<f64>)> {
    let p = clean.n_outputs();
    let Some(snr) = check_snr(snr_db)? else {
        let mut out = clean.clone();
        out.meta.seed = seed;
        out.meta.snr_db = None;
        return Ok((out, DVector::zeros(p)));
    };
    let var = noise_variance_for_snr(&clean.y, snr);
    let mut noise = rng::standard_normal(&mut rng::stream(seed, rng::STREAM_NOISE), p, clean.len());
    for (i, mut row) in noise.row_iter_mut().enumerate() {
        row *= var[i].sqrt();
    }
    let meta = DataMeta {
        seed,
        snr_db: Some(snr),
        mode: NoiseMode::AdditiveOutput,
    };
    let ds = DataSet::new(clean.u.clone(), &clean.y + noise, meta)?;
    Ok((ds, var))
}

/// Draw `len` innovations with covariance `sigma2`.
pub(crate) fn draw_innovations(
    sigma2: &DMatrix<f64>,
    len: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let p = sigma2.nrows();
    let white = rng::standard_normal(rng, p, len);
    if sigma2.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(p, len));
    }
    let chol = sigma2
        .clone()
        .cholesky()
        .ok_or_else(|| Error::input("innovation covariance must be positive definite"))?;
    Ok(chol.l() * white)
}

/// Simulate the plant from rest under white Gaussian excitation and corrupt
/// the record according to `noise`. Deterministic in `seed`.
pub fn generate_dataset(
    sys: &SystemModel,
    n_data: usize,
    input: &InputSpec,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<DataSet> {
    if n_data == 0 {
        return Err(Error::input("N_data must be positive"));
    }
    if !(input.variance > 0.0 && input.variance.is_finite()) {
        return Err(Error::input(format!(
            "input variance must be positive, got {}",
            input.variance
        )));
    }
    let (n, m, p) = (sys.order(), sys.n_inputs(), sys.n_outputs());
    let u = rng::standard_normal(&mut rng::stream(seed, rng::STREAM_INPUT), m, n_data) * input.variance.sqrt();
    let x0 = DVector::zeros(n);
    match noise.mode {
        NoiseMode::Innovation => {
            let e = draw_innovations(&sys.sigma2, n_data, &mut rng::stream(seed, rng::STREAM_NOISE))?;
            let (y, _) = simulate(sys, &u, &e, &x0)?;
            let meta = DataMeta {
                seed,
                snr_db: None,
                mode: NoiseMode::Innovation,
            };
            DataSet::new(u, y, meta)
        }
        NoiseMode::AdditiveOutput => {
            let (y, _) = simulate(sys, &u, &DMatrix::zeros(p, n_data), &x0)?;
            let meta = DataMeta {
                seed,
                snr_db: None,
                mode: NoiseMode::AdditiveOutput,
            };
            let clean = DataSet::new(u, y, meta)?;
            Ok(add_output_noise(&clean, noise.snr_db, seed)?.0)
        }
    }
}

/// Observable-canonical realization of
/// `(num[0] + num[1] q^-1 + ...) / (den[0] + den[1] q^-1 + ...)`.
pub fn realize_transfer_function(num: &[f64], den: &[f64]) -> Result<SystemModel> {
    let lead = *den.first().ok_or_else(|| Error::config("denominator is empty"))?;
    if lead == 0.0 {
        return Err(Error::config("leading denominator coefficient must be nonzero"));
    }
    if num.is_empty() {
        return Err(Error::config("numerator is empty"));
    }
    let n = den.len().max(num.len()) - 1;
    let a_coef: Vec<f64> = (1..=n).map(|i| den.get(i).copied().unwrap_or(0.0) / lead).collect();
    let b_coef: Vec<f64> = (0..=n).map(|i| num.get(i).copied().unwrap_or(0.0) / lead).collect();
    let d0 = b_coef[0];
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 1);
    let mut c = DMatrix::zeros(1, n);
    for i in 0..n {
        a[(i, 0)] = -a_coef[i];
        if i + 1 < n {
            a[(i, i + 1)] = 1.0;
        }
        b[(i, 0)] = b_coef[i + 1] - d0 * a_coef[i];
    }
    if n > 0 {
        c[(0, 0)] = 1.0;
    }
    SystemModel::deterministic(a, b, c, DMatrix::from_element(1, 1, d0))
}

/// Spectral radius above `1 + STABILITY_TOL` is rejected as unstable.
pub const STABILITY_TOL: f64 = 1e-9;

/// Build the plant described by `cfg` and validate that it is minimal and
/// (marginally) stable.
pub fn benchmark_system(cfg: &SystemConfig) -> Result<SystemModel> {
    let base = match (&cfg.transfer_function, &cfg.state_space) {
        (Some(tf), None) => realize_transfer_function(&tf.num, &tf.den)?,
        (None, Some(ss)) => SystemModel::deterministic(
            rows_to_matrix(&ss.a, "a")?,
            rows_to_matrix(&ss.b, "b")?,
            rows_to_matrix(&ss.c, "c")?,
            rows_to_matrix(&ss.d, "d")?,
        )
        .map_err(|e| Error::config(e.to_string()))?,
        _ => {
            return Err(Error::config(
                "exactly one of [transfer_function] or [state_space] must be given",
            ))
        }
    };
    let (n, p) = (base.order(), base.n_outputs());

    let reach = linalg::rank(&base.controllability_matrix(), MINIMALITY_TOL);
    let obs = linalg::rank(&base.observability_matrix(n), MINIMALITY_TOL);
    if reach < n || obs < n {
        return Err(Error::config(format!(
            "realization of order {n} is not minimal (reachable rank {reach}, observable rank {obs}); \
             cancel common pole/zero factors"
        )));
    }
    let radius = linalg::spectral_radius(&base.a);
    if radius > 1.0 + STABILITY_TOL {
        return Err(Error::config(format!(
            "plant is unstable: spectral radius of A is {radius:.6}"
        )));
    }

    let sigma2 = DMatrix::identity(p, p) * cfg.sigma2;
    let sys = match &cfg.innovation {
        None => base.with_gain(DMatrix::zeros(n, p), sigma2)?,
        Some(InnovationConfig::Gain { k }) => {
            let k = rows_to_matrix(k, "innovation.k")?;
            base.with_gain(k, sigma2).map_err(|e| Error::config(e.to_string()))?
        }
        Some(InnovationConfig::Covariances {
            process_cov,
            measurement_cov,
        }) => {
            let w = rows_to_matrix(process_cov, "innovation.process_cov")?;
            let v = rows_to_matrix(measurement_cov, "innovation.measurement_cov")?;
            let (k, s) = crate::oracle_mpc::steady_state_gain(&base.a, &base.c, &w, &v)?;
            base.with_gain(k, s)?
        }
    };
    let pred = sys.predictor_spectral_radius();
    if pred >= 1.0 {
        return Err(Error::config(format!(
            "predictor A - KC is unstable (spectral radius {pred:.6})"
        )));
    }
    Ok(sys)
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::config(format!("`{name}` has ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TransferFunction;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn pure_feedthrough() {
        let sys = SystemModel::deterministic(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            scalar(1.0),
        )
        .unwrap();
        let (y, _) = simulate(&sys, &row(&[1.0, 2.0, 3.0]), &DMatrix::zeros(1, 3), &DVector::zeros(1)).unwrap();
        assert_eq!(y, row(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn first_order_hand_recursion() {
        let sys = SystemModel::deterministic(scalar(0.5), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let (y, x) = simulate(&sys, &row(&[1.0, 0.0, 0.0]), &DMatrix::zeros(1, 3), &DVector::zeros(1)).unwrap();
        assert_eq!(y, row(&[0.0, 1.0, 0.5]));
        assert_eq!(x, row(&[0.0, 1.0, 0.5]));
    }

    #[test]
    fn zero_innovations_ignore_gain() {
        let det = SystemModel::deterministic(scalar(0.8), scalar(1.0), scalar(2.0), scalar(0.1)).unwrap();
        let noisy = det.clone().with_gain(scalar(3.0), scalar(1.0)).unwrap();
        let u = row(&[1.0, -1.0, 0.5, 2.0]);
        let e = DMatrix::zeros(1, 4);
        let x0 = DVector::from_element(1, 0.3);
        assert_eq!(
            simulate(&det, &u, &e, &x0).unwrap(),
            simulate(&noisy, &u, &e, &x0).unwrap()
        );
    }

    #[test]
    fn simulate_rejects_mismatch() {
        let sys = SystemModel::deterministic(scalar(0.5), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        assert!(matches!(
            simulate(&sys, &row(&[1.0, 2.0]), &DMatrix::zeros(1, 3), &DVector::zeros(1)),
            Err(Error::Input(_))
        ));
        assert!(simulate(&sys, &row(&[1.0]), &DMatrix::zeros(1, 1), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn first_order_transfer_function_impulse() {
        // q^-1 / (1 - 0.5 q^-1)
        let sys = realize_transfer_function(&[0.0, 1.0], &[1.0, -0.5]).unwrap();
        assert_eq!(sys.order(), 1);
        assert_eq!(sys.a[(0, 0)], 0.5);
        let markov: Vec<f64> = sys.markov_parameters(5).iter().map(|m| m[(0, 0)]).collect();
        assert_eq!(markov, vec![0.0, 1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn feedthrough_only_config() {
        let cfg = SystemConfig {
            transfer_function: Some(TransferFunction {
                num: vec![1.0],
                den: vec![1.0],
            }),
            ..SystemConfig::default()
        };
        let sys = benchmark_system(&cfg).unwrap();
        assert_eq!(sys.order(), 0);
        let u = row(&[0.3, -1.0, 2.0]);
        let (y, _) = simulate(&sys, &u, &DMatrix::zeros(1, 3), &DVector::zeros(0)).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn non_minimal_config_rejected() {
        // (1 - 0.5 q^-1) / (1 - 0.5 q^-1)^2 has a cancelling factor
        let cfg = SystemConfig {
            transfer_function: Some(TransferFunction {
                num: vec![0.0, 1.0, -0.5],
                den: vec![1.0, -1.0, 0.25],
            }),
            ..SystemConfig::default()
        };
        let err = benchmark_system(&cfg).unwrap_err();
        assert!(err.to_string().contains("not minimal"), "{err}");
    }

    #[test]
    fn unstable_config_rejected() {
        let cfg = SystemConfig {
            transfer_function: Some(TransferFunction {
                num: vec![0.0, 1.0],
                den: vec![1.0, -1.5],
            }),
            ..SystemConfig::default()
        };
        assert!(matches!(benchmark_system(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let sys = realize_transfer_function(&[0.0, 1.0], &[1.0, -0.5]).unwrap();
        let spec = NoiseSpec {
            mode: NoiseMode::AdditiveOutput,
            snr_db: Some(13.0),
        };
        let a = generate_dataset(&sys, 100, &InputSpec { variance: 1.0 }, &spec, 5).unwrap();
        let b = generate_dataset(&sys, 100, &InputSpec { variance: 1.0 }, &spec, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&sys, 100, &InputSpec { variance: 1.0 }, &spec, 6).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn noise_disabled_equals_clean_simulation() {
        let sys = realize_transfer_function(&[0.0, 1.0], &[1.0, -0.5]).unwrap();
        let clean = generate_dataset(&sys, 50, &InputSpec { variance: 2.0 }, &NoiseSpec::noise_free(), 1).unwrap();
        let inf = NoiseSpec {
            mode: NoiseMode::AdditiveOutput,
            snr_db: Some(f64::INFINITY),
        };
        let also = generate_dataset(&sys, 50, &InputSpec { variance: 2.0 }, &inf, 1).unwrap();
        let (y, _) = simulate(&sys, &clean.u, &DMatrix::zeros(1, 50), &DVector::zeros(1)).unwrap();
        assert_eq!(clean.y, y);
        assert_eq!(also.y, y);
    }

    #[test]
    fn zero_db_snr_gives_unit_variance_ratio() {
        let sys = realize_transfer_function(&[0.0, 1.0], &[1.0, -0.5]).unwrap();
        let clean = generate_dataset(&sys, 20_000, &InputSpec { variance: 1.0 }, &NoiseSpec::noise_free(), 3).unwrap();
        let (noisy, _) = add_output_noise(&clean, Some(0.0), 9).unwrap();
        let ratio = channel_variance(&(&noisy.y - &clean.y))[0] / channel_variance(&clean.y)[0];
        assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn bad_specs_rejected() {
        let sys = realize_transfer_function(&[0.0, 1.0], &[1.0, -0.5]).unwrap();
        let spec = NoiseSpec::noise_free();
        assert!(generate_dataset(&sys, 10, &InputSpec { variance: 0.0 }, &spec, 0).is_err());
        assert!(generate_dataset(&sys, 0, &InputSpec { variance: 1.0 }, &spec, 0).is_err());
        let nan = NoiseSpec {
            mode: NoiseMode::AdditiveOutput,
            snr_db: Some(f64::NAN),
        };
        assert!(generate_dataset(&sys, 10, &InputSpec { variance: 1.0 }, &nan, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let sys = realize_transfer_function(&[0.0, 1.0], &[1.0, -0.5]).unwrap();
        let ds = generate_dataset(&sys, 20, &InputSpec { variance: 1.0 }, &NoiseSpec::noise_free(), 2).unwrap();
        let text = ds.to_csv(&["hash abc".to_string()]);
        assert!(text.starts_with("# hash abc\nt,u_1,y_1\n"));
        let back = DataSet::parse_csv(&text).unwrap();
        assert_eq!(back.u, ds.u);
        assert_eq!(back.y, ds.y);
    }
}
