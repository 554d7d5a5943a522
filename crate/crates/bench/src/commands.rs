//! Implementation of the CLI verbs. Every verb is deterministic given the
//! effective config (after flag overrides) and its master seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use gddpc::closed_loop::{capped_cost, ControllerMode, Episode, Experiment, Indices};
use gddpc::config::{ExperimentConfig, SystemConfig};
use gddpc::lti::benchmark_system;
use gddpc::predictor::diagnostics::{
    lemma_convergence, median, prop1_monte_carlo, prop2_check, LemmaConfig, LemmaRow, Prop1Config, Prop1Report,
    Prop2Config, Prop2Report,
};
use gddpc::tuning::{argmin, oracle_sweep, SweepResult, TuneMode};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::plot::{boxplot_svg, curve_svg, quantile};

/// Effective configuration of one invocation.
pub struct Study {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Study {
    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        Self::from_config(config, seed, out)
    }

    pub fn from_config(mut config: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            config.master_seed = s;
        }
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        let json = serde_json::to_string(&config)?;
        let hash = format!("{:x}", Sha256::digest(json.as_bytes()));
        Ok(Self { config, hash, out })
    }

    pub fn comments(&self) -> Vec<String> {
        vec![
            format!("config-sha256: {}", self.hash),
            format!("master_seed: {}", self.config.master_seed),
        ]
    }

    pub fn experiment(&self) -> Result<Experiment> {
        Ok(Experiment::from_config(self.config.clone())?)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Noise-free base record plus `n_mc` noisy training replicas.
pub fn generate(study: &Study, dump_lq: bool) -> Result<Vec<PathBuf>> {
    let exp = study.experiment()?;
    let dir = study.out.join("data");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    let base = dir.join("base.csv");
    let mut comment = study.comments();
    comment.push("noise-free record".into());
    exp.base.write_csv(&base, &comment)?;
    files.push(base);
    for j in 0..study.config.n_mc {
        let path = dir.join(format!("replica_{j:04}.csv"));
        let mut comment = study.comments();
        comment.push(format!("replica: {j}, seed: {}", exp.replica_seed(j)));
        exp.replica(j)?.write_csv(&path, &comment)?;
        files.push(path);
    }
    if dump_lq {
        let lq_dir = study.out.join("lq");
        fs::create_dir_all(&lq_dir)?;
        let f = exp.factors(0)?;
        for (name, csv) in f.l_blocks_csv() {
            write(&lq_dir.join(format!("replica_0000_{name}.csv")), &csv)?;
        }
        info!("L condition numbers (L11, L22, L33): {:?}", f.cond);
    }
    Ok(files)
}

fn cap_for(study: &Study, exp: &Experiment) -> f64 {
    exp.divergence_cap(study.config.n_mc)
}

/// Oracle sweep over the configured grid; writes `sweep_<mode>.csv` and
/// `sweep_<mode>.svg`.
pub fn sweep(study: &Study, mode: TuneMode) -> Result<SweepResult> {
    study.ensure_out()?;
    let exp = study.experiment()?;
    let grid = match mode {
        TuneMode::Beta2 => study.config.grid.beta2.values(),
        TuneMode::Beta3 => study.config.grid.beta3.values(),
    };
    let start = Instant::now();
    let cap = cap_for(study, &exp);
    let res = oracle_sweep(&grid, mode, study.config.n_mc, &exp, cap)?;
    info!(
        "{} sweep: {} points x {} runs in {:.1?}",
        mode.name(),
        grid.len(),
        study.config.n_mc,
        start.elapsed()
    );
    let mut comment = study.comments();
    comment.push(format!(
        "mode: {}, n_mc: {}, cap: {cap}, beta_bar: {}",
        mode.name(),
        study.config.n_mc,
        res.beta_bar
    ));
    write(
        &study.out.join(format!("sweep_{}.csv", mode.name())),
        &res.to_csv(&comment),
    )?;
    let xs: Vec<f64> = res.points.iter().map(|p| p.beta).collect();
    let ys: Vec<f64> = res.points.iter().map(|p| p.j_av).collect();
    write(
        &study.out.join(format!("sweep_{}.svg", mode.name())),
        &curve_svg(
            &format!("oracle sweep ({})", mode.name()),
            mode.name(),
            "J_AV",
            &xs,
            &ys,
            Some(res.beta_bar),
        ),
    )?;
    Ok(res)
}

/// Read `(beta, J_av)` columns of a sweep CSV.
pub fn read_sweep(path: &Path) -> Result<Vec<(f64, f64)>> {
    let rows = read_table(path)?;
    let (header, body) = rows;
    let bi = column(&header, "beta", path)?;
    let ji = column(&header, "J_av", path)?;
    body.iter()
        .map(|(line, r)| {
            Ok((
                parse_cell(r, bi, "beta", *line, path)?,
                parse_cell(r, ji, "J_av", *line, path)?,
            ))
        })
        .collect()
}

fn fixed_beta(study: &Study, which: TuneMode, flag: Option<f64>) -> Result<Option<f64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    let cfg = match which {
        TuneMode::Beta2 => study.config.beta2_fixed,
        TuneMode::Beta3 => study.config.beta3_fixed,
    };
    if cfg.is_some() {
        return Ok(cfg);
    }
    let path = study.out.join(format!("sweep_{}.csv", which.name()));
    if !path.exists() {
        return Ok(None);
    }
    let curve = read_sweep(&path)?;
    let j: Vec<f64> = curve.iter().map(|c| c.1).collect();
    Ok(argmin(&j).map(|i| curve[i].0))
}

/// Resolve a mode name; fixed modes take `β` from `--beta`, the config, or
/// the minimizer of a previous sweep in the output directory.
pub fn resolve_mode(study: &Study, name: &str, beta: Option<f64>) -> Result<ControllerMode> {
    let b2 = if name == "beta2-fixed" {
        fixed_beta(study, TuneMode::Beta2, beta)?
    } else {
        None
    };
    let b3 = if name == "beta3-fixed" {
        fixed_beta(study, TuneMode::Beta3, beta)?
    } else {
        None
    };
    ControllerMode::parse(name, b2, b3).map_err(|e| anyhow!("{e}; pass --beta or run `sweep` first"))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeRow {
    pub replica: usize,
    pub seed: u64,
    pub indices: Indices,
    /// `J` with the divergence cap applied.
    pub j_capped: f64,
    pub diverged: bool,
    pub failed: bool,
    pub betas: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct McSummary {
    pub mode: ControllerMode,
    pub rows: Vec<EpisodeRow>,
}

impl McSummary {
    pub fn costs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.j_capped).collect()
    }

    pub fn median_cost(&self) -> f64 {
        median(&self.costs())
    }

    pub fn to_csv(&self, comment: &[String], t_v: usize) -> String {
        let mut out = String::new();
        for c in comment {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("replica,seed,J,J_u,J_y,diverged,failed");
        let online = self.mode.is_online();
        if online {
            for t in 0..t_v {
                let _ = write!(out, ",beta_{t}");
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.replica, r.seed, r.j_capped, r.indices.j_u, r.indices.j_y, r.diverged as u8, r.failed as u8
            );
            if online {
                for t in 0..t_v {
                    match r.betas.get(t).copied().flatten() {
                        Some(b) => {
                            let _ = write!(out, ",{b}");
                        }
                        None => out.push(','),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn quartiles(values: &[f64]) -> String {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return "no finite values".into();
    }
    v.sort_by(f64::total_cmp);
    format!(
        "min {:.4e}  q1 {:.4e}  median {:.4e}  q3 {:.4e}  max {:.4e}",
        v[0],
        quantile(&v, 0.25),
        quantile(&v, 0.5),
        quantile(&v, 0.75),
        v[v.len() - 1]
    )
}

/// Closed-loop runs over all replicas without writing files.
pub fn run_monte_carlo(exp: &Experiment, mode: ControllerMode, n_mc: usize) -> (McSummary, Vec<Episode>) {
    let episodes = exp.monte_carlo(mode, n_mc);
    let any_bad = episodes.iter().any(|e| !e.is_complete());
    let cap = if any_bad {
        exp.divergence_cap(n_mc)
    } else {
        f64::INFINITY
    };
    let rows = episodes
        .iter()
        .enumerate()
        .map(|(j, ep)| {
            let idx = exp.indices(ep);
            EpisodeRow {
                replica: j,
                seed: ep.seed,
                indices: idx,
                j_capped: capped_cost(ep, &idx, cap),
                diverged: ep.diverged,
                failed: ep.failure.is_some(),
                betas: ep.betas(),
            }
        })
        .collect();
    (McSummary { mode, rows }, episodes)
}

/// Run `mode` over all replicas; writes `episodes_<mode>.jsonl` and
/// `summary_<mode>.csv`, returns the summary and a printable report.
pub fn montecarlo(study: &Study, mode: ControllerMode) -> Result<(McSummary, String)> {
    study.ensure_out()?;
    let exp = study.experiment()?;
    let start = Instant::now();
    let (summary, episodes) = run_monte_carlo(&exp, mode, study.config.n_mc);
    info!(
        "{} x {} episodes in {:.1?}",
        mode.name(),
        study.config.n_mc,
        start.elapsed()
    );

    let mut jsonl = String::new();
    for (j, ep) in episodes.iter().enumerate() {
        for line in ep.to_json_lines().lines() {
            let mut v: serde_json::Value = serde_json::from_str(line)?;
            v["replica"] = j.into();
            jsonl.push_str(&v.to_string());
            jsonl.push('\n');
        }
        if let Some(f) = &ep.failure {
            let _ = writeln!(jsonl, "{}", serde_json::json!({"replica": j, "failure": f}));
        }
    }
    write(&study.out.join(format!("episodes_{}.jsonl", mode.name())), &jsonl)?;
    let mut comment = study.comments();
    comment.push(format!("mode: {}", mode.name()));
    if let Some(b) = match mode {
        ControllerMode::Beta2Fixed(b) | ControllerMode::Beta3Fixed(b) => Some(b),
        _ => None,
    } {
        comment.push(format!("beta: {b}"));
    }
    write(
        &study.out.join(format!("summary_{}.csv", mode.name())),
        &summary.to_csv(&comment, study.config.t_v),
    )?;

    let mut report = String::new();
    let n_bad = summary.rows.iter().filter(|r| r.diverged || r.failed).count();
    let _ = writeln!(
        report,
        "{} over {} episodes ({} diverged or failed)",
        mode.name(),
        summary.rows.len(),
        n_bad
    );
    let col = |f: fn(&EpisodeRow) -> f64| summary.rows.iter().map(f).collect::<Vec<_>>();
    let _ = writeln!(report, "  J   {}", quartiles(&col(|r| r.j_capped)));
    let _ = writeln!(report, "  J_u {}", quartiles(&col(|r| r.indices.j_u)));
    let _ = writeln!(report, "  J_y {}", quartiles(&col(|r| r.indices.j_y)));
    Ok((summary, report))
}

type Table = (Vec<String>, Vec<(usize, csv::StringRecord)>);

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rdr
        .headers()
        .with_context(|| format!("{}: missing header", path.display()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut body = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("{}: malformed row", path.display()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        body.push((line, rec));
    }
    Ok((header, body))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| anyhow!("{}: missing column `{name}`", path.display()))
}

fn parse_cell(rec: &csv::StringRecord, i: usize, name: &str, line: usize, path: &Path) -> Result<f64> {
    let cell = rec.get(i).unwrap_or("");
    cell.trim().parse::<f64>().map_err(|_| {
        anyhow!(
            "{}: line {line}: column `{name}` has non-numeric value `{cell}`",
            path.display()
        )
    })
}

const MODE_ORDER: [&str; 6] = [
    "kalman-oracle",
    "beta2-fixed",
    "beta2-online",
    "beta3-fixed",
    "beta3-online",
    "unreg",
];

/// Boxplots of `J`, `J_u`, `J_y` across all summaries in `dir`, plus one
/// curve per sweep file. Nothing is written unless every input parses.
pub fn plot(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut summaries = Vec::new();
    let mut sweeps = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
                continue;
            };
            if let Some(mode) = name.strip_prefix("summary_").and_then(|n| n.strip_suffix(".csv")) {
                summaries.push((mode.to_owned(), path));
            } else if let Some(mode) = name.strip_prefix("sweep_").and_then(|n| n.strip_suffix(".csv")) {
                sweeps.push((mode.to_owned(), path));
            }
        }
    }
    if summaries.is_empty() && sweeps.is_empty() {
        bail!("no summary_*.csv or sweep_*.csv files in {}", dir.display());
    }
    summaries.sort_by_key(|(m, _)| MODE_ORDER.iter().position(|o| o == m).unwrap_or(MODE_ORDER.len()));
    sweeps.sort();

    let mut outputs: Vec<(PathBuf, String)> = Vec::new();
    if !summaries.is_empty() {
        let mut groups: [Vec<(String, Vec<f64>)>; 3] = Default::default();
        for (mode, path) in &summaries {
            let (header, body) = read_table(path)?;
            for (k, name) in ["J", "J_u", "J_y"].iter().enumerate() {
                let i = column(&header, name, path)?;
                let vals = body
                    .iter()
                    .map(|(line, r)| parse_cell(r, i, name, *line, path))
                    .collect::<Result<Vec<f64>>>()?;
                groups[k].push((mode.clone(), vals));
            }
        }
        for (k, name) in ["J", "J_u", "J_y"].iter().enumerate() {
            outputs.push((
                dir.join(format!("boxplot_{name}.svg")),
                boxplot_svg(&format!("closed-loop {name}"), name, &groups[k]),
            ));
        }
    }
    for (mode, path) in &sweeps {
        let curve = read_sweep(path)?;
        let xs: Vec<f64> = curve.iter().map(|c| c.0).collect();
        let ys: Vec<f64> = curve.iter().map(|c| c.1).collect();
        let mark = argmin(&ys).map(|i| xs[i]);
        outputs.push((
            dir.join(format!("sweep_{mode}.svg")),
            curve_svg(&format!("oracle sweep ({mode})"), mode, "J_AV", &xs, &ys, mark),
        ));
    }
    for (path, svg) in &outputs {
        write(path, svg)?;
    }
    Ok(outputs.into_iter().map(|(p, _)| p).collect())
}

/// Sizes of the statistical checks run by `verify`.
#[derive(Debug, Clone)]
pub struct VerifySettings {
    pub prop1: Prop1Config,
    pub lemma: LemmaConfig,
    pub prop2: Prop2Config,
}

impl VerifySettings {
    /// Full-size checks: N = 10^4 with 500 redraws, N up to 5·10^4 for the
    /// L33 limit. The covariance check uses T = 5: with 500 redraws the sample
    /// covariance of a T-vector has relative Frobenius noise near sqrt((T+1)/500).
    pub fn full(seed: u64) -> Self {
        Self {
            prop1: Prop1Config {
                rho: 20,
                horizon: 5,
                n_cols: 10_000,
                redraws: 500,
                seed,
                input_variance: 1.0,
            },
            lemma: LemmaConfig {
                rho: 20,
                horizon: 20,
                n_values: vec![2_000, 10_000, 50_000],
                seeds: 20,
                seed,
                input_variance: 1.0,
            },
            prop2: Prop2Config {
                rho: 20,
                horizon: 20,
                n_cols: 10_000,
                redraws: 200,
                seed,
                input_variance: 1.0,
            },
        }
    }

    /// Reduced sizes for smoke runs.
    pub fn quick(seed: u64) -> Self {
        Self {
            prop1: Prop1Config {
                rho: 10,
                horizon: 10,
                n_cols: 2_000,
                redraws: 100,
                seed,
                input_variance: 1.0,
            },
            lemma: LemmaConfig {
                rho: 10,
                horizon: 10,
                n_values: vec![500, 2_000, 8_000],
                seeds: 8,
                seed,
                input_variance: 1.0,
            },
            prop2: Prop2Config {
                rho: 10,
                horizon: 10,
                n_cols: 2_000,
                redraws: 50,
                seed,
                input_variance: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub prop1: Prop1Report,
    pub lemma: Vec<LemmaRow>,
    pub prop2: Prop2Report,
}

impl VerifyReport {
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!(
                "prediction-error covariance: rel. Frobenius error {:.3}, trace error {:.3}, zero mean {}",
                self.prop1.cov_rel_err, self.prop1.trace_rel_err, self.prop1.mean_ok
            ),
            format!(
                "whitened prediction-error norm: mean {:.4e} vs {:.4e} (rel. error {:.3})",
                self.prop2.mean_norm2, self.prop2.target, self.prop2.rel_err
            ),
        ];
        for row in &self.lemma {
            out.push(format!(
                "L33 L33' vs noise Gram, N = {}: median rel. error {:.4}, sigma2_hat {:.4}",
                row.n_cols, row.median_rel_err, row.median_sigma2_hat
            ));
        }
        out
    }
}

pub fn verify(system: &Path, settings: &VerifySettings, out: &Path) -> Result<VerifyReport> {
    let sys = benchmark_system(&SystemConfig::load(system)?)?;
    if sys.k.iter().all(|v| *v == 0.0) {
        bail!(
            "{}: verify needs a plant with a nonzero innovation gain",
            system.display()
        );
    }
    let report = VerifyReport {
        prop1: prop1_monte_carlo(&sys, &settings.prop1)?,
        lemma: lemma_convergence(&sys, &settings.lemma)?,
        prop2: prop2_check(&sys, &settings.prop2)?,
    };
    fs::create_dir_all(out)?;
    write(&out.join("verify.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
