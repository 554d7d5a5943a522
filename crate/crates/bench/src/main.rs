use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use gddpc::tuning::TuneMode;
use gddpc_bench::commands::{self, Study, VerifySettings};

#[derive(Parser)]
#[command(about = "Monte-Carlo experiments for data-driven predictive control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "configs/experiment.toml")]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (default: `output_dir` of the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the noise-free record and the noisy training replicas.
    Generate {
        /// Also write the L blocks of replica 0.
        #[arg(long)]
        dump_lq: bool,
    },
    /// Oracle sweep of the average closed-loop cost over a beta grid.
    Sweep {
        /// beta2 | beta3
        #[arg(long)]
        mode: String,
    },
    /// Closed-loop runs over all replicas with one controller.
    Montecarlo {
        /// unreg | beta2-fixed | beta3-fixed | beta2-online | beta3-online | kalman-oracle
        #[arg(long)]
        mode: String,
        /// Regularization for the fixed modes.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Render SVG figures from the CSV results in the output directory.
    Plot,
    /// Statistical checks of the prediction-error formulas.
    Verify {
        /// Plant with a nonzero innovation gain.
        #[arg(long, default_value = "configs/flexible_transmission_innovation.toml")]
        system: PathBuf,
        /// Reduced sample sizes.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate { dump_lq } => {
            let study = Study::load(&cli.config, cli.seed, cli.out)?;
            let files = commands::generate(&study, dump_lq)?;
            println!(
                "wrote {} data files to {}",
                files.len(),
                study.out.join("data").display()
            );
        }
        Command::Sweep { mode } => {
            let study = Study::load(&cli.config, cli.seed, cli.out)?;
            let mode: TuneMode = mode.parse()?;
            let res = commands::sweep(&study, mode)?;
            let best = res.point_at_min();
            println!(
                "{}: beta_bar = {:.6e}, J_AV(beta_bar) = {:.4e}",
                mode.name(),
                res.beta_bar,
                best.j_av
            );
            for end in [res.points.first(), res.points.last()].into_iter().flatten() {
                println!(
                    "  J_AV({:.1e}) = {:.4e} ({} diverged)",
                    end.beta, end.j_av, end.n_diverged
                );
            }
        }
        Command::Montecarlo { mode, beta } => {
            let study = Study::load(&cli.config, cli.seed, cli.out)?;
            let mode = commands::resolve_mode(&study, &mode, beta)?;
            let (_, report) = commands::montecarlo(&study, mode)?;
            print!("{report}");
        }
        Command::Plot => {
            let dir = match cli.out {
                Some(d) => d,
                None => Study::load(&cli.config, cli.seed, None)?.out,
            };
            for f in commands::plot(&dir)? {
                println!("{}", f.display());
            }
        }
        Command::Verify { system, quick } => {
            let seed = cli.seed.unwrap_or(2023);
            let settings = if quick {
                VerifySettings::quick(seed)
            } else {
                VerifySettings::full(seed)
            };
            let out = cli.out.unwrap_or_else(|| PathBuf::from("results"));
            let report = commands::verify(&system, &settings, &out)?;
            for line in report.lines() {
                println!("{line}");
            }
        }
    }
    Ok(())
}
