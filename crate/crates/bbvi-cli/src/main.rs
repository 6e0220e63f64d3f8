//! `bbvi`: command-line front end for the experiment driver.

use anyhow::{bail, Context, Result};
use bbvi::{
    cmd_compare_parameterizations, cmd_constants, cmd_constants_direct, cmd_gen_data, cmd_run,
    cmd_verify, config_warnings, ExperimentConfig, Family, TargetChoice,
};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "bbvi",
    version,
    about = "Reparameterization-gradient variance bounds for location-scale variational families"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment config file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the CSV to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress warnings on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize with fixed-stepsize SGD and emit the bound trace CSV.
    Run(CommonOpts),
    /// Emit the curvature-constants table row for a regression target,
    /// either from a config or directly from published constants.
    Constants {
        #[command(flatten)]
        common: CommonOpts,
        /// Direct mode: dataset label for the row.
        #[arg(long)]
        dataset_name: Option<String>,
        /// Direct mode: latent dimension.
        #[arg(long)]
        d: Option<usize>,
        /// Direct mode: observation count.
        #[arg(long)]
        n: Option<usize>,
        /// Direct mode: entropy-form smoothness constant.
        #[arg(long)]
        l_h: Option<f64>,
        /// Direct mode: KL-form strong-convexity constant.
        #[arg(long)]
        mu_kl: Option<f64>,
        /// Direct mode: Monte-Carlo samples per estimate.
        #[arg(long = "m", default_value_t = 10)]
        m_samples: usize,
        /// Direct mode: variational family.
        #[arg(long, default_value = "cholesky")]
        family: String,
        /// Direct mode: base-distribution kurtosis.
        #[arg(long, default_value_t = 3.0)]
        kappa: f64,
    },
    /// Re-express one trajectory in every parameterization and compare
    /// measured gradient variance with shared draws.
    CompareParams(CommonOpts),
    /// Run the self-check registry; exits nonzero if any check fails.
    Verify {
        /// Write the report to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic regression dataset CSV.
    GenData {
        /// Feature count.
        #[arg(long, default_value_t = 10)]
        d: usize,
        /// Row count.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Observation noise.
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the CSV to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &CommonOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report_warnings(cfg: &ExperimentConfig, quiet: bool) -> Result<()> {
    if quiet {
        return Ok(());
    }
    for warning in config_warnings(cfg)? {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_family(name: &str) -> Result<Family> {
    Ok(match name {
        "mean-field" => Family::MeanField,
        "cholesky" => Family::Cholesky,
        "square-root" => Family::SquareRoot,
        _ => bail!("unknown family {name:?} (expected mean-field, cholesky, or square-root)"),
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            report_warnings(&cfg, common.quiet)?;
            emit(&cmd_run(&cfg)?, common.out.as_ref())
        }
        Command::Constants {
            common,
            dataset_name,
            d,
            n,
            l_h,
            mu_kl,
            m_samples,
            family,
            kappa,
        } => {
            let direct = dataset_name.is_some()
                || d.is_some()
                || n.is_some()
                || l_h.is_some()
                || mu_kl.is_some();
            let table = if direct {
                if common.config.is_some() {
                    bail!("pass either --config or the direct-mode flags, not both");
                }
                let (Some(name), Some(d), Some(n), Some(l_h), Some(mu_kl)) =
                    (dataset_name, d, n, l_h, mu_kl)
                else {
                    bail!(
                        "direct mode needs --dataset-name, --d, --n, --l-h, and --mu-kl together"
                    );
                };
                cmd_constants_direct(&name, d, n, l_h, mu_kl, m_samples, parse_family(&family)?, kappa)?
            } else {
                let mut cfg = load_config(&common)?;
                if common.config.is_none() {
                    cfg.target = TargetChoice::Linreg;
                }
                report_warnings(&cfg, common.quiet)?;
                cmd_constants(&cfg)?
            };
            emit(&table, common.out.as_ref())
        }
        Command::CompareParams(common) => {
            let cfg = load_config(&common)?;
            report_warnings(&cfg, common.quiet)?;
            emit(&cmd_compare_parameterizations(&cfg)?, common.out.as_ref())
        }
        Command::Verify { out } => {
            let ok = match out {
                Some(path) => {
                    let mut file = std::fs::File::create(&path)
                        .with_context(|| format!("writing {}", path.display()))?;
                    let ok = cmd_verify(&mut file)?;
                    file.flush()?;
                    ok
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    cmd_verify(&mut lock)?
                }
            };
            if !ok {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::GenData { d, n, sigma, seed, out } => {
            emit(&cmd_gen_data(d, n, sigma, seed)?, out.as_ref())
        }
    }
}
