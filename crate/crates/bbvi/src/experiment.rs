//! Experiment driver: configuration, SGD, bound traces, dataset
//! ingestion, and the CSV-emitting commands behind the CLI.
//!
//! Everything here is deterministic given `(config, seed)`: the optimizer,
//! the synthetic datasets, and every variance replication derive their
//! draws from fixed streams of the root seed, so reruns are bit-identical
//! regardless of scheduling.

use crate::basedist::{stream_id, BaseDistribution, RngStream};
use crate::bounds::{
    abc_bounded_entropy, abc_entropy_form, abc_kl_form, evaluate_abc, AbcBound, BoundsError,
};
use crate::estimator::{empirical_sqnorm, grad_estimate, EstimatorError};
use crate::linalg::DenseMatrix;
use crate::reparam::{
    match_parameterizations, Conditioner, Family, ReparamError, ScaleMatrix, VariationalParams,
};
use crate::targets::{
    exact_elbo, kl_to_prior, linreg_target, quadratic_target, quadratic_target_flat,
    target_constants, ConstantsRecord, ElboForm, TargetError, TargetModel,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Stream indices reserved by the driver, one per purpose, so no two
/// consumers of the root seed ever share a generator.
const STREAM_ZSTAR: u64 = 101;
const STREAM_SGD: u64 = 102;
const STREAM_X: u64 = 103;
const STREAM_W: u64 = 104;
const STREAM_NOISE: u64 = 105;
const DOMAIN_TRACE: u64 = 106;
const DOMAIN_COMPARE: u64 = 107;

/// Divergence guard: the optimizer aborts once the flat parameter norm
/// exceeds this.
const DIVERGENCE_NORM: f64 = 1e12;

/// Required first line of every trace CSV.
pub const TRACE_HEADER: &str =
    "t,F_gap,grad_F_sqnorm,gvar_emp,gvar_se,bound_rhs,bound_A_term,bound_B_term,bound_C_const,kl_qp";

/// Required first line of the constants-table CSV.
pub const CONSTANTS_HEADER: &str = "dataset,d,N,L_H,mu_KL,kappa_cond,statdist_sq,A,C";

/// Required first line of the parameterization-comparison CSV.
pub const COMPARE_HEADER: &str =
    "t,gvar_meanfield,gvar_chol_softplus,gvar_chol_identity,gvar_sqroot";

/// Errors from configuration, datasets, and the optimizer.
#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Invalid or inconsistent configuration.
    #[error("config error: {what}")]
    Config { what: String },
    /// Parse failure at a specific config line.
    #[error("config error at line {line}: {what}")]
    ConfigLine { line: usize, what: String },
    /// Dataset ingestion failure.
    #[error("dataset error: {what}")]
    Dataset { what: String },
    /// The optimizer left the trust region.
    #[error(
        "optimizer diverged at iteration {iteration}: parameter norm {norm:.3e} exceeds 1e12"
    )]
    Diverged { iteration: usize, norm: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Reparam(#[from] ReparamError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn config_err(what: impl Into<String>) -> ExperimentError {
    ExperimentError::Config { what: what.into() }
}

/// Which analytic target the experiment optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetChoice {
    /// Isotropic quadratic with a conjugate gaussian prior (or its
    /// flat-prior limit when `lambda = inf`).
    Quadratic,
    /// Gaussian linear regression, from a CSV dataset or synthesized.
    Linreg,
}

/// Which theorem's constants fill the bound columns of the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremChoice {
    /// Entropy-form bound (cross-form curvature constants).
    Entropy,
    /// KL-form bound.
    Kl,
    /// Bounded-entropy bound (clipped-softplus conditioner only).
    BoundedEntropy,
}

impl TheoremChoice {
    fn name(&self) -> &'static str {
        match self {
            TheoremChoice::Entropy => "entropy",
            TheoremChoice::Kl => "kl",
            TheoremChoice::BoundedEntropy => "bounded_entropy",
        }
    }
}

/// A fully validated experiment description.
///
/// Parsed from plain-text `key = value` files (`#` starts a comment); the
/// recognized keys are `target, family, conditioner, S, form, d, N,
/// sigma, lambda, M, T, stepsize, R, eval_every, seed, dataset_path,
/// standardize, theorem`.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub target: TargetChoice,
    pub family: Family,
    /// Scale conditioner; `None` exactly for the square-root family.
    pub conditioner: Option<Conditioner>,
    pub form: ElboForm,
    pub theorem: TheoremChoice,
    /// Latent dimension (ignored when a dataset file provides `d`).
    pub d: usize,
    /// Observation count (quadratic scale factor, or synthetic-regression
    /// rows; ignored when a dataset file provides `N`).
    pub n: usize,
    pub sigma: f64,
    /// Prior scale; `inf` selects the flat-prior quadratic limit.
    pub lambda: f64,
    /// Monte-Carlo samples per gradient estimate.
    pub m_samples: usize,
    /// Optimizer iterations.
    pub iterations: usize,
    /// Fixed SGD stepsize; default is `1 / L_H`.
    pub stepsize: Option<f64>,
    /// Variance replications per logged iterate.
    pub replications: usize,
    /// Logging stride.
    pub eval_every: usize,
    pub seed: u64,
    pub dataset_path: Option<PathBuf>,
    pub standardize: bool,
}

impl Default for ExperimentConfig {
    /// The benchmark quadratic setup: `d = 20`, `N = 100`,
    /// `sigma = 0.3`, `lambda = 8`, `M = 10`, `T = 500`, `R = 1000`.
    fn default() -> Self {
        ExperimentConfig {
            target: TargetChoice::Quadratic,
            family: Family::Cholesky,
            conditioner: Some(Conditioner::Softplus),
            form: ElboForm::Entropy,
            theorem: TheoremChoice::Entropy,
            d: 20,
            n: 100,
            sigma: 0.3,
            lambda: 8.0,
            m_samples: 10,
            iterations: 500,
            stepsize: None,
            replications: 1000,
            eval_every: 10,
            seed: 1,
            dataset_path: None,
            standardize: true,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config from `key = value` text. Unknown and duplicate
    /// keys are rejected; omitted keys take the benchmark defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: Vec<String> = Vec::new();
        let mut target = None;
        let mut family = None;
        let mut conditioner_tag: Option<String> = None;
        let mut cap: Option<f64> = None;
        let mut form = None;
        let mut theorem = None;
        let mut d = None;
        let mut n = None;
        let mut sigma = None;
        let mut lambda = None;
        let mut m_samples = None;
        let mut iterations = None;
        let mut stepsize = None;
        let mut replications = None;
        let mut eval_every = None;
        let mut seed = None;
        let mut dataset_path: Option<PathBuf> = None;
        let mut standardize = None;

        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let bad = |what: String| ExperimentError::ConfigLine { line: lineno, what };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(bad(format!("key `{key}` has an empty value")));
            }
            if seen.iter().any(|k| k == key) {
                return Err(bad(format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());

            fn num<T: std::str::FromStr>(
                key: &str,
                value: &str,
                lineno: usize,
            ) -> Result<T> {
                value.parse().map_err(|_| ExperimentError::ConfigLine {
                    line: lineno,
                    what: format!("cannot parse `{key} = {value}`"),
                })
            }

            match key {
                "target" => {
                    target = Some(match value {
                        "quadratic" => TargetChoice::Quadratic,
                        "linreg" => TargetChoice::Linreg,
                        _ => {
                            return Err(bad(format!(
                                "unknown target {value:?} (expected quadratic or linreg)"
                            )))
                        }
                    })
                }
                "family" => {
                    family = Some(match value {
                        "mean-field" => Family::MeanField,
                        "cholesky" => Family::Cholesky,
                        "square-root" => Family::SquareRoot,
                        _ => {
                            return Err(bad(format!(
                                "unknown family {value:?} (expected mean-field, cholesky, \
                                 or square-root)"
                            )))
                        }
                    })
                }
                "conditioner" => conditioner_tag = Some(value.to_string()),
                "S" => cap = Some(num("S", value, lineno)?),
                "form" => {
                    form = Some(value.parse::<ElboForm>().map_err(|e| bad(e.to_string()))?)
                }
                "theorem" => {
                    theorem = Some(match value {
                        "entropy" => TheoremChoice::Entropy,
                        "kl" => TheoremChoice::Kl,
                        "bounded_entropy" => TheoremChoice::BoundedEntropy,
                        _ => {
                            return Err(bad(format!(
                                "unknown theorem {value:?} (expected entropy, kl, or \
                                 bounded_entropy)"
                            )))
                        }
                    })
                }
                "d" => d = Some(num("d", value, lineno)?),
                "N" => n = Some(num("N", value, lineno)?),
                "sigma" => sigma = Some(num("sigma", value, lineno)?),
                "lambda" => lambda = Some(num("lambda", value, lineno)?),
                "M" => m_samples = Some(num("M", value, lineno)?),
                "T" => iterations = Some(num("T", value, lineno)?),
                "stepsize" => stepsize = Some(num("stepsize", value, lineno)?),
                "R" => replications = Some(num("R", value, lineno)?),
                "eval_every" => eval_every = Some(num("eval_every", value, lineno)?),
                "seed" => seed = Some(num("seed", value, lineno)?),
                "dataset_path" => dataset_path = Some(PathBuf::from(value)),
                "standardize" => standardize = Some(num::<bool>("standardize", value, lineno)?),
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }

        let defaults = ExperimentConfig::default();
        let target = target.unwrap_or(defaults.target);
        let family = family.unwrap_or(defaults.family);

        // Conditioner resolution: square-root takes none; the others
        // default to softplus; `S` belongs to clipped-softplus only.
        let conditioner = match family {
            Family::SquareRoot => {
                if conditioner_tag.is_some() {
                    return Err(config_err("the square-root family takes no conditioner"));
                }
                if cap.is_some() {
                    return Err(config_err("S applies only to the clipped-softplus conditioner"));
                }
                None
            }
            _ => {
                let tag = conditioner_tag.as_deref().unwrap_or("softplus");
                let cond = match tag {
                    "identity" => Conditioner::Identity,
                    "softplus" => Conditioner::Softplus,
                    "exp" => Conditioner::Exp,
                    "clipped-softplus" => Conditioner::clipped_softplus(cap.unwrap_or(2.0))
                        .map_err(|e| config_err(e.to_string()))?,
                    _ => {
                        return Err(config_err(format!(
                            "unknown conditioner {tag:?} (expected identity, softplus, \
                             clipped-softplus, or exp)"
                        )))
                    }
                };
                if cap.is_some() && !matches!(cond, Conditioner::ClippedSoftplus { .. }) {
                    return Err(config_err("S applies only to the clipped-softplus conditioner"));
                }
                Some(cond)
            }
        };

        // Form/theorem consistency: each theorem fixes the estimator form.
        let (form, theorem) = match (form, theorem) {
            (Some(f), None) => {
                let th = match f {
                    ElboForm::Entropy => TheoremChoice::Entropy,
                    ElboForm::Kl => TheoremChoice::Kl,
                };
                (f, th)
            }
            (None, Some(th)) => {
                let f = match th {
                    TheoremChoice::Kl => ElboForm::Kl,
                    _ => ElboForm::Entropy,
                };
                (f, th)
            }
            (Some(f), Some(th)) => {
                let ok = matches!(
                    (f, th),
                    (ElboForm::Entropy, TheoremChoice::Entropy)
                        | (ElboForm::Entropy, TheoremChoice::BoundedEntropy)
                        | (ElboForm::Kl, TheoremChoice::Kl)
                );
                if !ok {
                    return Err(config_err(format!(
                        "form `{}` is inconsistent with theorem `{}`",
                        f.name(),
                        th.name()
                    )));
                }
                (f, th)
            }
            (None, None) => (defaults.form, defaults.theorem),
        };

        if target == TargetChoice::Quadratic {
            if dataset_path.is_some() {
                return Err(config_err("dataset_path applies only to the linreg target"));
            }
            if standardize.is_some() {
                return Err(config_err("standardize applies only to the linreg target"));
            }
        }

        let cfg = ExperimentConfig {
            target,
            family,
            conditioner,
            form,
            theorem,
            d: d.unwrap_or(defaults.d),
            n: n.unwrap_or(defaults.n),
            sigma: sigma.unwrap_or(defaults.sigma),
            lambda: lambda.unwrap_or(defaults.lambda),
            m_samples: m_samples.unwrap_or(defaults.m_samples),
            iterations: iterations.unwrap_or(defaults.iterations),
            stepsize,
            replications: replications.unwrap_or(defaults.replications),
            eval_every: eval_every.unwrap_or(defaults.eval_every),
            seed: seed.unwrap_or(defaults.seed),
            dataset_path,
            standardize: standardize.unwrap_or(defaults.standardize),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Checks internal consistency; `parse` calls this automatically.
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(config_err("d must be at least 1"));
        }
        if self.n < 1 {
            return Err(config_err("N must be at least 1"));
        }
        if self.m_samples < 1 {
            return Err(config_err("M must be at least 1"));
        }
        if self.iterations < 1 {
            return Err(config_err("T must be at least 1"));
        }
        if self.replications < 2 {
            return Err(config_err("R must be at least 2"));
        }
        if self.eval_every < 1 {
            return Err(config_err("eval_every must be at least 1"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(config_err(format!("sigma must be positive (got {})", self.sigma)));
        }
        if !(self.lambda > 0.0) {
            return Err(config_err(format!("lambda must be positive (got {})", self.lambda)));
        }
        if self.lambda.is_infinite() && self.target == TargetChoice::Linreg {
            return Err(config_err("the linreg target requires a finite lambda"));
        }
        if let Some(step) = self.stepsize {
            if !step.is_finite() || step < 0.0 {
                return Err(config_err(format!(
                    "stepsize must be finite and nonnegative (got {step})"
                )));
            }
        }
        match self.family {
            Family::SquareRoot => {
                if self.conditioner.is_some() {
                    return Err(config_err("the square-root family takes no conditioner"));
                }
            }
            _ => {
                if self.conditioner.is_none() {
                    return Err(config_err(format!(
                        "the {} family requires a conditioner",
                        self.family.name()
                    )));
                }
            }
        }
        if self.theorem == TheoremChoice::BoundedEntropy
            && !matches!(self.conditioner, Some(Conditioner::ClippedSoftplus { .. }))
        {
            return Err(config_err(
                "theorem bounded_entropy requires the clipped-softplus conditioner",
            ));
        }
        let form_ok = matches!(
            (self.form, self.theorem),
            (ElboForm::Entropy, TheoremChoice::Entropy)
                | (ElboForm::Entropy, TheoremChoice::BoundedEntropy)
                | (ElboForm::Kl, TheoremChoice::Kl)
        );
        if !form_ok {
            return Err(config_err(format!(
                "form `{}` is inconsistent with theorem `{}`",
                self.form.name(),
                self.theorem.name()
            )));
        }
        Ok(())
    }
}

/// One logged point of a bound-vs-variance trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: usize,
    /// Exact objective gap `F(lambda) - F*`.
    pub f_gap: f64,
    /// Exact squared objective-gradient norm.
    pub grad_f_sqnorm: f64,
    /// Measured `E ||g_M||^2`.
    pub gvar_emp: f64,
    /// Standard error of the measurement.
    pub gvar_se: f64,
    /// Evaluated upper bound.
    pub bound_rhs: f64,
    /// `2 A gap` term.
    pub bound_a_term: f64,
    /// `B ||grad F||^2` term.
    pub bound_b_term: f64,
    /// Additive constant `C`.
    pub bound_c_const: f64,
    /// `KL(q || p)` at the iterate; `NaN` when the target has no prior.
    pub kl_qp: f64,
}

/// A resolved experiment: target, constants, and derived settings.
struct Resolved {
    target: TargetModel,
    dist: BaseDistribution,
    constants: ConstantsRecord,
    stepsize: f64,
    dataset_name: String,
    warnings: Vec<String>,
}

fn resolve(cfg: &ExperimentConfig) -> Result<Resolved> {
    cfg.validate()?;
    let dist = BaseDistribution::gaussian();
    let mut warnings = Vec::new();
    let (target, dataset_name) = match cfg.target {
        TargetChoice::Quadratic => {
            let mut rng = RngStream::new(cfg.seed, STREAM_ZSTAR);
            let zstar: Vec<f64> = (0..cfg.d).map(|_| 0.5 * rng.next_gaussian()).collect();
            let t = if cfg.lambda.is_infinite() {
                quadratic_target_flat(cfg.n as f64, cfg.sigma, zstar, cfg.d)?
            } else {
                quadratic_target(cfg.n as f64, cfg.sigma, cfg.lambda, zstar, cfg.d)?
            };
            (t, "quadratic".to_string())
        }
        TargetChoice::Linreg => {
            let (x, y, name) = match &cfg.dataset_path {
                Some(path) => {
                    let ds = load_csv_dataset(path, cfg.standardize)?;
                    warnings.extend(ds.warnings);
                    let name = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "dataset".to_string());
                    (ds.x, ds.y, name)
                }
                None => {
                    let (x, y) = synth_linreg(cfg.d, cfg.n, cfg.sigma, cfg.seed);
                    (x, y, "synthetic".to_string())
                }
            };
            (linreg_target(&x, &y, cfg.sigma, cfg.lambda)?, name)
        }
    };
    let constants = target_constants(&target, &dist, cfg.conditioner.as_ref())?;
    let stepsize = cfg.stepsize.unwrap_or(1.0 / constants.l_h);
    Ok(Resolved {
        target,
        dist,
        constants,
        stepsize,
        dataset_name,
        warnings,
    })
}

/// Initial parameters: `m = 0` and unit scale (`C = I`), with raw scale
/// coordinates chosen through the conditioner inverse.
fn init_params(cfg: &ExperimentConfig, d: usize) -> Result<VariationalParams> {
    let m0 = vec![0.0; d];
    Ok(match cfg.family {
        Family::MeanField | Family::Cholesky => {
            let cond = cfg
                .conditioner
                .clone()
                .ok_or_else(|| config_err("missing conditioner"))?;
            let s0 = cond.inverse(1.0)?;
            if cfg.family == Family::MeanField {
                VariationalParams::mean_field(m0, vec![s0; d], cond)?
            } else {
                let l0 = vec![0.0; crate::reparam::strict_lower_len(d)];
                VariationalParams::cholesky(m0, vec![s0; d], l0, cond)?
            }
        }
        Family::SquareRoot => VariationalParams::square_root(m0, DenseMatrix::identity(d))?,
    })
}

/// Runs fixed-stepsize SGD for `T` iterations and returns all `T + 1`
/// iterates. Aborts with a diagnostic if the parameter norm passes 1e12.
pub fn sgd_run(cfg: &ExperimentConfig) -> Result<Vec<VariationalParams>> {
    let r = resolve(cfg)?;
    let d = r.target.dim();
    let mut params = init_params(cfg, d)?;
    let mut trajectory = Vec::with_capacity(cfg.iterations + 1);
    trajectory.push(params.clone());
    let cond = cfg.conditioner.clone().unwrap_or(Conditioner::Identity);
    let mut rng = RngStream::new(cfg.seed, STREAM_SGD);
    for t in 0..cfg.iterations {
        let g = grad_estimate(&r.target, cfg.form, &params, &r.dist, cfg.m_samples, &mut rng)?;
        let mut flat = params.to_flat();
        for (x, gi) in flat.iter_mut().zip(g.values()) {
            *x -= r.stepsize * gi;
        }
        let norm_sq: f64 = flat.iter().map(|x| x * x).sum();
        if !norm_sq.is_finite() || norm_sq > DIVERGENCE_NORM * DIVERGENCE_NORM {
            return Err(ExperimentError::Diverged {
                iteration: t + 1,
                norm: norm_sq.sqrt(),
            });
        }
        params = VariationalParams::from_flat(cfg.family, d, cond.clone(), &flat)?;
        trajectory.push(params.clone());
    }
    Ok(trajectory)
}

fn build_bound(cfg: &ExperimentConfig, r: &Resolved, d: usize, kappa: f64) -> Result<AbcBound> {
    let cond = cfg.conditioner.as_ref();
    Ok(match cfg.theorem {
        TheoremChoice::Entropy => {
            abc_entropy_form(&r.constants, d, kappa, cfg.m_samples, cfg.family, cond)?
        }
        TheoremChoice::Kl => {
            abc_kl_form(&r.constants, d, kappa, cfg.m_samples, cfg.family, cond)?
        }
        TheoremChoice::BoundedEntropy => abc_bounded_entropy(
            &r.constants,
            d,
            kappa,
            cfg.m_samples,
            cfg.family,
            cond,
            r.constants.h_star,
        )?,
    })
}

/// Produces one [`TrajectoryRecord`] per `eval_every`-th iterate of a
/// trajectory: exact gap and gradient via the closed-form objective,
/// measured second moment, and the configured theorem's bound terms.
pub fn trace_bounds(
    cfg: &ExperimentConfig,
    trajectory: &[VariationalParams],
) -> Result<Vec<TrajectoryRecord>> {
    if trajectory.is_empty() {
        return Err(config_err("trajectory is empty"));
    }
    let r = resolve(cfg)?;
    let d = r.target.dim();
    let kappa = r.dist.kurtosis();
    let bound = build_bound(cfg, &r, d, kappa)?;
    let mut records = Vec::new();
    for (t, params) in trajectory.iter().enumerate() {
        if t % cfg.eval_every != 0 {
            continue;
        }
        let (f_val, grad) = exact_elbo(&r.target, params, &r.dist)?;
        let gap = f_val - r.constants.f_star;
        let grad_sq = grad.norm_sq();
        let rhs = evaluate_abc(&bound, gap, grad_sq)?;
        let est = empirical_sqnorm(
            &r.target,
            cfg.form,
            params,
            &r.dist,
            cfg.m_samples,
            cfg.replications,
            stream_id(&[cfg.seed, DOMAIN_TRACE, t as u64]),
        )?;
        let kl_qp = match r.target.prior_variance() {
            Some(v) => kl_to_prior(params, v)?,
            None => f64::NAN,
        };
        records.push(TrajectoryRecord {
            t,
            f_gap: gap,
            grad_f_sqnorm: grad_sq,
            gvar_emp: est.second_moment,
            gvar_se: est.std_error,
            bound_rhs: rhs,
            bound_a_term: 2.0 * bound.a * gap.max(0.0),
            bound_b_term: bound.b * grad_sq,
            bound_c_const: bound.c,
            kl_qp,
        });
    }
    Ok(records)
}

/// Formats a float with 17 significant decimal digits, enough to
/// round-trip every f64 exactly.
fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

/// Renders trace records as CSV under [`TRACE_HEADER`].
pub fn trace_csv(records: &[TrajectoryRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t,
            fmt_f(r.f_gap),
            fmt_f(r.grad_f_sqnorm),
            fmt_f(r.gvar_emp),
            fmt_f(r.gvar_se),
            fmt_f(r.bound_rhs),
            fmt_f(r.bound_a_term),
            fmt_f(r.bound_b_term),
            fmt_f(r.bound_c_const),
            fmt_f(r.kl_qp),
        );
    }
    out
}

/// A loaded regression dataset plus non-fatal warnings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Loads a headerless numeric CSV; the last column is the response, the
/// rest form the design matrix. With `standardize`, every design column
/// and the response are z-scored (population variance); constant columns
/// are centered but keep unit scale.
pub fn load_csv_dataset(path: &Path, standardize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ExperimentError::Dataset {
            what: format!("{}: {e}", path.display()),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| ExperimentError::Dataset {
            what: format!("row {row_no}: {e}"),
        })?;
        if rows.is_empty() {
            width = record.len();
            if width < 2 {
                return Err(ExperimentError::Dataset {
                    what: format!("need at least 2 columns, found {width}"),
                });
            }
        }
        let mut row = Vec::with_capacity(width);
        for (j, cell) in record.iter().enumerate() {
            let col_no = j + 1;
            let v: f64 = cell.parse().map_err(|_| ExperimentError::Dataset {
                what: format!("row {row_no}, column {col_no}: cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(ExperimentError::Dataset {
                    what: format!("row {row_no}, column {col_no}: non-finite value {cell:?}"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ExperimentError::Dataset {
            what: "dataset is empty".to_string(),
        });
    }
    let n = rows.len();
    let d = width - 1;
    let mut warnings = Vec::new();
    if n < d {
        warnings.push(format!(
            "dataset has fewer rows than features (N = {n} < d = {d})"
        ));
    }
    let mut x = DenseMatrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..d {
            x.set(i, j, row[j]);
        }
        y.push(row[d]);
    }
    if standardize {
        let nf = n as f64;
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
            let (mean, scale) = zscore_moments(&col, nf);
            for i in 0..n {
                x.set(i, j, (x.get(i, j) - mean) / scale);
            }
        }
        let (mean, scale) = zscore_moments(&y, nf);
        for v in y.iter_mut() {
            *v = (*v - mean) / scale;
        }
    }
    Ok(Dataset { x, y, warnings })
}

/// Population mean and scale for z-scoring; degenerate columns keep unit
/// scale so standardization never divides by zero.
fn zscore_moments(values: &[f64], n: f64) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Synthesizes a regression problem: standard-gaussian design, gaussian
/// weights, observation noise `sigma`. Deterministic in `seed`.
pub fn synth_linreg(d: usize, n: usize, sigma: f64, seed: u64) -> (DenseMatrix, Vec<f64>) {
    let mut rng_x = RngStream::new(seed, STREAM_X);
    let mut rng_w = RngStream::new(seed, STREAM_W);
    let mut rng_e = RngStream::new(seed, STREAM_NOISE);
    let mut x = DenseMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x.set(i, j, rng_x.next_gaussian());
        }
    }
    let w: Vec<f64> = (0..d).map(|_| rng_w.next_gaussian()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mut dot = 0.0;
            for j in 0..d {
                dot += x.get(i, j) * w[j];
            }
            dot + sigma * rng_e.next_gaussian()
        })
        .collect();
    (x, y)
}

/// `run`: optimize, trace, and render the trace CSV.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<String> {
    let trajectory = sgd_run(cfg)?;
    let records = trace_bounds(cfg, &trajectory)?;
    Ok(trace_csv(&records))
}

/// `constants`: the constants-table row for a regression target.
pub fn cmd_constants(cfg: &ExperimentConfig) -> Result<String> {
    if cfg.target != TargetChoice::Linreg {
        return Err(config_err("the constants table requires a linreg target"));
    }
    let r = resolve(cfg)?;
    let kappa = r.dist.kurtosis();
    let d = r.target.dim();
    let bound = abc_entropy_form(
        &r.constants,
        d,
        kappa,
        cfg.m_samples,
        cfg.family,
        cfg.conditioner.as_ref(),
    )?;
    let mut out = String::from(CONSTANTS_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{}",
        r.dataset_name,
        d,
        r.constants.n_data,
        fmt_f(r.constants.l_h),
        fmt_f(r.constants.mu_kl),
        fmt_f(r.constants.l_h / r.constants.mu_kl),
        fmt_f(r.constants.statdist_sq()),
        fmt_f(bound.a),
        fmt_f(bound.c),
    );
    Ok(out)
}

/// `constants` in direct mode: a row from published curvature constants
/// alone. Gap-dependent columns are unknown and reported as NaN.
pub fn cmd_constants_direct(
    name: &str,
    d: usize,
    n_data: usize,
    l_h: f64,
    mu_kl: f64,
    m_samples: usize,
    family: Family,
    kappa: f64,
) -> Result<String> {
    let record = ConstantsRecord {
        dim: d,
        n_data,
        l_h,
        mu_h: l_h,
        l_kl: l_h,
        mu_kl,
        zbar_h: vec![0.0; d],
        zbar_kl: vec![0.0; d],
        f_star_h: 0.0,
        f_star_kl: 0.0,
        f_star: 0.0,
        h_star: None,
    };
    let bound = abc_entropy_form(&record, d, kappa, m_samples, family, None)?;
    let mut out = String::from(CONSTANTS_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{}",
        name,
        d,
        n_data,
        fmt_f(l_h),
        fmt_f(mu_kl),
        fmt_f(l_h / mu_kl),
        fmt_f(f64::NAN),
        fmt_f(bound.a),
        fmt_f(f64::NAN),
    );
    Ok(out)
}

/// `compare-params`: one softplus-cholesky reference trajectory; at each
/// logged iterate the scale is re-expressed in all parameterizations via
/// [`match_parameterizations`], and each family's second moment is
/// measured with shared draws (same replicate streams).
pub fn cmd_compare_parameterizations(cfg: &ExperimentConfig) -> Result<String> {
    let mut ref_cfg = cfg.clone();
    ref_cfg.family = Family::Cholesky;
    ref_cfg.conditioner = Some(Conditioner::Softplus);
    if ref_cfg.theorem == TheoremChoice::BoundedEntropy {
        ref_cfg.theorem = TheoremChoice::Entropy;
    }
    let r = resolve(&ref_cfg)?;
    let trajectory = sgd_run(&ref_cfg)?;
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for (t, params) in trajectory.iter().enumerate() {
        if t % cfg.eval_every != 0 {
            continue;
        }
        let ScaleMatrix::Triangular(scale) = params.build_scale() else {
            return Err(config_err("reference trajectory must be cholesky"));
        };
        let matched_sp =
            match_parameterizations(params.location(), &scale, Conditioner::Softplus)?;
        let matched_id =
            match_parameterizations(params.location(), &scale, Conditioner::Identity)?;
        let root = stream_id(&[cfg.seed, DOMAIN_COMPARE, t as u64]);
        let mut cols = [0.0; 4];
        for (slot, p) in [
            (0, &matched_sp.mean_field),
            (1, &matched_sp.cholesky),
            (2, &matched_id.cholesky),
            (3, &matched_sp.square_root),
        ] {
            let est = empirical_sqnorm(
                &r.target,
                ref_cfg.form,
                p,
                &r.dist,
                cfg.m_samples,
                cfg.replications,
                root,
            )?;
            cols[slot] = est.second_moment;
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            t,
            fmt_f(cols[0]),
            fmt_f(cols[1]),
            fmt_f(cols[2]),
            fmt_f(cols[3]),
        );
    }
    Ok(out)
}

/// `gen-data`: synthetic regression CSV (columns `x_1..x_d, y`).
pub fn cmd_gen_data(d: usize, n: usize, sigma: f64, seed: u64) -> Result<String> {
    if d < 1 || n < 1 {
        return Err(config_err("gen-data needs d >= 1 and N >= 1"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(config_err(format!("sigma must be positive (got {sigma})")));
    }
    let (x, y) = synth_linreg(d, n, sigma, seed);
    let mut out = String::new();
    for i in 0..n {
        for j in 0..d {
            out.push_str(&fmt_f(x.get(i, j)));
            out.push(',');
        }
        out.push_str(&fmt_f(y[i]));
        out.push('\n');
    }
    Ok(out)
}

/// Returns resolve-time warnings (dataset shape issues) for a config
/// without running anything else.
pub fn config_warnings(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    Ok(resolve(cfg)?.warnings)
}

// ---------------------------------------------------------------------
// Verification registry: every module's key invariants as named,
// tolerance-annotated checks shared by `cmd_verify` and the test suite.
// ---------------------------------------------------------------------

/// One named verification check with its tolerance description.
pub struct VerifyCheck {
    pub name: &'static str,
    pub tolerance: &'static str,
    pub run: fn() -> std::result::Result<(), String>,
}

fn ensure(ok: bool, detail: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(detail())
    }
}

fn e2s<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn verify_rand_params(
    family: Family,
    d: usize,
    conditioner: Conditioner,
    rng: &mut RngStream,
) -> VariationalParams {
    let m: Vec<f64> = (0..d).map(|_| 0.8 * rng.next_gaussian()).collect();
    match family {
        Family::MeanField => {
            let s: Vec<f64> = (0..d).map(|_| 0.7 * rng.next_gaussian()).collect();
            VariationalParams::mean_field(m, s, conditioner).unwrap()
        }
        Family::Cholesky => {
            let s: Vec<f64> = (0..d).map(|_| 0.7 * rng.next_gaussian()).collect();
            let l: Vec<f64> = (0..crate::reparam::strict_lower_len(d))
                .map(|_| 0.3 * rng.next_gaussian())
                .collect();
            VariationalParams::cholesky(m, s, l, conditioner).unwrap()
        }
        Family::SquareRoot => {
            let mut c = DenseMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    c.set(i, j, 0.25 * rng.next_gaussian() + if i == j { 0.8 } else { 0.0 });
                }
            }
            VariationalParams::square_root(m, c).unwrap()
        }
    }
}

fn check_sqnorm_identity() -> std::result::Result<(), String> {
    use crate::reparam::{pullback, pullback_sqnorm_identity};
    let d = 5;
    let mut rng = RngStream::new(41, 0);
    let dist = BaseDistribution::gaussian();
    let combos: Vec<(Family, Conditioner)> = vec![
        (Family::MeanField, Conditioner::Identity),
        (Family::MeanField, Conditioner::Softplus),
        (Family::MeanField, Conditioner::clipped_softplus(2.0).unwrap()),
        (Family::Cholesky, Conditioner::Identity),
        (Family::Cholesky, Conditioner::Softplus),
        (Family::Cholesky, Conditioner::clipped_softplus(2.0).unwrap()),
        (Family::SquareRoot, Conditioner::Identity),
    ];
    for (family, cond) in combos {
        let params = verify_rand_params(family, d, cond, &mut rng);
        for _ in 0..60 {
            let u = dist.sample(d, &mut rng);
            let g_f: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            let direct = e2s(pullback(&params, &u, &g_f))?.norm_sq();
            let identity = e2s(pullback_sqnorm_identity(&params, &u, &g_f))?;
            let tol = 1e-10 * direct.abs().max(1.0);
            ensure((direct - identity).abs() <= tol, || {
                format!("{}: direct {direct} vs identity {identity}", family.name())
            })?;
        }
    }
    Ok(())
}

fn check_matched_ordering() -> std::result::Result<(), String> {
    use crate::linalg::LowerTriangular;
    use crate::reparam::pullback;
    let d = 6;
    let mut rng = RngStream::new(42, 0);
    let dist = BaseDistribution::gaussian();
    for _ in 0..40 {
        let m: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        let mut c = LowerTriangular::zeros(d);
        for i in 0..d {
            for j in 0..i {
                c.set(i, j, 0.3 * rng.next_gaussian());
            }
            c.set(i, i, 0.1 + 1.7 * rng.next_uniform());
        }
        let sp = e2s(match_parameterizations(&m, &c, Conditioner::Softplus))?;
        let id = e2s(match_parameterizations(&m, &c, Conditioner::Identity))?;
        let cl = e2s(match_parameterizations(
            &m,
            &c,
            Conditioner::clipped_softplus(2.0).unwrap(),
        ))?;
        let u = dist.sample(d, &mut rng);
        let g_f: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        let n_cl = e2s(pullback(&cl.cholesky, &u, &g_f))?.norm_sq();
        let n_sp = e2s(pullback(&sp.cholesky, &u, &g_f))?.norm_sq();
        let n_id = e2s(pullback(&id.cholesky, &u, &g_f))?.norm_sq();
        let n_sq = e2s(pullback(&sp.square_root, &u, &g_f))?.norm_sq();
        let tol = 1e-12 * n_sq.max(1.0);
        ensure(
            n_cl <= n_sp + tol && n_sp <= n_id + tol && n_id <= n_sq + tol,
            || format!("ordering broken: {n_cl} / {n_sp} / {n_id} / {n_sq}"),
        )?;
    }
    Ok(())
}

/// Scalar mean/SE accumulator for Monte-Carlo checks.
struct MeanAcc {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl MeanAcc {
    fn new() -> Self {
        MeanAcc {
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
        }
    }
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }
    fn mean(&self) -> f64 {
        self.sum / self.n
    }
    fn se(&self) -> f64 {
        let var = (self.sum_sq - self.n * self.mean() * self.mean()).max(0.0) / (self.n - 1.0);
        (var / self.n).sqrt()
    }
    fn within(&self, want: f64, sigmas: f64) -> bool {
        (self.mean() - want).abs() <= sigmas * self.se() + 1e-12
    }
}

fn check_expectation_identities() -> std::result::Result<(), String> {
    let d = 8;
    let dist = BaseDistribution::gaussian();
    let kappa = dist.kurtosis();
    let mut rng = RngStream::new(43, 0);
    let n = 100_000;
    let mut cross = MeanAcc::new(); // u_0 u_1 -> 0
    let mut diag = MeanAcc::new(); // u_0^2 -> 1
    let mut norm = MeanAcc::new(); // ||u||^2 -> d
    let mut odd = MeanAcc::new(); // u_0 (1 + ||u||^2) -> 0
    let mut quart = MeanAcc::new(); // (u u' u u')_00 -> (d - 1) + kappa
    for _ in 0..n {
        let u = dist.sample(d, &mut rng);
        let nsq: f64 = u.iter().map(|v| v * v).sum();
        cross.push(u[0] * u[1]);
        diag.push(u[0] * u[0]);
        norm.push(nsq);
        odd.push(u[0] * (1.0 + nsq));
        quart.push(u[0] * nsq * u[0]);
    }
    ensure(cross.within(0.0, 3.0), || format!("E u0 u1 = {}", cross.mean()))?;
    ensure(diag.within(1.0, 3.0), || format!("E u0^2 = {}", diag.mean()))?;
    ensure(norm.within(d as f64, 3.0), || format!("E ||u||^2 = {}", norm.mean()))?;
    ensure(odd.within(0.0, 3.0), || format!("E u0 (1 + ||u||^2) = {}", odd.mean()))?;
    ensure(
        quart.within((d - 1) as f64 + kappa, 3.0),
        || format!("fourth-moment coefficient = {}", quart.mean()),
    )?;
    Ok(())
}

fn check_unbiasedness() -> std::result::Result<(), String> {
    use crate::estimator::grad_sample;
    let d = 2;
    let t = e2s(quadratic_target(6.0, 1.0, 3.0, vec![0.4, -0.3], d))?;
    let dist = BaseDistribution::gaussian();
    let mut seeder = RngStream::new(44, 0);
    let params = verify_rand_params(Family::Cholesky, d, Conditioner::Softplus, &mut seeder);
    let (_, exact) = e2s(exact_elbo(&t, &params, &dist))?;
    for form in [ElboForm::Entropy, ElboForm::Kl] {
        let pc = params.param_count();
        let mut accs: Vec<MeanAcc> = (0..pc).map(|_| MeanAcc::new()).collect();
        let mut rng = RngStream::new(45, 0);
        for _ in 0..200_000 {
            let u = dist.sample(d, &mut rng);
            let g = e2s(grad_sample(&t, form, &params, &u))?;
            for (acc, v) in accs.iter_mut().zip(g.values()) {
                acc.push(*v);
            }
        }
        for (k, acc) in accs.iter().enumerate() {
            ensure(acc.within(exact.values()[k], 3.0), || {
                format!(
                    "{} component {k}: mc {} vs exact {}",
                    form.name(),
                    acc.mean(),
                    exact.values()[k]
                )
            })?;
        }
    }
    Ok(())
}

fn check_variance_scaling() -> std::result::Result<(), String> {
    let d = 2;
    let t = e2s(quadratic_target(6.0, 1.0, 3.0, vec![0.4, -0.3], d))?;
    let dist = BaseDistribution::gaussian();
    let mut seeder = RngStream::new(46, 0);
    let params = verify_rand_params(Family::MeanField, d, Conditioner::Softplus, &mut seeder);
    let reps = 4000;
    let total_var = |m: usize, tag: u64| -> std::result::Result<f64, String> {
        let pc = params.param_count();
        let mut accs: Vec<MeanAcc> = (0..pc).map(|_| MeanAcc::new()).collect();
        for r in 0..reps {
            let mut rng = RngStream::new(tag, r);
            let g = e2s(grad_estimate(
                &t,
                ElboForm::Entropy,
                &params,
                &dist,
                m,
                &mut rng,
            ))?;
            for (acc, v) in accs.iter_mut().zip(g.values()) {
                acc.push(*v);
            }
        }
        Ok(accs
            .iter()
            .map(|a| a.se() * a.se() * reps as f64)
            .sum::<f64>())
    };
    let v1 = total_var(1, 300)?;
    let v10 = total_var(10, 400)?;
    let ratio = v1 / v10;
    ensure((ratio - 10.0).abs() <= 1.5, || {
        format!("variance ratio {ratio} not within 15% of 10")
    })
}

fn check_exact_elbo_fd() -> std::result::Result<(), String> {
    let d = 3;
    let dist = BaseDistribution::gaussian();
    let quad = e2s(quadratic_target(9.0, 0.7, 2.0, vec![0.3, -0.2, 0.5], d))?;
    let (x, y) = synth_linreg(d, 15, 0.6, 4711);
    let lin = e2s(linreg_target(&x, &y, 0.6, 1.4))?;
    let mut rng = RngStream::new(47, 0);
    for t in [&quad, &lin] {
        for family in [Family::MeanField, Family::Cholesky, Family::SquareRoot] {
            let params = verify_rand_params(family, d, Conditioner::Softplus, &mut rng);
            let (_, grad) = e2s(exact_elbo(t, &params, &dist))?;
            let flat = params.to_flat();
            let cond = params
                .conditioner()
                .cloned()
                .unwrap_or(Conditioner::Identity);
            for k in 0..flat.len() {
                let h = 1e-6 * flat[k].abs().max(1.0);
                let mut hi = flat.clone();
                hi[k] += h;
                let mut lo = flat.clone();
                lo[k] -= h;
                let p_hi = e2s(VariationalParams::from_flat(family, d, cond.clone(), &hi))?;
                let p_lo = e2s(VariationalParams::from_flat(family, d, cond.clone(), &lo))?;
                let f_hi = e2s(exact_elbo(t, &p_hi, &dist))?.0;
                let f_lo = e2s(exact_elbo(t, &p_lo, &dist))?.0;
                let fd = (f_hi - f_lo) / (2.0 * h);
                let tol = 2e-6 * grad.values()[k].abs().max(1.0);
                ensure((grad.values()[k] - fd).abs() <= tol, || {
                    format!(
                        "{} component {k}: analytic {} vs fd {fd}",
                        family.name(),
                        grad.values()[k]
                    )
                })?;
            }
        }
    }
    Ok(())
}

fn check_optimum_attained() -> std::result::Result<(), String> {
    let d = 4;
    let t = e2s(quadratic_target(20.0, 0.5, 3.0, vec![0.2, -0.1, 0.4, 0.0], d))?;
    let dist = BaseDistribution::gaussian();
    let c = e2s(target_constants(&t, &dist, None))?;
    let mut cm = DenseMatrix::zeros(d, d);
    for i in 0..d {
        cm.set(i, i, 1.0 / c.l_h.sqrt());
    }
    let p = e2s(VariationalParams::square_root(c.zbar_h.clone(), cm))?;
    let (f_val, grad) = e2s(exact_elbo(&t, &p, &dist))?;
    ensure((f_val - c.f_star).abs() <= 1e-8, || {
        format!("optimum value {f_val} vs F* {}", c.f_star)
    })?;
    ensure(grad.norm_sq().sqrt() <= 1e-8, || {
        format!("gradient norm {} at the optimum", grad.norm_sq().sqrt())
    })
}

fn check_frozen_constants() -> std::result::Result<(), String> {
    let d = 20;
    let t = e2s(quadratic_target(100.0, 0.3, 8.0, vec![0.0; d], d))?;
    let dist = BaseDistribution::gaussian();
    let c = e2s(target_constants(&t, &dist, None))?;
    ensure(c.l_kl == 2222.2222222222222, || format!("L_KL = {}", c.l_kl))?;
    ensure(c.l_h == 2222.4722222222222, || format!("L_H = {}", c.l_h))?;
    // Published regression row: entropy-form A within 0.5%.
    let row = ConstantsRecord {
        dim: 9,
        n_data: 0,
        l_h: 1.840e3,
        mu_h: 1.840e3,
        l_kl: 1.840e3,
        mu_kl: 5.017e2,
        zbar_h: vec![0.0; 9],
        zbar_kl: vec![0.0; 9],
        f_star_h: 0.0,
        f_star_kl: 0.0,
        f_star: 0.0,
        h_star: None,
    };
    let bound = e2s(abc_entropy_form(&row, 9, 3.0, 10, Family::Cholesky, None))?;
    ensure((bound.a - 1.620e4).abs() / 1.620e4 < 5e-3, || {
        format!("A = {}", bound.a)
    })
}

fn check_bound_dominance() -> std::result::Result<(), String> {
    let d = 10;
    let zstar: Vec<f64> = (0..d).map(|i| 0.3 * ((i as f64) * 0.9).cos()).collect();
    let t = e2s(quadratic_target(100.0, 0.3, 8.0, zstar, d))?;
    let dist = BaseDistribution::gaussian();
    let c = e2s(target_constants(&t, &dist, None))?;
    let kappa = dist.kurtosis();
    let m = 10;
    let mut rng = RngStream::new(48, 0);
    for trial in 0..6 {
        let form = if trial % 2 == 0 {
            ElboForm::Entropy
        } else {
            ElboForm::Kl
        };
        let bound = if form == ElboForm::Entropy {
            e2s(abc_entropy_form(&c, d, kappa, m, Family::Cholesky, None))?
        } else {
            e2s(abc_kl_form(&c, d, kappa, m, Family::Cholesky, None))?
        };
        let near = trial < 3;
        let mut params = verify_rand_params(Family::Cholesky, d, Conditioner::Softplus, &mut rng);
        if near {
            // Move the location to the optimum's neighborhood.
            let mut flat = params.to_flat();
            for (k, z) in c.zbar_h.iter().enumerate() {
                flat[k] = z + 0.02 * rng.next_gaussian();
            }
            params = e2s(VariationalParams::from_flat(
                Family::Cholesky,
                d,
                Conditioner::Softplus,
                &flat,
            ))?;
        }
        let (f_val, grad) = e2s(exact_elbo(&t, &params, &dist))?;
        let rhs = e2s(evaluate_abc(&bound, f_val - c.f_star, grad.norm_sq()))?;
        let est = e2s(empirical_sqnorm(
            &t,
            form,
            &params,
            &dist,
            m,
            150,
            60_000 + trial as u64,
        ))?;
        ensure(est.second_moment <= rhs + 3.0 * est.std_error, || {
            format!(
                "trial {trial}: measured {} above bound {rhs}",
                est.second_moment
            )
        })?;
    }
    Ok(())
}

fn check_lower_bound() -> std::result::Result<(), String> {
    use crate::bounds::{lower_bound_rhs, lower_bound_spec};
    use crate::targets::expected_f;
    let d = 5;
    let a: f64 = 0.5;
    let t = e2s(quadratic_target_flat(0.5, 1.0, vec![0.2, -0.4, 0.1, 0.0, 0.3], d))?;
    let dist = BaseDistribution::gaussian();
    let c = e2s(target_constants(&t, &dist, None))?;
    let m = 10;
    let mut cm = DenseMatrix::zeros(d, d);
    for i in 0..d {
        cm.set(i, i, 1.0 / (2.0 * a).sqrt());
    }
    let p_star = e2s(VariationalParams::square_root(c.zbar_h.clone(), cm.clone()))?;
    let baseline =
        e2s(expected_f(&t, ElboForm::Entropy, &p_star))? - c.f_min(ElboForm::Entropy);
    let spec = e2s(lower_bound_spec(
        &c,
        ElboForm::Entropy,
        m,
        Family::SquareRoot,
        baseline,
    ))?;
    let mut rng = RngStream::new(49, 0);
    for trial in 0..3 {
        let p = if trial == 0 {
            p_star.clone()
        } else {
            let mvec: Vec<f64> = c
                .zbar_h
                .iter()
                .map(|z| z + 0.04 * rng.next_gaussian())
                .collect();
            let mut cp = cm.clone();
            for i in 0..d {
                for j in 0..d {
                    cp.set(i, j, cp.get(i, j) + 0.02 * rng.next_gaussian());
                }
            }
            e2s(VariationalParams::square_root(mvec, cp))?
        };
        let (f_val, grad) = e2s(exact_elbo(&t, &p, &dist))?;
        let rhs = e2s(lower_bound_rhs(&spec, f_val - c.f_star, grad.norm_sq()))?;
        let est = e2s(empirical_sqnorm(
            &t,
            ElboForm::Entropy,
            &p,
            &dist,
            m,
            400,
            70_000 + trial as u64,
        ))?;
        ensure(est.second_moment >= rhs - 3.0 * est.std_error, || {
            format!(
                "trial {trial}: measured {} below lower bound {rhs}",
                est.second_moment
            )
        })?;
    }
    Ok(())
}

fn check_split_invariance() -> std::result::Result<(), String> {
    let mut rng = RngStream::new(50, 0);
    for _ in 0..100 {
        let a = 10.0_f64.powf(3.0 * rng.next_uniform());
        let c0 = 50.0 * rng.next_uniform();
        let gap = 5.0 * rng.next_uniform();
        let grad = 20.0 * rng.next_uniform();
        let delta = (2.0 * rng.next_uniform() - 1.0) * gap.min(c0 / (2.0 * a));
        let base = AbcBound {
            a,
            b: 1.0,
            c: c0,
            provenance: String::new(),
        };
        let shifted = AbcBound {
            a,
            b: 1.0,
            c: c0 - 2.0 * a * delta,
            provenance: String::new(),
        };
        let lhs = e2s(evaluate_abc(&base, gap, grad))?;
        let rhs = e2s(evaluate_abc(&shifted, gap + delta, grad))?;
        ensure((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), || {
            format!("split shifted the value: {lhs} vs {rhs}")
        })?;
    }
    Ok(())
}

fn check_dimension_constant() -> std::result::Result<(), String> {
    use crate::bounds::c_dim;
    ensure(
        e2s(c_dim(4, 3.0, Family::MeanField, None))? == 13.0
            && e2s(c_dim(9, 3.0, Family::Cholesky, None))? == 12.0
            && e2s(c_dim(1, 1.0, Family::MeanField, None))? == 3.0
            && e2s(c_dim(1, 1.0, Family::SquareRoot, None))? == 2.0,
        || "frozen dimension-constant values changed".to_string(),
    )?;
    let err = c_dim(4, 3.0, Family::Cholesky, Some(&Conditioner::Exp))
        .err()
        .map(|e| e.to_string())
        .unwrap_or_default();
    ensure(
        err.contains("bound not applicable: conditioner not 1-Lipschitz"),
        || format!("exp refusal message changed: {err:?}"),
    )?;
    for family in [Family::MeanField, Family::Cholesky, Family::SquareRoot] {
        for d in 1..10 {
            let lo = c_dim(d, 3.0, family, None).map_err(|e| e.to_string())?;
            let hi = c_dim(d + 1, 3.0, family, None).map_err(|e| e.to_string())?;
            ensure(hi > lo, || "dimension constant not monotone in d".to_string())?;
        }
    }
    Ok(())
}

fn check_regularizer_minimum() -> std::result::Result<(), String> {
    let t = e2s(quadratic_target(100.0, 0.3, 8.0, vec![0.0; 20], 20))?;
    let dist = BaseDistribution::gaussian();
    let cond = Conditioner::clipped_softplus(2.0).unwrap();
    let c = e2s(target_constants(&t, &dist, Some(&cond)))?;
    let h = c.h_star.ok_or("h* missing for a clipped conditioner")?;
    ensure((h - -42.24171427529236).abs() < 1e-12, || format!("h* = {h}"))
}

fn parse_trace_csv(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty csv")?;
    ensure(header == TRACE_HEADER, || {
        format!("header mismatch: {header:?}")
    })?;
    let mut rows = Vec::new();
    for line in lines {
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.parse::<f64>()).collect();
        rows.push(row.map_err(|e| format!("re-parse failed: {e}"))?);
    }
    Ok(rows)
}

fn check_trace_contract() -> std::result::Result<(), String> {
    let mut cfg = ExperimentConfig::default();
    cfg.d = 3;
    cfg.iterations = 10;
    cfg.eval_every = 5;
    cfg.replications = 60;
    cfg.m_samples = 3;
    cfg.seed = 7;
    let trajectory = e2s(sgd_run(&cfg))?;
    ensure(trajectory.len() == 11, || {
        format!("trajectory length {}", trajectory.len())
    })?;
    let records = e2s(trace_bounds(&cfg, &trajectory))?;
    ensure(records.len() == 3, || format!("record count {}", records.len()))?;
    for r in &records {
        let sum = r.bound_a_term + r.bound_b_term + r.bound_c_const;
        ensure((r.bound_rhs - sum).abs() <= 1e-12 * r.bound_rhs.abs().max(1.0), || {
            format!("t={}: rhs {} vs term sum {sum}", r.t, r.bound_rhs)
        })?;
        ensure(r.bound_b_term == r.grad_f_sqnorm, || {
            format!("t={}: B term {} != grad {}", r.t, r.bound_b_term, r.grad_f_sqnorm)
        })?;
        ensure(r.gvar_emp <= r.bound_rhs + 3.0 * r.gvar_se, || {
            format!("t={}: variance {} above bound {}", r.t, r.gvar_emp, r.bound_rhs)
        })?;
    }
    // Bit-exact CSV round trip.
    let csv_text = trace_csv(&records);
    let rows = parse_trace_csv(&csv_text)?;
    for (r, row) in records.iter().zip(&rows) {
        let want = [
            r.t as f64,
            r.f_gap,
            r.grad_f_sqnorm,
            r.gvar_emp,
            r.gvar_se,
            r.bound_rhs,
            r.bound_a_term,
            r.bound_b_term,
            r.bound_c_const,
            r.kl_qp,
        ];
        for (a, b) in want.iter().zip(row) {
            ensure(a.to_bits() == b.to_bits(), || {
                format!("csv round trip changed {a} to {b}")
            })?;
        }
    }
    Ok(())
}

fn check_determinism() -> std::result::Result<(), String> {
    let mut cfg = ExperimentConfig::default();
    cfg.d = 3;
    cfg.iterations = 5;
    cfg.replications = 40;
    cfg.seed = 11;
    let a = e2s(sgd_run(&cfg))?;
    let b = e2s(sgd_run(&cfg))?;
    for (pa, pb) in a.iter().zip(&b) {
        for (x, y) in pa.to_flat().iter().zip(pb.to_flat().iter()) {
            ensure(x.to_bits() == y.to_bits(), || {
                "sgd trajectories differ under identical seeds".to_string()
            })?;
        }
    }
    let ra = e2s(trace_bounds(&cfg, &a))?;
    let rb = e2s(trace_bounds(&cfg, &b))?;
    ensure(trace_csv(&ra) == trace_csv(&rb), || {
        "trace CSVs differ under identical seeds".to_string()
    })
}

fn check_dataset_loader() -> std::result::Result<(), String> {
    let dir = std::env::temp_dir();
    let path = dir.join(format!("bbvi-verify-{}.csv", std::process::id()));
    std::fs::write(&path, "1,2\n3,4\n5,6\n").map_err(|e| e.to_string())?;
    let raw = load_csv_dataset(&path, false).map_err(|e| e.to_string());
    let std = load_csv_dataset(&path, true).map_err(|e| e.to_string());
    let _ = std::fs::remove_file(&path);
    let raw = raw?;
    let std = std?;
    ensure(
        raw.x.rows() == 3
            && raw.x.cols() == 1
            && raw.x.get(0, 0) == 1.0
            && raw.x.get(1, 0) == 3.0
            && raw.x.get(2, 0) == 5.0
            && raw.y == vec![2.0, 4.0, 6.0],
        || "toy dataset parsed wrong".to_string(),
    )?;
    let col: Vec<f64> = (0..3).map(|i| std.x.get(i, 0)).collect();
    let mean = col.iter().sum::<f64>() / 3.0;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
    ensure(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12, || {
        format!("z-score moments: mean {mean}, var {var}")
    })
}

/// The full verification registry: every module's key invariants as
/// fast, deterministic checks.
pub fn verify_checks() -> Vec<VerifyCheck> {
    vec![
        VerifyCheck {
            name: "pullback-sqnorm-identity",
            tolerance: "1e-10 relative",
            run: check_sqnorm_identity,
        },
        VerifyCheck {
            name: "matched-parameterization-ordering",
            tolerance: "1e-12 relative",
            run: check_matched_ordering,
        },
        VerifyCheck {
            name: "base-expectation-identities",
            tolerance: "3 standard errors at 1e5 draws",
            run: check_expectation_identities,
        },
        VerifyCheck {
            name: "estimator-unbiasedness",
            tolerance: "3 standard errors at 2e5 draws",
            run: check_unbiasedness,
        },
        VerifyCheck {
            name: "estimator-variance-scaling",
            tolerance: "15% of the 1/M ratio at 4e3 replicates",
            run: check_variance_scaling,
        },
        VerifyCheck {
            name: "exact-elbo-gradients",
            tolerance: "2e-6 relative vs central differences",
            run: check_exact_elbo_fd,
        },
        VerifyCheck {
            name: "optimum-attained",
            tolerance: "1e-8",
            run: check_optimum_attained,
        },
        VerifyCheck {
            name: "frozen-curvature-constants",
            tolerance: "exact; published A within 0.5%",
            run: check_frozen_constants,
        },
        VerifyCheck {
            name: "upper-bound-dominance",
            tolerance: "3 standard errors at R=150",
            run: check_bound_dominance,
        },
        VerifyCheck {
            name: "lower-bound-validity",
            tolerance: "3 standard errors at R=400",
            run: check_lower_bound,
        },
        VerifyCheck {
            name: "gap-split-invariance",
            tolerance: "1e-10 relative over 100 shifts",
            run: check_split_invariance,
        },
        VerifyCheck {
            name: "dimension-constant",
            tolerance: "exact",
            run: check_dimension_constant,
        },
        VerifyCheck {
            name: "regularizer-minimum",
            tolerance: "1e-12",
            run: check_regularizer_minimum,
        },
        VerifyCheck {
            name: "trace-contract",
            tolerance: "1e-12 decomposition; bit-exact csv; 3 SE dominance",
            run: check_trace_contract,
        },
        VerifyCheck {
            name: "determinism",
            tolerance: "bit-identical",
            run: check_determinism,
        },
        VerifyCheck {
            name: "dataset-loader",
            tolerance: "1e-12 z-score moments",
            run: check_dataset_loader,
        },
    ]
}

/// `verify`: runs the whole registry, streaming a machine-readable CSV
/// report (`status,check,tolerance,detail`). Returns whether every check
/// passed.
pub fn cmd_verify(out: &mut dyn std::io::Write) -> std::io::Result<bool> {
    writeln!(out, "status,check,tolerance,detail")?;
    let checks = verify_checks();
    let mut passed = 0usize;
    for check in &checks {
        match (check.run)() {
            Ok(()) => {
                passed += 1;
                writeln!(out, "PASS,{},{},", check.name, quote_csv(check.tolerance))?;
            }
            Err(detail) => {
                writeln!(
                    out,
                    "FAIL,{},{},{}",
                    check.name,
                    quote_csv(check.tolerance),
                    quote_csv(&detail)
                )?;
            }
        }
    }
    writeln!(out, "RESULT,{}/{} checks passed,,", passed, checks.len())?;
    Ok(passed == checks.len())
}

fn quote_csv(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config_with_comments() {
        let text = "
# benchmark run
target = quadratic
family = mean-field   # diagonal scale
conditioner = clipped-softplus
S = 1.5
form = entropy
theorem = bounded_entropy
d = 6
N = 50
sigma = 0.5
lambda = 4
M = 4
T = 20
stepsize = 1e-4
R = 100
eval_every = 5
seed = 99
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.target, TargetChoice::Quadratic);
        assert_eq!(cfg.family, Family::MeanField);
        assert!(matches!(
            cfg.conditioner,
            Some(Conditioner::ClippedSoftplus { cap }) if cap == 1.5
        ));
        assert_eq!(cfg.form, ElboForm::Entropy);
        assert_eq!(cfg.theorem, TheoremChoice::BoundedEntropy);
        assert_eq!((cfg.d, cfg.n), (6, 50));
        assert_eq!((cfg.sigma, cfg.lambda), (0.5, 4.0));
        assert_eq!((cfg.m_samples, cfg.iterations), (4, 20));
        assert_eq!(cfg.stepsize, Some(1e-4));
        assert_eq!((cfg.replications, cfg.eval_every, cfg.seed), (100, 5, 99));
    }

    #[test]
    fn config_defaults_match_the_benchmark() {
        let cfg = ExperimentConfig::parse("target = quadratic\n").unwrap();
        assert_eq!((cfg.d, cfg.n), (20, 100));
        assert_eq!((cfg.sigma, cfg.lambda), (0.3, 8.0));
        assert_eq!((cfg.m_samples, cfg.iterations, cfg.replications), (10, 500, 1000));
        assert_eq!(cfg.family, Family::Cholesky);
        assert!(matches!(cfg.conditioner, Some(Conditioner::Softplus)));
        assert_eq!(cfg.form, ElboForm::Entropy);
        assert_eq!(cfg.theorem, TheoremChoice::Entropy);
        assert!(cfg.stepsize.is_none());
    }

    #[test]
    fn config_rejections() {
        // Unknown key, duplicate key, malformed line.
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("d = 2\nd = 3\n").is_err());
        assert!(ExperimentConfig::parse("just words\n").is_err());
        // Inconsistent form/theorem.
        assert!(ExperimentConfig::parse("form = kl\ntheorem = entropy\n").is_err());
        assert!(ExperimentConfig::parse("form = kl\ntheorem = bounded_entropy\n").is_err());
        // bounded_entropy needs the clipped conditioner.
        assert!(ExperimentConfig::parse("theorem = bounded_entropy\n").is_err());
        // The square-root family takes no conditioner, and S needs clipped.
        assert!(
            ExperimentConfig::parse("family = square-root\nconditioner = softplus\n").is_err()
        );
        assert!(ExperimentConfig::parse("conditioner = softplus\nS = 2\n").is_err());
        // Dataset keys are linreg-only.
        assert!(ExperimentConfig::parse("dataset_path = foo.csv\n").is_err());
        assert!(ExperimentConfig::parse("standardize = false\n").is_err());
        // Domain checks.
        assert!(ExperimentConfig::parse("sigma = 0\n").is_err());
        assert!(ExperimentConfig::parse("T = 0\n").is_err());
        assert!(ExperimentConfig::parse("R = 1\n").is_err());
        // Flat limit is quadratic-only.
        assert!(ExperimentConfig::parse("target = linreg\nlambda = inf\n").is_err());
    }

    #[test]
    fn infers_form_and_theorem_from_each_other() {
        let cfg = ExperimentConfig::parse("form = kl\n").unwrap();
        assert_eq!(cfg.theorem, TheoremChoice::Kl);
        let cfg = ExperimentConfig::parse("theorem = kl\n").unwrap();
        assert_eq!(cfg.form, ElboForm::Kl);
        let cfg =
            ExperimentConfig::parse("theorem = bounded_entropy\nconditioner = clipped-softplus\n")
                .unwrap();
        assert_eq!(cfg.form, ElboForm::Entropy);
        assert!(matches!(
            cfg.conditioner,
            Some(Conditioner::ClippedSoftplus { cap }) if cap == 2.0
        ));
    }

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.d = 4;
        cfg.iterations = 20;
        cfg.eval_every = 5;
        cfg.replications = 80;
        cfg.m_samples = 4;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn zero_stepsize_freezes_the_trajectory() {
        let mut cfg = small_cfg();
        cfg.stepsize = Some(0.0);
        let traj = sgd_run(&cfg).unwrap();
        assert_eq!(traj.len(), 21);
        let first = traj[0].to_flat();
        for p in &traj {
            assert_eq!(p.to_flat(), first);
        }
    }

    #[test]
    fn benchmark_run_descends() {
        let mut cfg = ExperimentConfig::default();
        cfg.stepsize = Some(1e-5);
        let traj = sgd_run(&cfg).unwrap();
        assert_eq!(traj.len(), 501);
        let dist = BaseDistribution::gaussian();
        let r = resolve(&cfg).unwrap();
        let first = exact_elbo(&r.target, &traj[0], &dist).unwrap().0;
        let last = exact_elbo(&r.target, traj.last().unwrap(), &dist).unwrap().0;
        assert!(
            last < first,
            "no descent: started at {first}, ended at {last}"
        );
    }

    #[test]
    fn runaway_stepsize_trips_the_divergence_guard() {
        let mut cfg = small_cfg();
        cfg.stepsize = Some(1e9);
        match sgd_run(&cfg) {
            Err(ExperimentError::Diverged { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn default_stepsize_is_inverse_smoothness() {
        let cfg = ExperimentConfig::default();
        let r = resolve(&cfg).unwrap();
        assert_eq!(r.stepsize, 1.0 / r.constants.l_h);
        assert_eq!(r.constants.l_h, 2222.4722222222222);
    }

    #[test]
    fn trace_respects_stride_and_decomposition() {
        let cfg = small_cfg();
        let traj = sgd_run(&cfg).unwrap();
        let records = trace_bounds(&cfg, &traj).unwrap();
        assert_eq!(records.len(), 5); // t = 0, 5, 10, 15, 20
        assert_eq!(records.last().unwrap().t, 20);
        for rec in &records {
            assert_eq!(rec.bound_b_term, rec.grad_f_sqnorm);
            let sum = rec.bound_a_term + rec.bound_b_term + rec.bound_c_const;
            assert!((rec.bound_rhs - sum).abs() <= 1e-12 * rec.bound_rhs.max(1.0));
            assert!(rec.gvar_emp <= rec.bound_rhs + 3.0 * rec.gvar_se);
            assert!(rec.kl_qp.is_finite() && rec.kl_qp >= -1e-12);
        }
        // Uneven stride still floors: T=20, stride 3 -> 0,3,..,18.
        let mut cfg3 = cfg.clone();
        cfg3.eval_every = 3;
        let recs3 = trace_bounds(&cfg3, &traj).unwrap();
        assert_eq!(recs3.len(), 7);
        assert_eq!(recs3.last().unwrap().t, 18);
    }

    #[test]
    fn trace_marks_missing_prior_kl_as_nan() {
        let mut cfg = small_cfg();
        cfg.lambda = f64::INFINITY;
        cfg.family = Family::SquareRoot;
        cfg.conditioner = None;
        let traj = sgd_run(&cfg).unwrap();
        let records = trace_bounds(&cfg, &traj).unwrap();
        assert!(records.iter().all(|r| r.kl_qp.is_nan()));
    }

    #[test]
    fn trace_supports_all_three_theorems() {
        let mut entropy_cfg = small_cfg();
        entropy_cfg.replications = 40;
        let mut kl_cfg = entropy_cfg.clone();
        kl_cfg.form = ElboForm::Kl;
        kl_cfg.theorem = TheoremChoice::Kl;
        let mut clipped_cfg = entropy_cfg.clone();
        clipped_cfg.conditioner = Some(Conditioner::clipped_softplus(2.0).unwrap());
        clipped_cfg.theorem = TheoremChoice::BoundedEntropy;
        for cfg in [entropy_cfg, kl_cfg, clipped_cfg] {
            let traj = sgd_run(&cfg).unwrap();
            let records = trace_bounds(&cfg, &traj).unwrap();
            assert!(records
                .iter()
                .all(|r| r.gvar_emp <= r.bound_rhs + 3.0 * r.gvar_se));
        }
    }

    #[test]
    fn trace_csv_round_trips_bit_exactly() {
        let cfg = small_cfg();
        let traj = sgd_run(&cfg).unwrap();
        let records = trace_bounds(&cfg, &traj).unwrap();
        let text = trace_csv(&records);
        assert!(text.starts_with(TRACE_HEADER));
        let rows = parse_trace_csv(&text).unwrap();
        assert_eq!(rows.len(), records.len());
        for (rec, row) in records.iter().zip(&rows) {
            assert_eq!(rec.t as f64, row[0]);
            assert_eq!(rec.f_gap.to_bits(), row[1].to_bits());
            assert_eq!(rec.gvar_emp.to_bits(), row[3].to_bits());
            assert_eq!(rec.kl_qp.to_bits(), row[9].to_bits());
        }
    }

    #[test]
    fn loader_handles_toy_errors_and_warnings() {
        let dir = std::env::temp_dir();
        let stamp = std::process::id();
        let write = |name: &str, content: &str| {
            let path = dir.join(format!("bbvi-{stamp}-{name}.csv"));
            std::fs::write(&path, content).unwrap();
            path
        };
        // Non-numeric cell names row and column.
        let bad = write("bad", "1,2\nx,4\n");
        let err = load_csv_dataset(&bad, false).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 1"), "{err}");
        // Ragged rows name the row.
        let ragged = write("ragged", "1,2\n3,4,5\n");
        let err = load_csv_dataset(&ragged, false).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        // Single column rejected.
        let narrow = write("narrow", "1\n2\n");
        assert!(load_csv_dataset(&narrow, false).is_err());
        // Non-finite cell rejected.
        let inf = write("inf", "1,inf\n");
        assert!(load_csv_dataset(&inf, false).is_err());
        // Fewer rows than features warns.
        let wide = write("wide", "1,2,3,4\n5,6,7,8\n");
        let ds = load_csv_dataset(&wide, false).unwrap();
        assert_eq!(ds.x.cols(), 3);
        assert_eq!(ds.warnings.len(), 1);
        assert!(ds.warnings[0].contains("N = 2 < d = 3"));
        // Constant columns standardize to centered, unit-scale values.
        let constant = write("constant", "2,1\n2,2\n2,3\n");
        let ds = load_csv_dataset(&constant, true).unwrap();
        for i in 0..3 {
            assert_eq!(ds.x.get(i, 0), 0.0);
        }
        for name in ["bad", "ragged", "narrow", "inf", "wide", "constant"] {
            let _ = std::fs::remove_file(dir.join(format!("bbvi-{stamp}-{name}.csv")));
        }
    }

    #[test]
    fn loader_accepts_airfoil_shaped_data() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("bbvi-{}-airfoil.csv", std::process::id()));
        let mut text = String::new();
        let mut rng = RngStream::new(2024, 0);
        for _ in 0..1503 {
            let row: Vec<String> = (0..6)
                .map(|_| format!("{:.6}", 10.0 * rng.next_uniform()))
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(&path, &text).unwrap();
        let ds = load_csv_dataset(&path, true).unwrap();
        let _ = std::fs::remove_file(&path);
        assert_eq!((ds.x.rows(), ds.x.cols()), (1503, 5));
        assert_eq!(ds.y.len(), 1503);
        assert!(ds.warnings.is_empty());
        for j in 0..5 {
            let col: Vec<f64> = (0..1503).map(|i| ds.x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 1503.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 1503.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gen_data_round_trips_through_the_loader() {
        let csv_text = cmd_gen_data(3, 25, 0.4, 77).unwrap();
        assert_eq!(csv_text.lines().count(), 25);
        assert_eq!(cmd_gen_data(3, 25, 0.4, 77).unwrap(), csv_text);
        let dir = std::env::temp_dir();
        let path = dir.join(format!("bbvi-{}-gen.csv", std::process::id()));
        std::fs::write(&path, &csv_text).unwrap();
        let ds = load_csv_dataset(&path, false).unwrap();
        let _ = std::fs::remove_file(&path);
        let (x, y) = synth_linreg(3, 25, 0.4, 77);
        for i in 0..25 {
            for j in 0..3 {
                assert_eq!(ds.x.get(i, j).to_bits(), x.get(i, j).to_bits());
            }
            assert_eq!(ds.y[i].to_bits(), y[i].to_bits());
        }
    }

    #[test]
    fn constants_table_identity_design() {
        // X = I, y = 0, sigma = lambda = 1: L_H = 2, mu_KL = 1,
        // condition number 2, all exact.
        let dir = std::env::temp_dir();
        let path = dir.join(format!("bbvi-{}-eye.csv", std::process::id()));
        std::fs::write(&path, "1,0,0,0\n0,1,0,0\n0,0,1,0\n").unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.target = TargetChoice::Linreg;
        cfg.sigma = 1.0;
        cfg.lambda = 1.0;
        cfg.dataset_path = Some(path.clone());
        cfg.standardize = false;
        let table = cmd_constants(&cfg).unwrap();
        let _ = std::fs::remove_file(&path);
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), CONSTANTS_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[1], "3"); // d
        assert_eq!(row[2], "3"); // N
        assert_eq!(row[3].parse::<f64>().unwrap(), 2.0); // L_H
        assert_eq!(row[4].parse::<f64>().unwrap(), 1.0); // mu_KL
        assert_eq!(row[5].parse::<f64>().unwrap(), 2.0); // kappa_cond
        // The A column is the entropy-form coefficient.
        let a = row[7].parse::<f64>().unwrap();
        assert_eq!(a, 2.0 * 4.0 * 6.0 / (1.0 * 10.0));
        // Quadratic targets have no constants row.
        let quad = ExperimentConfig::default();
        assert!(cmd_constants(&quad).is_err());
    }

    #[test]
    fn constants_direct_mode_reproduces_published_scale() {
        let table = cmd_constants_direct(
            "fertility",
            9,
            100,
            1.840e3,
            5.017e2,
            10,
            Family::Cholesky,
            3.0,
        )
        .unwrap();
        let row = table.lines().nth(1).unwrap();
        assert!(row.starts_with("fertility,9,100,"));
        let a: f64 = row.split(',').nth(7).unwrap().parse().unwrap();
        assert!((a - 1.620e4).abs() / 1.620e4 < 5e-3);
        let statdist: f64 = row.split(',').nth(6).unwrap().parse().unwrap();
        assert!(statdist.is_nan());
    }

    #[test]
    fn compare_params_orders_families_at_every_iterate() {
        let mut cfg = ExperimentConfig::default();
        cfg.target = TargetChoice::Linreg;
        cfg.d = 4;
        cfg.n = 40;
        cfg.sigma = 0.5;
        cfg.lambda = 2.0;
        cfg.iterations = 20;
        cfg.eval_every = 5;
        cfg.replications = 80;
        cfg.m_samples = 4;
        cfg.seed = 12;
        let text = cmd_compare_parameterizations(&cfg).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), COMPARE_HEADER);
        let mut rows = 0;
        for line in lines {
            let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            let (sp, id, sq) = (v[2], v[3], v[4]);
            let tol = 1e-12 * sq.max(1.0);
            assert!(
                sq + tol >= id && id + tol >= sp,
                "ordering broken at t={}: {sp} / {id} / {sq}",
                v[0]
            );
            rows += 1;
        }
        assert_eq!(rows, 5);
        // Determinism under a fixed seed.
        assert_eq!(cmd_compare_parameterizations(&cfg).unwrap(), text);
    }

    #[test]
    fn compare_params_meanfield_matches_cholesky_in_one_dimension() {
        let mut cfg = ExperimentConfig::default();
        cfg.d = 1;
        cfg.iterations = 10;
        cfg.eval_every = 5;
        cfg.replications = 60;
        cfg.m_samples = 3;
        cfg.seed = 3;
        let text = cmd_compare_parameterizations(&cfg).unwrap();
        for line in text.lines().skip(1) {
            let v: Vec<&str> = line.split(',').collect();
            assert_eq!(v[1], v[2], "d=1 mean-field and cholesky should coincide");
        }
    }

    #[test]
    fn run_command_emits_the_contracted_header() {
        let mut cfg = small_cfg();
        cfg.iterations = 5;
        cfg.eval_every = 5;
        cfg.replications = 40;
        let text = cmd_run(&cfg).unwrap();
        assert!(text.starts_with(TRACE_HEADER));
        assert_eq!(text.lines().count(), 3); // header + t=0 + t=5
    }

    #[test]
    fn verify_registry_all_pass() {
        for check in verify_checks() {
            if let Err(detail) = (check.run)() {
                panic!("check {} failed: {detail}", check.name);
            }
        }
    }

    #[test]
    fn verify_command_reports_and_succeeds() {
        let mut buf = Vec::new();
        let ok = cmd_verify(&mut buf).unwrap();
        assert!(ok);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("status,check,tolerance,detail"));
        assert!(text.contains("PASS,pullback-sqnorm-identity"));
        assert!(text.contains("RESULT,"));
        assert!(!text.contains("FAIL,"));
    }
}
