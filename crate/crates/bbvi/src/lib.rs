//! Black-box variational inference with reparameterization gradients over
//! location-scale families, plus matching analytic variance bounds.
//!
//! Module map:
//!
//! - [`linalg`]: dense/triangular kernels (cholesky, LU log-determinant,
//!   symmetric eigenvalue extremes) used by the rest of the crate;
//! - [`basedist`]: base distributions (gaussian, standardized student-t) and
//!   the deterministic counter-based [`RngStream`];
//! - [`reparam`]: variational families, conditioners, the location-scale
//!   transform, gradient pullbacks, and entropies;
//! - [`targets`]: analytic target models (isotropic quadratic, gaussian
//!   linear regression), closed-form ELBO/KL machinery, and curvature
//!   constants;
//! - [`estimator`]: Monte-Carlo gradient estimators and empirical
//!   second-moment measurement;
//! - [`bounds`]: analytic ABC variance bounds and the matching lower
//!   bound;
//! - [`experiment`]: the experiment driver — configs, fixed-stepsize SGD,
//!   bound traces, dataset ingestion, and the CSV-emitting commands.

pub mod basedist;
pub mod bounds;
pub mod estimator;
pub mod experiment;
pub mod linalg;
pub mod reparam;
pub mod targets;

pub use basedist::{stream_id, BaseDistError, BaseDistribution, RngStream};
pub use bounds::{
    abc_bounded_entropy, abc_entropy_form, abc_kl_form, c_dim, evaluate_abc, lower_bound_rhs,
    lower_bound_spec, AbcBound, BoundsError, LowerBoundSpec,
};
pub use estimator::{empirical_sqnorm, grad_estimate, grad_sample, EstimatorError, VarianceEstimate};
pub use experiment::{
    cmd_compare_parameterizations, cmd_constants, cmd_constants_direct, cmd_gen_data, cmd_run,
    cmd_verify, config_warnings, load_csv_dataset, sgd_run, synth_linreg, trace_bounds, trace_csv,
    verify_checks, Dataset, ExperimentConfig, ExperimentError, TargetChoice, TheoremChoice,
    TrajectoryRecord, VerifyCheck, COMPARE_HEADER, CONSTANTS_HEADER, TRACE_HEADER,
};
pub use linalg::{DenseMatrix, LinalgError, LowerTriangular};
pub use reparam::{
    match_parameterizations, strict_lower_len, Conditioner, Family, FlatGradient, MatchedParams,
    ReparamError, ScaleMatrix, VariationalParams,
};
pub use targets::{
    exact_elbo, expected_f, kl_gradient, kl_to_prior, linreg_target, quadratic_target,
    quadratic_target_flat, target_constants, Bijector, ConstantsRecord, ElboForm, TargetError,
    TargetModel,
};

/// Unified error type for the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    BaseDist(#[from] BaseDistError),
    #[error(transparent)]
    Reparam(#[from] ReparamError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;
