//! Analytic target models: negative joint log-densities `f_H`, negative
//! log-likelihood parts `f_KL`, their gradients, closed-form regularizers,
//! and the curvature constants that feed the variance-bound calculators.
//!
//! Two ELBO decompositions of the same objective are supported:
//!
//! - **entropy form**: `F(lambda) = E f_H(t_lambda(u)) - H(q_lambda)`, where
//!   `f_H` is the negative joint (likelihood times prior, prior normalized);
//! - **KL form**: `F(lambda) = E f_KL(t_lambda(u)) + KL(q_lambda || p)`,
//!   where `f_KL` is the negative likelihood alone and the prior sits in the
//!   closed-form KL term (gaussian base only).
//!
//! Because the priors carry their normalizing constants, both forms evaluate
//! to the same `F(lambda)` exactly, so `F*` and optimality gaps are
//! form-independent bookkeeping.

use crate::basedist::BaseDistribution;
use crate::linalg::{solve_spd, sym_eig_extremes, DenseMatrix, LinalgError};
use crate::reparam::{entropy, FlatGradient, ReparamError, VariationalParams};
use thiserror::Error;

/// Ridge added to a singular normal-equation matrix when solving for the
/// likelihood stationary point.
const RIDGE_EPS: f64 = 1e-10;

/// Scale entries smaller than this magnitude count as singular.
const SINGULAR_SCALE: f64 = 1e-300;

const LN_PI: f64 = 1.1447298858494002; // ln(pi)
const LN_2PI: f64 = 1.8378770664093453; // ln(2 pi)

/// Errors from target construction and closed-form evaluation.
#[derive(Debug, Error)]
pub enum TargetError {
    /// A hyperparameter that must be positive was not.
    #[error("hyperparameter {name} must be positive (got {value})")]
    InvalidHyperparameter { name: &'static str, value: f64 },
    /// Component lengths or matrix shapes do not line up.
    #[error("shape mismatch: {context} (got {got}, expected {expected})")]
    ShapeMismatch {
        context: &'static str,
        got: usize,
        expected: usize,
    },
    /// The closed-form ELBO requires a target that is quadratic in the
    /// latent coordinates (identity bijector).
    #[error("exact ELBO unavailable: target is not quadratic in the latent coordinates")]
    ExactElboUnavailable,
    /// The KL form needs a normalized gaussian prior, which this target
    /// does not carry.
    #[error("KL form requires a target with a normalized gaussian prior")]
    NoPrior,
    /// Propagated matrix failure.
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    /// Propagated family failure.
    #[error(transparent)]
    Reparam(#[from] ReparamError),
}

type Result<T> = std::result::Result<T, TargetError>;

/// Which decomposition of the objective an estimator or bound works with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElboForm {
    /// `E f_H - H(q)`.
    Entropy,
    /// `E f_KL + KL(q || p)`.
    Kl,
}

impl ElboForm {
    pub fn name(&self) -> &'static str {
        match self {
            ElboForm::Entropy => "entropy",
            ElboForm::Kl => "kl",
        }
    }
}

impl std::fmt::Display for ElboForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ElboForm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "entropy" => Ok(ElboForm::Entropy),
            "kl" => Ok(ElboForm::Kl),
            other => Err(format!("unknown ELBO form '{other}' (expected entropy or kl)")),
        }
    }
}

/// Componentwise bijection de-constraining the model's support; `f` is
/// evaluated in the unconstrained coordinates through its inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bijector {
    /// Unconstrained model: `psi = id`.
    Identity,
    /// Positive support: `psi = ln`, so `psi^-1 = exp`.
    Exp,
}

impl Bijector {
    /// Forward map `psi(z)` from the constrained to the unconstrained space.
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Bijector::Identity => z.to_vec(),
            Bijector::Exp => z.iter().map(|x| x.ln()).collect(),
        }
    }
}

/// Inverse-bijector pull: returns `(psi^-1(zeta), ln |J_psi^-1(zeta)|,
/// gradient of that log-Jacobian)`.
///
/// Identity gives `(zeta, 0, 0)`; exp gives `(e^zeta componentwise,
/// sum(zeta), 1 per component)`.
pub fn bijector_pull(b: Bijector, zeta: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    match b {
        Bijector::Identity => (zeta.to_vec(), 0.0, vec![0.0; zeta.len()]),
        Bijector::Exp => {
            let z: Vec<f64> = zeta.iter().map(|x| x.exp()).collect();
            let logj: f64 = zeta.iter().sum();
            (z, logj, vec![1.0; zeta.len()])
        }
    }
}

/// The analytic target kinds.
#[derive(Debug, Clone)]
enum TargetKind {
    /// `f_KL = a ||z - zstar||^2`, `f_H = f_KL + b ||z||^2 + log_norm` with
    /// `a = n / sigma^2`, `b = 1 / lambda`, `log_norm = (d/2) ln(pi lambda)`.
    Quadratic {
        a: f64,
        b: f64,
        log_norm: f64,
        lambda: f64,
        n: f64,
        zstar: Vec<f64>,
    },
    /// Flat-prior limit (`lambda -> infinity`): `f_H = f_KL =
    /// a ||z - zstar||^2`, no prior term.
    FlatQuadratic { a: f64, n: f64, zstar: Vec<f64> },
    /// Gaussian linear regression: `f_KL = ||y - Xw||^2 / (2 sigma^2) +
    /// (N/2) ln(2 pi sigma^2)`; `f_H` adds `||w||^2 / (2 lambda) +
    /// (d/2) ln(2 pi lambda)`. Stored via sufficient statistics.
    LinReg {
        xtx: DenseMatrix,
        xty: Vec<f64>,
        y_sq: f64,
        n: usize,
        sigma_sq: f64,
        lambda: f64,
    },
}

/// One analytic target model with both decompositions and a bijector hook.
#[derive(Debug, Clone)]
pub struct TargetModel {
    kind: TargetKind,
    dim: usize,
    bijector: Bijector,
}

/// Curvature constants, stationary points, and optimal values of a target —
/// everything the bound calculators consume.
#[derive(Debug, Clone)]
pub struct ConstantsRecord {
    /// Latent dimension.
    pub dim: usize,
    /// Number of observations (pseudo-count for the quadratic target).
    pub n_data: usize,
    /// Smoothness constant of `f_H`.
    pub l_h: f64,
    /// Quadratic-growth constant of `f_H`.
    pub mu_h: f64,
    /// Smoothness constant of `f_KL`.
    pub l_kl: f64,
    /// Quadratic-growth constant of `f_KL`.
    pub mu_kl: f64,
    /// Stationary point of `f_H`.
    pub zbar_h: Vec<f64>,
    /// Stationary point of `f_KL`.
    pub zbar_kl: Vec<f64>,
    /// Infimum of `f_H`.
    pub f_star_h: f64,
    /// Infimum of `f_KL`.
    pub f_star_kl: f64,
    /// Infimum of the objective `F` over all of `R^d x GL(d)` — for these
    /// conjugate targets, the negative log marginal likelihood.
    pub f_star: f64,
    /// Entropy-regularizer floor `inf_lambda h_H(lambda)`, available only
    /// when the conditioner caps the scale diagonals.
    pub h_star: Option<f64>,
}

impl ConstantsRecord {
    /// Squared distance between the two stationary points.
    pub fn statdist_sq(&self) -> f64 {
        self.zbar_kl
            .iter()
            .zip(&self.zbar_h)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `(L, mu)` for the chosen form's `f`.
    pub fn curvature(&self, form: ElboForm) -> (f64, f64) {
        match form {
            ElboForm::Entropy => (self.l_h, self.mu_h),
            ElboForm::Kl => (self.l_kl, self.mu_kl),
        }
    }

    /// Stationary point of the chosen form's `f`.
    pub fn minimizer(&self, form: ElboForm) -> &[f64] {
        match form {
            ElboForm::Entropy => &self.zbar_h,
            ElboForm::Kl => &self.zbar_kl,
        }
    }

    /// Infimum of the chosen form's `f`.
    pub fn f_min(&self, form: ElboForm) -> f64 {
        match form {
            ElboForm::Entropy => self.f_star_h,
            ElboForm::Kl => self.f_star_kl,
        }
    }
}

fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(TargetError::InvalidHyperparameter { name, value })
    }
}

/// Isotropic quadratic target: pseudo-count `n`, observation scale `sigma`,
/// gaussian prior `N(0, (lambda_prior/2) I)` (so that the negative log-prior
/// is `||z||^2 / lambda_prior` plus its normalizer), likelihood mode `zstar`.
pub fn quadratic_target(
    n: f64,
    sigma: f64,
    lambda_prior: f64,
    zstar: Vec<f64>,
    d: usize,
) -> Result<TargetModel> {
    require_positive("N", n)?;
    require_positive("sigma", sigma)?;
    require_positive("lambda_prior", lambda_prior)?;
    if zstar.len() != d {
        return Err(TargetError::ShapeMismatch {
            context: "quadratic mode vector length",
            got: zstar.len(),
            expected: d,
        });
    }
    let a = n / (sigma * sigma);
    let b = 1.0 / lambda_prior;
    let log_norm = 0.5 * d as f64 * (LN_PI + lambda_prior.ln());
    Ok(TargetModel {
        kind: TargetKind::Quadratic {
            a,
            b,
            log_norm,
            lambda: lambda_prior,
            n,
            zstar,
        },
        dim: d,
        bijector: Bijector::Identity,
    })
}

/// Flat-prior limit of [`quadratic_target`] (`lambda_prior -> infinity`):
/// `f_H = f_KL = a ||z - zstar||^2` with no prior term, so the smoothness
/// and growth constants coincide at `2a`. The KL form is unavailable.
pub fn quadratic_target_flat(n: f64, sigma: f64, zstar: Vec<f64>, d: usize) -> Result<TargetModel> {
    require_positive("N", n)?;
    require_positive("sigma", sigma)?;
    if zstar.len() != d {
        return Err(TargetError::ShapeMismatch {
            context: "quadratic mode vector length",
            got: zstar.len(),
            expected: d,
        });
    }
    let a = n / (sigma * sigma);
    Ok(TargetModel {
        kind: TargetKind::FlatQuadratic { a, n, zstar },
        dim: d,
        bijector: Bijector::Identity,
    })
}

/// Gaussian linear regression `y ~ N(Xw, sigma^2 I)` with prior
/// `w ~ N(0, lambda_prior I)`, reduced to sufficient statistics.
pub fn linreg_target(
    x: &DenseMatrix,
    y: &[f64],
    sigma: f64,
    lambda_prior: f64,
) -> Result<TargetModel> {
    require_positive("sigma", sigma)?;
    require_positive("lambda_prior", lambda_prior)?;
    let n = x.rows();
    let d = x.cols();
    if n == 0 || d == 0 {
        return Err(TargetError::ShapeMismatch {
            context: "design matrix size",
            got: n.min(d),
            expected: 1,
        });
    }
    if y.len() != n {
        return Err(TargetError::ShapeMismatch {
            context: "response length",
            got: y.len(),
            expected: n,
        });
    }
    let xt = x.transpose();
    let xtx = xt.matmul(x)?;
    let xty = xt.matvec(y)?;
    let y_sq = y.iter().map(|v| v * v).sum();
    Ok(TargetModel {
        kind: TargetKind::LinReg {
            xtx,
            xty,
            y_sq,
            n,
            sigma_sq: sigma * sigma,
            lambda: lambda_prior,
        },
        dim: d,
        bijector: Bijector::Identity,
    })
}

impl TargetModel {
    /// Latent dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The support bijector (identity unless explicitly replaced).
    pub fn bijector(&self) -> Bijector {
        self.bijector
    }

    /// Same target evaluated through a different support bijector.
    pub fn with_bijector(mut self, bijector: Bijector) -> Self {
        self.bijector = bijector;
        self
    }

    /// Isotropic gaussian prior variance per coordinate, when the target
    /// carries a normalized prior.
    pub fn prior_variance(&self) -> Option<f64> {
        match &self.kind {
            TargetKind::Quadratic { lambda, .. } => Some(lambda / 2.0),
            TargetKind::FlatQuadratic { .. } => None,
            TargetKind::LinReg { lambda, .. } => Some(*lambda),
        }
    }

    /// Prior variance or the [`TargetError::NoPrior`] error.
    pub fn prior_variance_required(&self) -> Result<f64> {
        self.prior_variance().ok_or(TargetError::NoPrior)
    }

    fn check_dim(&self, zeta: &[f64]) -> Result<()> {
        if zeta.len() != self.dim {
            return Err(TargetError::ShapeMismatch {
                context: "evaluation point length",
                got: zeta.len(),
                expected: self.dim,
            });
        }
        Ok(())
    }

    /// Negative likelihood part in model coordinates (pre-bijector).
    fn base_f_kl(&self, z: &[f64]) -> f64 {
        match &self.kind {
            TargetKind::Quadratic { a, zstar, .. } | TargetKind::FlatQuadratic { a, zstar, .. } => {
                a * z
                    .iter()
                    .zip(zstar)
                    .map(|(zi, si)| (zi - si) * (zi - si))
                    .sum::<f64>()
            }
            TargetKind::LinReg {
                xtx,
                xty,
                y_sq,
                n,
                sigma_sq,
                ..
            } => {
                let xtxz = xtx.matvec(z).expect("dimension checked");
                let quad: f64 = z.iter().zip(&xtxz).map(|(a, b)| a * b).sum();
                let cross: f64 = z.iter().zip(xty).map(|(a, b)| a * b).sum();
                (y_sq - 2.0 * cross + quad) / (2.0 * sigma_sq)
                    + 0.5 * *n as f64 * (LN_2PI + sigma_sq.ln())
            }
        }
    }

    fn base_grad_f_kl(&self, z: &[f64]) -> Vec<f64> {
        match &self.kind {
            TargetKind::Quadratic { a, zstar, .. } | TargetKind::FlatQuadratic { a, zstar, .. } => z
                .iter()
                .zip(zstar)
                .map(|(zi, si)| 2.0 * a * (zi - si))
                .collect(),
            TargetKind::LinReg {
                xtx, xty, sigma_sq, ..
            } => {
                let xtxz = xtx.matvec(z).expect("dimension checked");
                xtxz.iter()
                    .zip(xty)
                    .map(|(a, b)| (a - b) / sigma_sq)
                    .collect()
            }
        }
    }

    /// Negative log-prior (with normalizer) in model coordinates; zero for
    /// the flat target.
    fn neg_log_prior(&self, z: &[f64]) -> f64 {
        match &self.kind {
            TargetKind::Quadratic { b, log_norm, .. } => {
                b * z.iter().map(|zi| zi * zi).sum::<f64>() + log_norm
            }
            TargetKind::FlatQuadratic { .. } => 0.0,
            TargetKind::LinReg { lambda, .. } => {
                z.iter().map(|zi| zi * zi).sum::<f64>() / (2.0 * lambda)
                    + 0.5 * self.dim as f64 * (LN_2PI + lambda.ln())
            }
        }
    }

    fn grad_neg_log_prior(&self, z: &[f64]) -> Vec<f64> {
        match &self.kind {
            TargetKind::Quadratic { b, .. } => z.iter().map(|zi| 2.0 * b * zi).collect(),
            TargetKind::FlatQuadratic { .. } => vec![0.0; z.len()],
            TargetKind::LinReg { lambda, .. } => z.iter().map(|zi| zi / lambda).collect(),
        }
    }

    /// `f_KL(zeta)`: negative log-likelihood through the bijector.
    pub fn f_kl(&self, zeta: &[f64]) -> Result<f64> {
        self.check_dim(zeta)?;
        let (z, _, _) = bijector_pull(self.bijector, zeta);
        Ok(self.base_f_kl(&z))
    }

    /// `grad f_KL(zeta)`.
    pub fn grad_f_kl(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(zeta)?;
        let (z, _, _) = bijector_pull(self.bijector, zeta);
        let g = self.base_grad_f_kl(&z);
        Ok(self.chain_through_bijector(zeta, &z, g, false))
    }

    /// `f_H(zeta)`: negative joint log-density through the bijector,
    /// including the inverse log-Jacobian correction.
    pub fn f_h(&self, zeta: &[f64]) -> Result<f64> {
        self.check_dim(zeta)?;
        let (z, logj, _) = bijector_pull(self.bijector, zeta);
        Ok(self.base_f_kl(&z) + self.neg_log_prior(&z) - logj)
    }

    /// `grad f_H(zeta)`.
    pub fn grad_f_h(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(zeta)?;
        let (z, _, _) = bijector_pull(self.bijector, zeta);
        let mut g = self.base_grad_f_kl(&z);
        for (gi, pi) in g.iter_mut().zip(self.grad_neg_log_prior(&z)) {
            *gi += pi;
        }
        Ok(self.chain_through_bijector(zeta, &z, g, true))
    }

    /// Chain a model-coordinate gradient through the componentwise inverse
    /// bijector; `with_jacobian` subtracts the log-Jacobian gradient (the
    /// `f_H` correction term).
    fn chain_through_bijector(
        &self,
        _zeta: &[f64],
        z: &[f64],
        g: Vec<f64>,
        with_jacobian: bool,
    ) -> Vec<f64> {
        match self.bijector {
            Bijector::Identity => g,
            Bijector::Exp => g
                .iter()
                .zip(z)
                .map(|(gi, zi)| gi * zi - if with_jacobian { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// `f` for the chosen form.
    pub fn f(&self, form: ElboForm, zeta: &[f64]) -> Result<f64> {
        match form {
            ElboForm::Entropy => self.f_h(zeta),
            ElboForm::Kl => self.f_kl(zeta),
        }
    }

    /// `grad f` for the chosen form.
    pub fn grad_f(&self, form: ElboForm, zeta: &[f64]) -> Result<Vec<f64>> {
        match form {
            ElboForm::Entropy => self.grad_f_h(zeta),
            ElboForm::Kl => self.grad_f_kl(zeta),
        }
    }

    /// Whether `f` is quadratic in the latent coordinates (identity
    /// bijector), which the closed-form ELBO and constants require.
    pub fn is_quadratic_in_latent(&self) -> bool {
        self.bijector == Bijector::Identity
    }

    /// Constant Hessian of the chosen form's `f` (identity bijector only).
    pub fn hessian(&self, form: ElboForm) -> Result<DenseMatrix> {
        if !self.is_quadratic_in_latent() {
            return Err(TargetError::ExactElboUnavailable);
        }
        let d = self.dim;
        match (&self.kind, form) {
            (TargetKind::Quadratic { a, b, .. }, ElboForm::Entropy) => {
                Ok(scaled_identity(d, 2.0 * (a + b)))
            }
            (TargetKind::Quadratic { a, .. }, ElboForm::Kl) => Ok(scaled_identity(d, 2.0 * a)),
            (TargetKind::FlatQuadratic { a, .. }, _) => Ok(scaled_identity(d, 2.0 * a)),
            (TargetKind::LinReg {
                xtx,
                sigma_sq,
                lambda,
                ..
            }, form) => {
                let mut h = DenseMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        h.set(i, j, xtx.get(i, j) / sigma_sq);
                    }
                    if form == ElboForm::Entropy {
                        h.set(i, i, h.get(i, i) + 1.0 / lambda);
                    }
                }
                Ok(h)
            }
        }
    }
}

fn scaled_identity(d: usize, scale: f64) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(d, d);
    for i in 0..d {
        m.set(i, i, scale);
    }
    m
}

/// Curvature constants, stationary points, and optimal objective values.
///
/// `h_star` is populated only when a clipped-softplus conditioner is
/// supplied: the entropy regularizer `h_H = -H(q)` is then bounded below by
/// `-d * H_base - d * ln(cap)`.
pub fn target_constants(
    t: &TargetModel,
    dist: &BaseDistribution,
    conditioner: Option<&crate::reparam::Conditioner>,
) -> Result<ConstantsRecord> {
    if !t.is_quadratic_in_latent() {
        return Err(TargetError::ExactElboUnavailable);
    }
    let d = t.dim;
    let h_star = match conditioner {
        Some(crate::reparam::Conditioner::ClippedSoftplus { cap }) => {
            Some(-(d as f64) * dist.entropy_per_dim() - (d as f64) * cap.ln())
        }
        _ => None,
    };
    match &t.kind {
        TargetKind::Quadratic {
            a,
            b,
            log_norm,
            lambda,
            n,
            zstar,
        } => {
            let zsq: f64 = zstar.iter().map(|z| z * z).sum();
            let zbar_h: Vec<f64> = zstar.iter().map(|z| a * z / (a + b)).collect();
            let f_star_h = a * b / (a + b) * zsq + log_norm;
            let f_star = 0.5 * d as f64 * (1.0 + lambda * a).ln() + a * b / (a + b) * zsq;
            Ok(ConstantsRecord {
                dim: d,
                n_data: n.round() as usize,
                l_h: 2.0 * (a + b),
                mu_h: 2.0 * (a + b),
                l_kl: 2.0 * a,
                mu_kl: 2.0 * a,
                zbar_h,
                zbar_kl: zstar.clone(),
                f_star_h,
                f_star_kl: 0.0,
                f_star,
                h_star,
            })
        }
        TargetKind::FlatQuadratic { a, n, zstar } => Ok(ConstantsRecord {
            dim: d,
            n_data: n.round() as usize,
            l_h: 2.0 * a,
            mu_h: 2.0 * a,
            l_kl: 2.0 * a,
            mu_kl: 2.0 * a,
            zbar_h: zstar.clone(),
            zbar_kl: zstar.clone(),
            f_star_h: 0.0,
            f_star_kl: 0.0,
            f_star: 0.5 * d as f64 * (a / std::f64::consts::PI).ln(),
            h_star,
        }),
        TargetKind::LinReg {
            xtx,
            xty,
            y_sq,
            n,
            sigma_sq,
            lambda,
        } => {
            let hess_kl = t.hessian(ElboForm::Kl)?;
            let hess_h = t.hessian(ElboForm::Entropy)?;
            let (mu_kl, l_kl) = sym_eig_extremes(&hess_kl)?;
            let (mu_h, l_h) = sym_eig_extremes(&hess_h)?;
            // Likelihood stationary point: X'X w = X'y, ridge fallback when
            // the normal equations are singular.
            let zbar_kl = match solve_spd(xtx, xty) {
                Ok(w) => w,
                Err(_) => {
                    let mut ridged = xtx.clone();
                    for i in 0..d {
                        ridged.set(i, i, ridged.get(i, i) + RIDGE_EPS);
                    }
                    solve_spd(&ridged, xty)?
                }
            };
            // MAP point: (X'X/sigma^2 + I/lambda) w = X'y / sigma^2.
            let rhs: Vec<f64> = xty.iter().map(|v| v / sigma_sq).collect();
            let zbar_h = solve_spd(&hess_h, &rhs)?;
            let f_star_kl = t.f_kl(&zbar_kl)?;
            let f_star_h = t.f_h(&zbar_h)?;
            // Negative log marginal likelihood of y ~ N(0, sigma^2 I + lambda X X'),
            // reduced to d x d via the matrix determinant lemma and Woodbury.
            let nf = *n as f64;
            let mut cap_mat = DenseMatrix::zeros(d, d); // I + (lambda/sigma^2) X'X
            let mut woodbury = xtx.clone(); // X'X + (sigma^2/lambda) I
            for i in 0..d {
                for j in 0..d {
                    cap_mat.set(i, j, lambda / sigma_sq * xtx.get(i, j));
                }
                cap_mat.set(i, i, cap_mat.get(i, i) + 1.0);
                woodbury.set(i, i, woodbury.get(i, i) + sigma_sq / lambda);
            }
            let logdet = cap_mat.logabsdet()?;
            let sol = solve_spd(&woodbury, xty)?;
            let fitted: f64 = xty.iter().zip(&sol).map(|(a, b)| a * b).sum();
            let f_star =
                0.5 * (nf * LN_2PI + nf * sigma_sq.ln() + logdet + (y_sq - fitted) / sigma_sq);
            Ok(ConstantsRecord {
                dim: d,
                n_data: *n,
                l_h,
                mu_h,
                l_kl,
                mu_kl,
                zbar_h,
                zbar_kl,
                f_star_h,
                f_star_kl,
                f_star,
                h_star,
            })
        }
    }
}

/// Closed-form `E f(t_lambda(u))` for a quadratic target: `f(m) +
/// tr(H C C') / 2`, valid for any standardized base (only the first two
/// moments of `u` enter).
pub fn expected_f(t: &TargetModel, form: ElboForm, params: &VariationalParams) -> Result<f64> {
    if !t.is_quadratic_in_latent() {
        return Err(TargetError::ExactElboUnavailable);
    }
    if params.dim() != t.dim {
        return Err(TargetError::ShapeMismatch {
            context: "params dimension",
            got: params.dim(),
            expected: t.dim,
        });
    }
    let h = t.hessian(form)?;
    let c = params.build_scale().to_dense();
    let f_m = t.f(form, params.location())?;
    Ok(f_m + 0.5 * trace_h_cct(&h, &c))
}

/// `tr(H C C')` for symmetric `H`.
fn trace_h_cct(h: &DenseMatrix, c: &DenseMatrix) -> f64 {
    let d = c.rows();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            // (C C')_ij = sum_k C_ik C_jk
            let mut cct = 0.0;
            for k in 0..d {
                cct += c.get(i, k) * c.get(j, k);
            }
            acc += h.get(i, j) * cct;
        }
    }
    acc
}

/// Closed-form objective `F(lambda) = E f_H(t_lambda(u)) - H(q_lambda)` and
/// its exact flat-order gradient, for quadratic targets over any
/// standardized base.
///
/// The scale-block gradient is the chain rule through `build_scale` of
/// `H C - C^-T`; the location block is `grad f_H(m)`.
pub fn exact_elbo(
    t: &TargetModel,
    params: &VariationalParams,
    dist: &BaseDistribution,
) -> Result<(f64, FlatGradient)> {
    if !t.is_quadratic_in_latent() {
        return Err(TargetError::ExactElboUnavailable);
    }
    if params.dim() != t.dim {
        return Err(TargetError::ShapeMismatch {
            context: "params dimension",
            got: params.dim(),
            expected: t.dim,
        });
    }
    let d = t.dim;
    let h = t.hessian(ElboForm::Entropy)?;
    let c = params.build_scale().to_dense();
    let value = t.f_h(params.location())? + 0.5 * trace_h_cct(&h, &c) - entropy(params, dist)?;

    let hc = h.matmul(&c)?;
    let mut flat = vec![0.0; params.param_count()];
    flat[..d].copy_from_slice(&t.grad_f_h(params.location())?);
    match params {
        VariationalParams::MeanField { s, conditioner, .. }
        | VariationalParams::Cholesky { s, conditioner, .. } => {
            for i in 0..d {
                let cii = c.get(i, i);
                if cii.abs() < SINGULAR_SCALE {
                    return Err(TargetError::Linalg(LinalgError::NumericallySingular {
                        index: i,
                        pivot: cii.abs(),
                    }));
                }
                flat[d + i] = (hc.get(i, i) - 1.0 / cii) * conditioner.derivative(s[i]);
            }
            if let VariationalParams::Cholesky { .. } = params {
                // Strict-lower block: C^-T vanishes below the diagonal.
                let mut k = 2 * d;
                for i in 0..d {
                    for j in 0..i {
                        flat[k] = hc.get(i, j);
                        k += 1;
                    }
                }
            }
        }
        VariationalParams::SquareRoot { c_full, .. } => {
            let inv_t = c_full.invert()?.transpose();
            for i in 0..d {
                for j in 0..d {
                    flat[d + i * d + j] = hc.get(i, j) - inv_t.get(i, j);
                }
            }
        }
    }
    Ok((value, FlatGradient::from_values(flat)))
}

/// Closed-form `KL(q_lambda || N(0, v I))` for a gaussian base:
/// `(tr(C C')/v + ||m||^2/v - d + d ln v - 2 ln|det C|) / 2`.
pub fn kl_to_prior(params: &VariationalParams, v: f64) -> Result<f64> {
    require_positive("prior variance", v)?;
    let d = params.dim() as f64;
    let scale = params.build_scale();
    let m_sq: f64 = params.location().iter().map(|x| x * x).sum();
    let logdet = scale.logabsdet()?;
    Ok(0.5 * (scale.frobenius_norm_sq() / v + m_sq / v - d + d * v.ln() - 2.0 * logdet))
}

/// Flat-order gradient of [`kl_to_prior`]: location block `m / v`, scale
/// blocks the chain rule through `build_scale` of `C/v - C^-T`.
pub fn kl_gradient(params: &VariationalParams, v: f64) -> Result<FlatGradient> {
    require_positive("prior variance", v)?;
    let d = params.dim();
    let mut flat = vec![0.0; params.param_count()];
    for (i, mi) in params.location().iter().enumerate() {
        flat[i] = mi / v;
    }
    match params {
        VariationalParams::MeanField { s, conditioner, .. }
        | VariationalParams::Cholesky { s, conditioner, .. } => {
            for i in 0..d {
                let (phi, dphi) = conditioner.eval(s[i]);
                if phi.abs() < SINGULAR_SCALE {
                    return Err(TargetError::Linalg(LinalgError::NumericallySingular {
                        index: i,
                        pivot: phi.abs(),
                    }));
                }
                flat[d + i] = (phi / v - 1.0 / phi) * dphi;
            }
            if let VariationalParams::Cholesky { l, .. } = params {
                for (k, lk) in l.iter().enumerate() {
                    flat[2 * d + k] = lk / v;
                }
            }
        }
        VariationalParams::SquareRoot { c_full, .. } => {
            let inv_t = c_full.invert()?.transpose();
            for i in 0..d {
                for j in 0..d {
                    flat[d + i * d + j] = c_full.get(i, j) / v - inv_t.get(i, j);
                }
            }
        }
    }
    Ok(FlatGradient::from_values(flat))
}
