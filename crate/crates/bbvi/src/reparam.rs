//! Location-scale variational families: conditioners, the reparameterization
//! transform, gradient pullbacks, and entropies.
//!
//! # Families and flat parameter order
//!
//! Three covariance parameterizations are supported, each with location `m`
//! and a scale matrix `C` produced by [`VariationalParams::build_scale`]:
//!
//! - **mean-field**: `C = diag(phi(s))`, flat order `(m, s)`, `p = 2d`;
//! - **cholesky**: `C` lower triangular with conditioned diagonal
//!   `C_ii = phi(s_i)` and raw strict-lower entries, flat order
//!   `(m, s, L row-major)`, `p = d + d(d+1)/2`;
//! - **square-root**: dense `C` stored verbatim, flat order
//!   `(m, C row-major)`, `p = d + d^2`.
//!
//! The flat order is load-bearing: [`FlatGradient`], SGD updates, and
//! finite-difference checks all index the same layout.
//!
//! # Conditioners
//!
//! The diagonal conditioner `phi` maps unconstrained reals to positive scale
//! entries. `identity`, `softplus`, and the tanh-saturated
//! `clipped-softplus` (`phi(x) = S tanh(softplus(x) / S)`, strictly below its
//! cap and 1-Lipschitz) are 1-Lipschitz; `exp` is provided for completeness
//! but is not 1-Lipschitz, and the bound calculators refuse it. Evaluations
//! are overflow-safe: `softplus(x) = x + ln(1 + e^-x)` for positive `x`.

use crate::basedist::BaseDistribution;
use crate::linalg::{DenseMatrix, LinalgError, LowerTriangular};
use thiserror::Error;

/// Relative interval tolerance for the bisection conditioner inverse.
const BISECT_TOL: f64 = 1e-14;

/// Hard cap on bisection iterations (converges in < 80 for any f64 input).
const BISECT_MAX_ITER: usize = 200;

/// Scale entries smaller than this magnitude count as singular.
const SINGULAR_SCALE: f64 = 1e-300;

/// Errors from family construction and reparameterization.
#[derive(Debug, Error)]
pub enum ReparamError {
    /// A requested diagonal value lies outside the conditioner's range.
    #[error("unrepresentable scale: {conditioner} conditioner cannot produce diagonal value {value}")]
    UnrepresentableScale { conditioner: &'static str, value: f64 },
    /// Component lengths do not line up.
    #[error("shape mismatch: {context} (got {got}, expected {expected})")]
    ShapeMismatch {
        context: &'static str,
        got: usize,
        expected: usize,
    },
    /// A parameter entry is NaN or infinite.
    #[error("non-finite parameter entry in {context}")]
    NonFinite { context: &'static str },
    /// Clipped-softplus cap must be a positive finite number.
    #[error("conditioner cap must be positive and finite (got {cap})")]
    InvalidCap { cap: f64 },
    /// Propagated matrix failure (singular scale and friends).
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

type Result<T> = std::result::Result<T, ReparamError>;

/// Diagonal conditioner `phi` applied entrywise to the `s` parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conditioner {
    /// `phi(x) = x` (can produce non-positive diagonals).
    Identity,
    /// `phi(x) = ln(1 + e^x)`.
    Softplus,
    /// `phi(x) = e^x`; not 1-Lipschitz, refused by the bound calculators.
    Exp,
    /// `phi(x) = cap * tanh(softplus(x) / cap)`: smooth, 1-Lipschitz, and
    /// bounded by `cap` (strictly below it in exact arithmetic; f64 rounds
    /// to the cap once `tanh` saturates).
    ClippedSoftplus { cap: f64 },
}

/// Overflow-safe `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Overflow-safe logistic function.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Conditioner {
    /// Clipped softplus with validated cap.
    pub fn clipped_softplus(cap: f64) -> Result<Self> {
        if !cap.is_finite() || cap <= 0.0 {
            return Err(ReparamError::InvalidCap { cap });
        }
        Ok(Conditioner::ClippedSoftplus { cap })
    }

    /// Short name used in error messages and reports.
    pub fn name(&self) -> &'static str {
        match self {
            Conditioner::Identity => "identity",
            Conditioner::Softplus => "softplus",
            Conditioner::Exp => "exp",
            Conditioner::ClippedSoftplus { .. } => "clipped-softplus",
        }
    }

    /// `(phi(x), phi'(x))` in one evaluation.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match self {
            Conditioner::Identity => (x, 1.0),
            Conditioner::Softplus => (softplus(x), sigmoid(x)),
            Conditioner::Exp => {
                let e = x.exp();
                (e, e)
            }
            Conditioner::ClippedSoftplus { cap } => {
                let t = (softplus(x) / cap).tanh();
                (cap * t, (1.0 - t * t) * sigmoid(x))
            }
        }
    }

    /// `phi(x)` alone.
    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    /// `phi'(x)` alone.
    pub fn derivative(&self, x: f64) -> f64 {
        self.eval(x).1
    }

    /// Whether the conditioner satisfies `|phi'| <= 1` everywhere, which the
    /// variance upper bounds require.
    pub fn is_one_lipschitz(&self) -> bool {
        !matches!(self, Conditioner::Exp)
    }

    /// Inverse `phi^-1(y)`, erroring when `y` is outside the range.
    ///
    /// Identity and exp use closed forms; softplus and clipped-softplus use
    /// bisection on the strictly increasing `phi` to an interval width of
    /// `1e-14` (relative), which round-trips through [`Self::value`] to
    /// better than `1e-12`. The closed form `ln(e^y - 1)` is avoided because
    /// it overflows for large `y`.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        let fail = || ReparamError::UnrepresentableScale {
            conditioner: self.name(),
            value: y,
        };
        if !y.is_finite() {
            return Err(fail());
        }
        match self {
            Conditioner::Identity => Ok(y),
            Conditioner::Exp => {
                if y > 0.0 {
                    Ok(y.ln())
                } else {
                    Err(fail())
                }
            }
            Conditioner::Softplus => {
                if y > 0.0 {
                    Ok(self.bisect_inverse(y))
                } else {
                    Err(fail())
                }
            }
            Conditioner::ClippedSoftplus { cap } => {
                if y > 0.0 && y < *cap {
                    Ok(self.bisect_inverse(y))
                } else {
                    Err(fail())
                }
            }
        }
    }

    /// Bisection for strictly increasing conditioners; `y` must be interior
    /// to the range (checked by the caller).
    fn bisect_inverse(&self, y: f64) -> f64 {
        let mut lo = -1.0_f64;
        let mut hi = 1.0_f64;
        while self.value(lo) >= y {
            lo *= 2.0;
        }
        while self.value(hi) < y {
            hi *= 2.0;
        }
        for _ in 0..BISECT_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            if self.value(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= BISECT_TOL * lo.abs().max(hi.abs()).max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Covariance parameterization of the variational family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    MeanField,
    Cholesky,
    SquareRoot,
}

impl Family {
    /// Flat parameter count `p` for dimension `d`.
    pub fn param_count(&self, d: usize) -> usize {
        match self {
            Family::MeanField => 2 * d,
            Family::Cholesky => d + d * (d + 1) / 2,
            Family::SquareRoot => d + d * d,
        }
    }

    /// Canonical hyphenated name.
    pub fn name(&self) -> &'static str {
        match self {
            Family::MeanField => "mean-field",
            Family::Cholesky => "cholesky",
            Family::SquareRoot => "square-root",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of strict-lower-triangular entries for dimension `d`.
pub fn strict_lower_len(d: usize) -> usize {
    d * (d - 1) / 2
}

/// Index of strict-lower entry `(i, j)`, `j < i`, in row-major packed order
/// `(1,0), (2,0), (2,1), (3,0), ...`.
#[inline]
fn strict_lower_index(i: usize, j: usize) -> usize {
    debug_assert!(j < i);
    i * (i - 1) / 2 + j
}

/// The scale matrix `C` produced by a parameterization, in its natural
/// structured representation.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleMatrix {
    /// Mean-field: the diagonal entries.
    Diagonal(Vec<f64>),
    /// Cholesky: lower triangular factor.
    Triangular(LowerTriangular),
    /// Square-root: dense matrix.
    Dense(DenseMatrix),
}

impl ScaleMatrix {
    pub fn dim(&self) -> usize {
        match self {
            ScaleMatrix::Diagonal(d) => d.len(),
            ScaleMatrix::Triangular(t) => t.dim(),
            ScaleMatrix::Dense(m) => m.rows(),
        }
    }

    /// Entry `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            ScaleMatrix::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            ScaleMatrix::Triangular(t) => t.get(i, j),
            ScaleMatrix::Dense(m) => m.get(i, j),
        }
    }

    /// `C u`.
    pub fn matvec(&self, u: &[f64]) -> std::result::Result<Vec<f64>, LinalgError> {
        match self {
            ScaleMatrix::Diagonal(d) => {
                if u.len() != d.len() {
                    return Err(LinalgError::DimensionMismatch {
                        context: "diagonal matvec operand length",
                        got: u.len().to_string(),
                        expected: d.len().to_string(),
                    });
                }
                Ok(d.iter().zip(u).map(|(c, x)| c * x).collect())
            }
            ScaleMatrix::Triangular(t) => t.matvec(u),
            ScaleMatrix::Dense(m) => m.matvec(u),
        }
    }

    /// `||C||_F^2`.
    pub fn frobenius_norm_sq(&self) -> f64 {
        match self {
            ScaleMatrix::Diagonal(d) => d.iter().map(|c| c * c).sum(),
            ScaleMatrix::Triangular(t) => t.frobenius_norm_sq(),
            ScaleMatrix::Dense(m) => m.frobenius_norm_sq(),
        }
    }

    /// `ln |det C|`; errors when the scale is numerically singular.
    pub fn logabsdet(&self) -> std::result::Result<f64, LinalgError> {
        match self {
            ScaleMatrix::Diagonal(d) => {
                let mut acc = 0.0;
                for (i, c) in d.iter().enumerate() {
                    if c.abs() < SINGULAR_SCALE {
                        return Err(LinalgError::NumericallySingular {
                            index: i,
                            pivot: c.abs(),
                        });
                    }
                    acc += c.abs().ln();
                }
                Ok(acc)
            }
            ScaleMatrix::Triangular(t) => t.logabsdet(),
            ScaleMatrix::Dense(m) => m.logabsdet(),
        }
    }

    /// Dense copy (upper triangle explicitly zero for structured scales).
    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            ScaleMatrix::Diagonal(d) => {
                let mut m = DenseMatrix::zeros(d.len(), d.len());
                for (i, c) in d.iter().enumerate() {
                    m.set(i, i, *c);
                }
                m
            }
            ScaleMatrix::Triangular(t) => t.to_dense(),
            ScaleMatrix::Dense(m) => m.clone(),
        }
    }
}

/// Gradient (or parameter update) in the canonical flat order of its family.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient {
    values: Vec<f64>,
}

impl FlatGradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Squared Euclidean norm.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `self += alpha * other`; lengths must match.
    pub fn axpy(&mut self, alpha: f64, other: &FlatGradient) {
        assert_eq!(self.len(), other.len(), "flat gradient length mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    /// `self *= alpha`.
    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.values {
            *a *= alpha;
        }
    }
}

/// Parameters of one location-scale variational distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum VariationalParams {
    /// `C = diag(phi(s))`.
    MeanField {
        m: Vec<f64>,
        s: Vec<f64>,
        conditioner: Conditioner,
    },
    /// `C_ii = phi(s_i)`, strict-lower entries raw in `l` (row-major packed).
    Cholesky {
        m: Vec<f64>,
        s: Vec<f64>,
        l: Vec<f64>,
        conditioner: Conditioner,
    },
    /// Dense `C`, no conditioner.
    SquareRoot { m: Vec<f64>, c_full: DenseMatrix },
}

fn check_finite(slice: &[f64], context: &'static str) -> Result<()> {
    if slice.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ReparamError::NonFinite { context })
    }
}

fn check_cap(conditioner: &Conditioner) -> Result<()> {
    if let Conditioner::ClippedSoftplus { cap } = conditioner {
        if !cap.is_finite() || *cap <= 0.0 {
            return Err(ReparamError::InvalidCap { cap: *cap });
        }
    }
    Ok(())
}

impl VariationalParams {
    /// Mean-field parameters; `m` and `s` must share a length.
    pub fn mean_field(m: Vec<f64>, s: Vec<f64>, conditioner: Conditioner) -> Result<Self> {
        if s.len() != m.len() {
            return Err(ReparamError::ShapeMismatch {
                context: "mean-field s length",
                got: s.len(),
                expected: m.len(),
            });
        }
        check_finite(&m, "mean-field m")?;
        check_finite(&s, "mean-field s")?;
        check_cap(&conditioner)?;
        Ok(VariationalParams::MeanField { m, s, conditioner })
    }

    /// Cholesky parameters; `l` holds the `d(d-1)/2` strict-lower entries in
    /// row-major order.
    pub fn cholesky(
        m: Vec<f64>,
        s: Vec<f64>,
        l: Vec<f64>,
        conditioner: Conditioner,
    ) -> Result<Self> {
        let d = m.len();
        if s.len() != d {
            return Err(ReparamError::ShapeMismatch {
                context: "cholesky s length",
                got: s.len(),
                expected: d,
            });
        }
        if l.len() != strict_lower_len(d) {
            return Err(ReparamError::ShapeMismatch {
                context: "cholesky strict-lower length",
                got: l.len(),
                expected: strict_lower_len(d),
            });
        }
        check_finite(&m, "cholesky m")?;
        check_finite(&s, "cholesky s")?;
        check_finite(&l, "cholesky l")?;
        check_cap(&conditioner)?;
        Ok(VariationalParams::Cholesky {
            m,
            s,
            l,
            conditioner,
        })
    }

    /// Square-root parameters with a dense `d x d` scale.
    pub fn square_root(m: Vec<f64>, c_full: DenseMatrix) -> Result<Self> {
        let d = m.len();
        if !c_full.is_square() || c_full.rows() != d {
            return Err(ReparamError::ShapeMismatch {
                context: "square-root scale rows",
                got: c_full.rows(),
                expected: d,
            });
        }
        check_finite(&m, "square-root m")?;
        if !c_full.all_finite() {
            return Err(ReparamError::NonFinite {
                context: "square-root scale",
            });
        }
        Ok(VariationalParams::SquareRoot { m, c_full })
    }

    /// Latent dimension `d`.
    pub fn dim(&self) -> usize {
        match self {
            VariationalParams::MeanField { m, .. } => m.len(),
            VariationalParams::Cholesky { m, .. } => m.len(),
            VariationalParams::SquareRoot { m, .. } => m.len(),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            VariationalParams::MeanField { .. } => Family::MeanField,
            VariationalParams::Cholesky { .. } => Family::Cholesky,
            VariationalParams::SquareRoot { .. } => Family::SquareRoot,
        }
    }

    /// The conditioner, when the family has one.
    pub fn conditioner(&self) -> Option<&Conditioner> {
        match self {
            VariationalParams::MeanField { conditioner, .. } => Some(conditioner),
            VariationalParams::Cholesky { conditioner, .. } => Some(conditioner),
            VariationalParams::SquareRoot { .. } => None,
        }
    }

    /// Location vector.
    pub fn location(&self) -> &[f64] {
        match self {
            VariationalParams::MeanField { m, .. } => m,
            VariationalParams::Cholesky { m, .. } => m,
            VariationalParams::SquareRoot { m, .. } => m,
        }
    }

    /// Flat parameter count `p`.
    pub fn param_count(&self) -> usize {
        self.family().param_count(self.dim())
    }

    /// Materializes the scale matrix `C`.
    pub fn build_scale(&self) -> ScaleMatrix {
        match self {
            VariationalParams::MeanField { s, conditioner, .. } => {
                ScaleMatrix::Diagonal(s.iter().map(|&x| conditioner.value(x)).collect())
            }
            VariationalParams::Cholesky {
                s, l, conditioner, ..
            } => {
                let d = s.len();
                let mut t = LowerTriangular::zeros(d);
                for i in 0..d {
                    t.set(i, i, conditioner.value(s[i]));
                    for j in 0..i {
                        t.set(i, j, l[strict_lower_index(i, j)]);
                    }
                }
                ScaleMatrix::Triangular(t)
            }
            VariationalParams::SquareRoot { c_full, .. } => ScaleMatrix::Dense(c_full.clone()),
        }
    }

    /// Serializes into the canonical flat order.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            VariationalParams::MeanField { m, s, .. } => {
                let mut flat = Vec::with_capacity(2 * m.len());
                flat.extend_from_slice(m);
                flat.extend_from_slice(s);
                flat
            }
            VariationalParams::Cholesky { m, s, l, .. } => {
                let mut flat = Vec::with_capacity(m.len() + s.len() + l.len());
                flat.extend_from_slice(m);
                flat.extend_from_slice(s);
                flat.extend_from_slice(l);
                flat
            }
            VariationalParams::SquareRoot { m, c_full } => {
                let mut flat = Vec::with_capacity(m.len() + c_full.data().len());
                flat.extend_from_slice(m);
                flat.extend_from_slice(c_full.data());
                flat
            }
        }
    }

    /// Rebuilds parameters from the canonical flat order.
    ///
    /// `conditioner` is ignored for the square-root family.
    pub fn from_flat(
        family: Family,
        d: usize,
        conditioner: Conditioner,
        flat: &[f64],
    ) -> Result<Self> {
        let expected = family.param_count(d);
        if flat.len() != expected {
            return Err(ReparamError::ShapeMismatch {
                context: "flat parameter length",
                got: flat.len(),
                expected,
            });
        }
        match family {
            Family::MeanField => VariationalParams::mean_field(
                flat[..d].to_vec(),
                flat[d..2 * d].to_vec(),
                conditioner,
            ),
            Family::Cholesky => VariationalParams::cholesky(
                flat[..d].to_vec(),
                flat[d..2 * d].to_vec(),
                flat[2 * d..].to_vec(),
                conditioner,
            ),
            Family::SquareRoot => {
                let c = DenseMatrix::new(d, d, flat[d..].to_vec()).expect("length checked");
                VariationalParams::square_root(flat[..d].to_vec(), c)
            }
        }
    }
}

/// Reparameterized sample `t_lambda(u) = C u + m`.
pub fn transform(params: &VariationalParams, u: &[f64]) -> Result<Vec<f64>> {
    let d = params.dim();
    if u.len() != d {
        return Err(ReparamError::ShapeMismatch {
            context: "transform draw length",
            got: u.len(),
            expected: d,
        });
    }
    match params {
        VariationalParams::MeanField { m, s, conditioner } => Ok(m
            .iter()
            .zip(s)
            .zip(u)
            .map(|((mi, si), ui)| mi + conditioner.value(*si) * ui)
            .collect()),
        VariationalParams::Cholesky {
            m, s, l, conditioner, ..
        } => {
            let mut out = Vec::with_capacity(d);
            for i in 0..d {
                let mut acc = m[i] + conditioner.value(s[i]) * u[i];
                for j in 0..i {
                    acc += l[strict_lower_index(i, j)] * u[j];
                }
                out.push(acc);
            }
            Ok(out)
        }
        VariationalParams::SquareRoot { m, c_full } => {
            let mut out = c_full.matvec(u)?;
            for (o, mi) in out.iter_mut().zip(m) {
                *o += mi;
            }
            Ok(out)
        }
    }
}

/// Pulls a gradient `g_f = grad f(t_lambda(u))` back to flat parameter space.
///
/// Blocks: `m` gets `g_f`; mean-field/cholesky `s_i` gets
/// `g_f[i] u_i phi'(s_i)`; cholesky `L_(i,j)` gets `g_f[i] u_j`; square-root
/// `C_(i,j)` gets `g_f[i] u_j` for all `(i, j)`.
pub fn pullback(params: &VariationalParams, u: &[f64], g_f: &[f64]) -> Result<FlatGradient> {
    let d = params.dim();
    if u.len() != d {
        return Err(ReparamError::ShapeMismatch {
            context: "pullback draw length",
            got: u.len(),
            expected: d,
        });
    }
    if g_f.len() != d {
        return Err(ReparamError::ShapeMismatch {
            context: "pullback gradient length",
            got: g_f.len(),
            expected: d,
        });
    }
    let mut flat = Vec::with_capacity(params.param_count());
    flat.extend_from_slice(g_f);
    match params {
        VariationalParams::MeanField { s, conditioner, .. } => {
            for i in 0..d {
                flat.push(g_f[i] * u[i] * conditioner.derivative(s[i]));
            }
        }
        VariationalParams::Cholesky { s, conditioner, .. } => {
            for i in 0..d {
                flat.push(g_f[i] * u[i] * conditioner.derivative(s[i]));
            }
            for i in 0..d {
                for j in 0..i {
                    flat.push(g_f[i] * u[j]);
                }
            }
        }
        VariationalParams::SquareRoot { .. } => {
            for gi in g_f.iter() {
                for uj in u.iter() {
                    flat.push(gi * uj);
                }
            }
        }
    }
    Ok(FlatGradient::from_values(flat))
}

/// Squared norm of [`pullback`] from the closed-form identity, without
/// materializing the flat gradient.
///
/// With `U = diag(u_i^2)`, `Phi = diag(phi'(s_i)^2)`, and
/// `Sigma_ii = sum_{j <= i} u_j^2`:
///
/// - mean-field: `||g_f||^2 + g_f' U Phi g_f`;
/// - cholesky: `||g_f||^2 + g_f' Sigma g_f + g_f' U (Phi - I) g_f`;
/// - square-root: `||g_f||^2 (1 + ||u||^2)`.
pub fn pullback_sqnorm_identity(
    params: &VariationalParams,
    u: &[f64],
    g_f: &[f64],
) -> Result<f64> {
    let d = params.dim();
    if u.len() != d || g_f.len() != d {
        return Err(ReparamError::ShapeMismatch {
            context: "pullback identity operand length",
            got: u.len().min(g_f.len()),
            expected: d,
        });
    }
    let g_sq: f64 = g_f.iter().map(|g| g * g).sum();
    match params {
        VariationalParams::MeanField { s, conditioner, .. } => {
            let mut acc = g_sq;
            for i in 0..d {
                let dphi = conditioner.derivative(s[i]);
                acc += g_f[i] * g_f[i] * u[i] * u[i] * dphi * dphi;
            }
            Ok(acc)
        }
        VariationalParams::Cholesky { s, conditioner, .. } => {
            let mut acc = g_sq;
            let mut prefix = 0.0; // sum_{j <= i} u_j^2, updated per row
            for i in 0..d {
                prefix += u[i] * u[i];
                let dphi = conditioner.derivative(s[i]);
                acc += g_f[i] * g_f[i] * (prefix + u[i] * u[i] * (dphi * dphi - 1.0));
            }
            Ok(acc)
        }
        VariationalParams::SquareRoot { .. } => {
            let u_sq: f64 = u.iter().map(|x| x * x).sum();
            Ok(g_sq * (1.0 + u_sq))
        }
    }
}

/// Differential entropy `H(q_lambda) = d H_phi + ln |det C|` of the
/// location-scale distribution with base `dist`.
pub fn entropy(params: &VariationalParams, dist: &BaseDistribution) -> Result<f64> {
    let d = params.dim() as f64;
    let logdet = params.build_scale().logabsdet()?;
    Ok(d * dist.entropy_per_dim() + logdet)
}

/// Gradient of the entropy in flat order.
///
/// The base-distribution term is constant in `lambda`, so only
/// `ln |det C|` contributes: `m` block zero; mean-field/cholesky `s_i` gets
/// `phi'(s_i) / phi(s_i)` with zero `L` block; square-root gets the entries
/// of `C^-T`.
pub fn entropy_gradient(params: &VariationalParams) -> Result<FlatGradient> {
    let d = params.dim();
    let mut flat = vec![0.0; params.param_count()];
    match params {
        VariationalParams::MeanField { s, conditioner, .. }
        | VariationalParams::Cholesky { s, conditioner, .. } => {
            for i in 0..d {
                let (phi, dphi) = conditioner.eval(s[i]);
                if phi.abs() < SINGULAR_SCALE {
                    return Err(ReparamError::Linalg(LinalgError::NumericallySingular {
                        index: i,
                        pivot: phi.abs(),
                    }));
                }
                flat[d + i] = dphi / phi;
            }
        }
        VariationalParams::SquareRoot { c_full, .. } => {
            let inv_t = c_full.invert()?.transpose();
            flat[d..].copy_from_slice(inv_t.data());
        }
    }
    Ok(FlatGradient::from_values(flat))
}

/// The three parameterizations matched to one `(m, C)` pair.
#[derive(Debug, Clone)]
pub struct MatchedParams {
    /// Mean-field match using `diag(C)` only.
    pub mean_field: VariationalParams,
    /// Cholesky match reproducing `C` exactly (up to conditioner-inverse
    /// round-trip error below `1e-12`).
    pub cholesky: VariationalParams,
    /// Square-root match embedding `C` as a dense matrix.
    pub square_root: VariationalParams,
}

/// Builds mean-field, cholesky, and square-root parameters that share the
/// location `m` and (for the latter two) the full scale matrix `c`; the
/// mean-field member keeps only `diag(c)`.
///
/// Fails with an "unrepresentable scale" error when a diagonal entry lies
/// outside the conditioner's range (for example at or above a clipped cap).
pub fn match_parameterizations(
    m: &[f64],
    c: &LowerTriangular,
    conditioner: Conditioner,
) -> Result<MatchedParams> {
    let d = m.len();
    if c.dim() != d {
        return Err(ReparamError::ShapeMismatch {
            context: "matched scale dimension",
            got: c.dim(),
            expected: d,
        });
    }
    let mut s = Vec::with_capacity(d);
    for i in 0..d {
        s.push(conditioner.inverse(c.get(i, i))?);
    }
    let mut l = Vec::with_capacity(strict_lower_len(d));
    for i in 0..d {
        for j in 0..i {
            l.push(c.get(i, j));
        }
    }
    Ok(MatchedParams {
        mean_field: VariationalParams::mean_field(m.to_vec(), s.clone(), conditioner)?,
        cholesky: VariationalParams::cholesky(m.to_vec(), s, l, conditioner)?,
        square_root: VariationalParams::square_root(m.to_vec(), c.to_dense())?,
    })
}
