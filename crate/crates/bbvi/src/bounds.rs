//! Analytic variance bounds in ABC form, and the matching lower bound.
//!
//! Every upper bound here controls the uncentered second moment
//! `E ||g_M(lambda)||^2` of the `M`-sample estimator by
//!
//! ```text
//! 2 A (F(lambda) - F*)  +  B ||grad F(lambda)||^2  +  C
//! ```
//!
//! with `B = 1`. The three constructors differ in which curvature
//! constants and which regularizer they assume: the entropy form, the
//! prior-KL form, and the bounded-entropy form (clipped-softplus
//! conditioner, whose scale cap makes the regularizer minimum `h*`
//! finite). The dimension constant `C(d, kappa)` is the only place the
//! family enters.
//!
//! The lower bound applies to the square-root family and produces a
//! coefficient on the same gap quantity; it is valid only while the
//! condition number stays below `sqrt(d + 1)`.

use crate::reparam::{Conditioner, Family};
use crate::targets::{ConstantsRecord, ElboForm};
use thiserror::Error;

/// Largest negative objective gap accepted (and clamped to zero) before
/// the bookkeeping is considered broken.
const GAP_SLACK: f64 = 1e-9;

/// Errors from bound construction and evaluation.
#[derive(Debug, Error)]
pub enum BoundsError {
    /// The dimension constant requires a 1-Lipschitz conditioner.
    #[error("bound not applicable: conditioner not 1-Lipschitz")]
    ConditionerNotOneLipschitz,
    /// The lower bound's validity condition failed.
    #[error("lower bound not applicable: {reason}")]
    LowerBoundNotApplicable { reason: String },
    /// The bounded-entropy form needs the finite regularizer minimum that
    /// only a clipped conditioner provides.
    #[error("bounded-entropy form requires a clipped-softplus conditioner and its h*")]
    MissingRegularizerMinimum,
    /// A scalar input is outside its domain.
    #[error("invalid bound input: {what}")]
    InvalidInput { what: String },
}

type Result<T> = std::result::Result<T, BoundsError>;

/// An assembled upper bound `2 A gap + B grad_sqnorm + C` with `B = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbcBound {
    /// Coefficient on twice the objective gap.
    pub a: f64,
    /// Coefficient on the squared gradient norm (always `1`).
    pub b: f64,
    /// Additive constant.
    pub c: f64,
    /// Human-readable description of the form and inputs that produced
    /// the constants.
    pub provenance: String,
}

/// The lower-bound coefficient and the exact second-moment baseline at
/// the optimum it multiplies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBoundSpec {
    /// Coefficient on `gap + baseline`.
    pub coefficient: f64,
    /// Exact value of `E f(t_lambda*(u)) - f*` at the optimum.
    pub baseline: f64,
    /// True exactly when the coefficient is strictly positive.
    pub validity: bool,
}

fn check_dims(d: usize, kappa: f64, m_samples: usize) -> Result<()> {
    if d < 1 {
        return Err(BoundsError::InvalidInput {
            what: "dimension must be at least 1".into(),
        });
    }
    if !(kappa >= 1.0) {
        return Err(BoundsError::InvalidInput {
            what: format!("kurtosis must be finite and at least 1 (got {kappa})"),
        });
    }
    if m_samples < 1 {
        return Err(BoundsError::InvalidInput {
            what: "M must be at least 1".into(),
        });
    }
    Ok(())
}

/// Dimension constant `C(d, kappa)` of the variance bounds:
/// `2 kappa sqrt(d) + 1` for the mean-field family, `d + kappa` for the
/// cholesky and square-root families. Conditioners must be 1-Lipschitz;
/// the exponential conditioner is refused.
pub fn c_dim(
    d: usize,
    kappa: f64,
    family: Family,
    conditioner: Option<&Conditioner>,
) -> Result<f64> {
    check_dims(d, kappa, 1)?;
    if let Some(cond) = conditioner {
        if !cond.is_one_lipschitz() {
            return Err(BoundsError::ConditionerNotOneLipschitz);
        }
    }
    Ok(match family {
        Family::MeanField => 2.0 * kappa * (d as f64).sqrt() + 1.0,
        Family::Cholesky | Family::SquareRoot => d as f64 + kappa,
    })
}

fn check_curvature(name: &str, value: f64) -> Result<f64> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(BoundsError::InvalidInput {
            what: format!("{name} must be positive and finite (got {value})"),
        });
    }
    Ok(value)
}

/// Entropy-form upper bound: the estimator regularized by the negated
/// entropy gradient, curvature taken from the entropy objective.
///
/// `A = 2 L_H^2 C(d,kappa) / (mu_KL M)`; the constant pays for the
/// stationary-point mismatch between the two objective forms and for the
/// optimum-to-minimum gap of the KL objective.
pub fn abc_entropy_form(
    c: &ConstantsRecord,
    d: usize,
    kappa: f64,
    m_samples: usize,
    family: Family,
    conditioner: Option<&Conditioner>,
) -> Result<AbcBound> {
    check_dims(d, kappa, m_samples)?;
    let cdk = c_dim(d, kappa, family, conditioner)?;
    let l_h = check_curvature("L_H", c.l_h)?;
    let mu_kl = check_curvature("mu_KL", c.mu_kl)?;
    let m = m_samples as f64;
    let a = 2.0 * l_h * l_h * cdk / (mu_kl * m);
    let cc = (2.0 * l_h * l_h / m) * cdk * c.statdist_sq()
        + 2.0 * a * (c.f_star - c.f_star_kl);
    Ok(AbcBound {
        a,
        b: 1.0,
        c: cc,
        provenance: format!(
            "entropy form, {} family: C(d,kappa)={cdk}, L_H={l_h}, mu_KL={mu_kl}, M={m_samples}",
            family.name()
        ),
    })
}

/// KL-form upper bound: the estimator regularized by the exact prior-KL
/// gradient. `A = L_KL^2 C(d,kappa) / (mu_KL M)`.
pub fn abc_kl_form(
    c: &ConstantsRecord,
    d: usize,
    kappa: f64,
    m_samples: usize,
    family: Family,
    conditioner: Option<&Conditioner>,
) -> Result<AbcBound> {
    check_dims(d, kappa, m_samples)?;
    let cdk = c_dim(d, kappa, family, conditioner)?;
    let l_kl = check_curvature("L_KL", c.l_kl)?;
    let mu_kl = check_curvature("mu_KL", c.mu_kl)?;
    let m = m_samples as f64;
    let a = l_kl * l_kl * cdk / (mu_kl * m);
    let cc = 2.0 * a * (c.f_star - c.f_star_kl);
    Ok(AbcBound {
        a,
        b: 1.0,
        c: cc,
        provenance: format!(
            "kl form, {} family: C(d,kappa)={cdk}, L_KL={l_kl}, mu_KL={mu_kl}, M={m_samples}",
            family.name()
        ),
    })
}

/// Bounded-entropy upper bound, available only under a clipped-softplus
/// conditioner: the scale cap makes the negated entropy bounded below by
/// `h*`, so the entropy objective's own strong convexity can be used.
/// `A = L_H^2 C(d,kappa) / (mu_H M)`.
pub fn abc_bounded_entropy(
    c: &ConstantsRecord,
    d: usize,
    kappa: f64,
    m_samples: usize,
    family: Family,
    conditioner: Option<&Conditioner>,
    h_star: Option<f64>,
) -> Result<AbcBound> {
    check_dims(d, kappa, m_samples)?;
    let (h_star, cap) = match (h_star, conditioner) {
        (Some(h), Some(Conditioner::ClippedSoftplus { cap })) => (h, *cap),
        _ => return Err(BoundsError::MissingRegularizerMinimum),
    };
    let cdk = c_dim(d, kappa, family, conditioner)?;
    let l_h = check_curvature("L_H", c.l_h)?;
    let mu_h = check_curvature("mu_H", c.mu_h)?;
    let m = m_samples as f64;
    let a = l_h * l_h * cdk / (mu_h * m);
    let cc = 2.0 * a * (c.f_star - c.f_star_h - h_star);
    Ok(AbcBound {
        a,
        b: 1.0,
        c: cc,
        provenance: format!(
            "bounded-entropy form, {} family, cap {cap}: C(d,kappa)={cdk}, L_H={l_h}, \
             mu_H={mu_h}, h*={h_star}, M={m_samples}",
            family.name()
        ),
    })
}

/// Evaluates an upper bound at an objective gap and squared gradient
/// norm: `2 A gap + B grad_sqnorm + C`. Gaps down to `-1e-9` are treated
/// as exact zeros; anything lower indicates broken optimum bookkeeping
/// and is refused.
pub fn evaluate_abc(bound: &AbcBound, gap: f64, grad_sqnorm: f64) -> Result<f64> {
    if !gap.is_finite() || gap < -GAP_SLACK {
        return Err(BoundsError::InvalidInput {
            what: format!("objective gap must be at least -1e-9 (got {gap})"),
        });
    }
    if !grad_sqnorm.is_finite() || grad_sqnorm < 0.0 {
        return Err(BoundsError::InvalidInput {
            what: format!("squared gradient norm must be nonnegative (got {grad_sqnorm})"),
        });
    }
    let gap = gap.max(0.0);
    Ok(2.0 * bound.a * gap + bound.b * grad_sqnorm + bound.c)
}

/// Lower-bound construction for the square-root family.
///
/// The coefficient is `(2 mu^2 (d+1) - 2 L^2) / (M L)` with `(L, mu)` the
/// chosen form's curvature pair; it is positive exactly when
/// `L / mu < sqrt(d + 1)` (the boundary yields a coefficient of zero and
/// stays valid as a statement). `baseline` must be the exact
/// `E f(t_lambda*(u)) - f*` at the optimum.
pub fn lower_bound_spec(
    c: &ConstantsRecord,
    form: ElboForm,
    m_samples: usize,
    family: Family,
    baseline: f64,
) -> Result<LowerBoundSpec> {
    check_dims(c.dim, 1.0, m_samples)?;
    if family != Family::SquareRoot {
        return Err(BoundsError::LowerBoundNotApplicable {
            reason: format!("requires the square-root family (got {})", family.name()),
        });
    }
    if !baseline.is_finite() || baseline < 0.0 {
        return Err(BoundsError::InvalidInput {
            what: format!("baseline must be nonnegative (got {baseline})"),
        });
    }
    let (l, mu) = c.curvature(form);
    let l = check_curvature("L", l)?;
    let mu = check_curvature("mu", mu)?;
    let d = c.dim as f64;
    let threshold = (d + 1.0).sqrt();
    if l / mu > threshold {
        return Err(BoundsError::LowerBoundNotApplicable {
            reason: format!(
                "condition number {} exceeds sqrt(d+1) = {threshold}",
                l / mu
            ),
        });
    }
    let coefficient = ((2.0 * mu * mu * (d + 1.0) - 2.0 * l * l) / (m_samples as f64 * l)).max(0.0);
    Ok(LowerBoundSpec {
        coefficient,
        baseline,
        validity: coefficient > 0.0,
    })
}

/// Evaluates the lower bound: `coefficient * (gap + baseline) + grad_sqnorm`.
pub fn lower_bound_rhs(spec: &LowerBoundSpec, gap: f64, grad_sqnorm: f64) -> Result<f64> {
    if !gap.is_finite() || gap < -GAP_SLACK {
        return Err(BoundsError::InvalidInput {
            what: format!("objective gap must be at least -1e-9 (got {gap})"),
        });
    }
    if !grad_sqnorm.is_finite() || grad_sqnorm < 0.0 {
        return Err(BoundsError::InvalidInput {
            what: format!("squared gradient norm must be nonnegative (got {grad_sqnorm})"),
        });
    }
    Ok(spec.coefficient * (gap.max(0.0) + spec.baseline) + grad_sqnorm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basedist::{BaseDistribution, RngStream};
    use crate::estimator::empirical_sqnorm;
    use crate::linalg::DenseMatrix;
    use crate::reparam::{strict_lower_len, VariationalParams};
    use crate::targets::{
        exact_elbo, expected_f, quadratic_target, quadratic_target_flat, target_constants,
    };

    fn record(d: usize, l_h: f64, mu_h: f64, l_kl: f64, mu_kl: f64) -> ConstantsRecord {
        ConstantsRecord {
            dim: d,
            n_data: 0,
            l_h,
            mu_h,
            l_kl,
            mu_kl,
            zbar_h: vec![0.0; d],
            zbar_kl: vec![0.0; d],
            f_star_h: 0.0,
            f_star_kl: 0.0,
            f_star: 0.0,
            h_star: None,
        }
    }

    #[test]
    fn dimension_constant_values() {
        let g = 3.0;
        assert_eq!(c_dim(4, g, Family::MeanField, None).unwrap(), 13.0);
        assert_eq!(c_dim(9, g, Family::Cholesky, None).unwrap(), 12.0);
        assert_eq!(c_dim(1, 1.0, Family::MeanField, None).unwrap(), 3.0);
        assert_eq!(c_dim(1, 1.0, Family::SquareRoot, None).unwrap(), 2.0);
    }

    #[test]
    fn dimension_constant_rejects_exp_and_bad_inputs() {
        let err = c_dim(4, 3.0, Family::Cholesky, Some(&Conditioner::Exp)).unwrap_err();
        assert!(err
            .to_string()
            .contains("bound not applicable: conditioner not 1-Lipschitz"));
        assert!(c_dim(0, 3.0, Family::MeanField, None).is_err());
        assert!(c_dim(4, 0.5, Family::MeanField, None).is_err());
        assert!(c_dim(4, f64::NAN, Family::MeanField, None).is_err());
        // All 1-Lipschitz conditioners pass.
        for cond in [
            Conditioner::Identity,
            Conditioner::Softplus,
            Conditioner::clipped_softplus(2.0).unwrap(),
        ] {
            assert!(c_dim(4, 3.0, Family::Cholesky, Some(&cond)).is_ok());
        }
    }

    #[test]
    fn dimension_constant_is_monotone() {
        for family in [Family::MeanField, Family::Cholesky, Family::SquareRoot] {
            for d in 1..30 {
                let lo = c_dim(d, 3.0, family, None).unwrap();
                let hi = c_dim(d + 1, 3.0, family, None).unwrap();
                assert!(hi > lo);
                let sharp = c_dim(d, 6.0, family, None).unwrap();
                assert!(sharp > lo);
            }
        }
    }

    #[test]
    fn fertility_scale_constants_match_reported_magnitude() {
        // Real-data regression posterior with d = 9, L_H = 1.840e3,
        // mu_KL = 5.017e2, cholesky family, gaussian base, M = 10.
        let c = record(9, 1.840e3, 1.840e3, 1.840e3, 5.017e2);
        let ent = abc_entropy_form(&c, 9, 3.0, 10, Family::Cholesky, None).unwrap();
        assert_eq!(ent.a, 16195.814231612518);
        assert_eq!(ent.b, 1.0);
        // Within half a percent of the reported 1.620e4.
        assert!((ent.a - 1.620e4).abs() / 1.620e4 < 5e-3);
        let kl = abc_kl_form(&c, 9, 3.0, 10, Family::Cholesky, None).unwrap();
        assert_eq!(kl.a, ent.a / 2.0);
        assert_eq!(kl.a, 8097.907115806259);
        assert!(ent.provenance.contains("entropy form"));
        assert!(kl.provenance.contains("kl form"));
    }

    #[test]
    fn constants_are_nonnegative_with_unit_b() {
        let t = quadratic_target(100.0, 0.3, 8.0, vec![0.4, -0.2, 0.1], 3).unwrap();
        let dist = BaseDistribution::gaussian();
        let clipped = Conditioner::clipped_softplus(2.0).unwrap();
        let c = target_constants(&t, &dist, Some(&clipped)).unwrap();
        let kappa = dist.kurtosis();
        for family in [Family::MeanField, Family::Cholesky, Family::SquareRoot] {
            for bound in [
                abc_entropy_form(&c, 3, kappa, 10, family, None).unwrap(),
                abc_kl_form(&c, 3, kappa, 10, family, None).unwrap(),
                abc_bounded_entropy(&c, 3, kappa, 10, family, Some(&clipped), c.h_star).unwrap(),
            ] {
                assert!(bound.a >= 0.0, "{}", bound.provenance);
                assert_eq!(bound.b, 1.0);
                assert!(bound.c >= 0.0, "{}", bound.provenance);
            }
        }
    }

    #[test]
    fn zero_constant_cases() {
        // A flat quadratic with curvature exactly pi has optimum value 0,
        // minimum 0, and coinciding stationary points, so the entropy-form
        // constant vanishes identically.
        let d = 3;
        let t = quadratic_target_flat(
            std::f64::consts::PI,
            1.0,
            vec![0.7, -0.3, 0.2],
            d,
        )
        .unwrap();
        let dist = BaseDistribution::gaussian();
        let c = target_constants(&t, &dist, None).unwrap();
        assert_eq!(c.statdist_sq(), 0.0);
        assert!(c.f_star.abs() < 1e-12 && c.f_star_h.abs() < 1e-12);
        let b = abc_entropy_form(&c, d, 3.0, 5, Family::SquareRoot, None).unwrap();
        assert_eq!(b.c, 0.0);
        // Coinciding stationary points alone kill the mismatch term.
        let t2 = quadratic_target(100.0, 0.3, 8.0, vec![0.0; 4], 4).unwrap();
        let c2 = target_constants(&t2, &dist, None).unwrap();
        assert_eq!(c2.statdist_sq(), 0.0);
    }

    #[test]
    fn bounded_entropy_requires_clip_and_h_star() {
        let c = record(4, 10.0, 10.0, 10.0, 5.0);
        let clipped = Conditioner::clipped_softplus(2.0).unwrap();
        // Missing h*.
        assert!(matches!(
            abc_bounded_entropy(&c, 4, 3.0, 10, Family::Cholesky, Some(&clipped), None),
            Err(BoundsError::MissingRegularizerMinimum)
        ));
        // Wrong conditioner.
        assert!(matches!(
            abc_bounded_entropy(
                &c,
                4,
                3.0,
                10,
                Family::Cholesky,
                Some(&Conditioner::Softplus),
                Some(-1.0)
            ),
            Err(BoundsError::MissingRegularizerMinimum)
        ));
        assert!(abc_bounded_entropy(&c, 4, 3.0, 10, Family::Cholesky, Some(&clipped), Some(-1.0))
            .is_ok());
    }

    #[test]
    fn bounded_entropy_constant_grows_with_the_cap() {
        // A looser scale cap weakens the regularizer floor h*, so the
        // additive constant increases with the cap.
        let t = quadratic_target(100.0, 0.3, 8.0, vec![0.4, -0.2], 2).unwrap();
        let dist = BaseDistribution::gaussian();
        let mut last = f64::NEG_INFINITY;
        for cap in [0.5, 1.0, 2.0, 4.0] {
            let cond = Conditioner::clipped_softplus(cap).unwrap();
            let c = target_constants(&t, &dist, Some(&cond)).unwrap();
            let b = abc_bounded_entropy(&c, 2, 3.0, 10, Family::Cholesky, Some(&cond), c.h_star)
                .unwrap();
            assert!(b.c > last, "cap {cap}: {} <= {last}", b.c);
            last = b.c;
        }
    }

    #[test]
    fn frozen_regularizer_minimum() {
        let t = quadratic_target(100.0, 0.3, 8.0, vec![0.0; 20], 20).unwrap();
        let dist = BaseDistribution::gaussian();
        let cond = Conditioner::clipped_softplus(2.0).unwrap();
        let c = target_constants(&t, &dist, Some(&cond)).unwrap();
        let h = c.h_star.unwrap();
        assert!((h - -42.24171427529236).abs() < 1e-12);
    }

    #[test]
    fn evaluation_plugs_in_gap_and_gradient() {
        let b = AbcBound {
            a: 1.0,
            b: 1.0,
            c: 1.0,
            provenance: String::new(),
        };
        assert_eq!(evaluate_abc(&b, 2.0, 4.0).unwrap(), 9.0);
        // Zero gap leaves the gradient term and the constant.
        assert_eq!(evaluate_abc(&b, 0.0, 4.0).unwrap(), 5.0);
        // Tiny negative gaps clamp to zero.
        assert_eq!(evaluate_abc(&b, -1e-10, 0.0).unwrap(), 1.0);
        // Larger negative gaps are bookkeeping bugs.
        assert!(evaluate_abc(&b, -1e-8, 0.0).is_err());
        assert!(evaluate_abc(&b, 1.0, -1.0).is_err());
        assert!(evaluate_abc(&b, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn value_is_invariant_to_gap_constant_splits() {
        // Moving mass delta between the gap term and the additive constant
        // (C -> C - 2 A delta, gap -> gap + delta) leaves the evaluated
        // bound unchanged.
        let mut rng = RngStream::new(88, 0);
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
            let lhs = evaluate_abc(&base, gap, grad).unwrap();
            let rhs = evaluate_abc(&shifted, gap + delta, grad).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    fn random_point(
        family: Family,
        d: usize,
        conditioner: Conditioner,
        near: Option<(&[f64], f64)>,
        rng: &mut RngStream,
    ) -> VariationalParams {
        let (center, spread) = match near {
            Some((zbar, eps)) => (zbar.to_vec(), eps),
            None => (vec![0.0; d], 1.0),
        };
        let m: Vec<f64> = center
            .iter()
            .map(|z| z + spread * rng.next_gaussian())
            .collect();
        let raw = |rng: &mut RngStream| -> f64 { -1.5 + 1.4 * rng.next_uniform() };
        match family {
            Family::MeanField => {
                let s: Vec<f64> = (0..d).map(|_| raw(rng)).collect();
                VariationalParams::mean_field(m, s, conditioner).unwrap()
            }
            Family::Cholesky => {
                let s: Vec<f64> = (0..d).map(|_| raw(rng)).collect();
                let l: Vec<f64> = (0..strict_lower_len(d))
                    .map(|_| 0.1 * rng.next_gaussian())
                    .collect();
                VariationalParams::cholesky(m, s, l, conditioner).unwrap()
            }
            Family::SquareRoot => {
                let mut cm = DenseMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        let v = 0.05 * rng.next_gaussian() + if i == j { 0.2 } else { 0.0 };
                        cm.set(i, j, v);
                    }
                }
                VariationalParams::square_root(m, cm).unwrap()
            }
        }
    }

    #[test]
    fn upper_bounds_dominate_measured_variance() {
        // The benchmark quadratic: every theorem variant dominates the
        // measured second moment at random points near and far from the
        // optimum, for its applicable family/conditioner combinations.
        let d = 20;
        let zstar: Vec<f64> = (0..d).map(|i| 0.3 * ((i as f64) * 0.7).sin()).collect();
        let t = quadratic_target(100.0, 0.3, 8.0, zstar, d).unwrap();
        let dist = BaseDistribution::gaussian();
        let kappa = dist.kurtosis();
        let clipped = Conditioner::clipped_softplus(2.0).unwrap();
        let constants = target_constants(&t, &dist, Some(&clipped)).unwrap();
        let m_samples = 10;

        // (family, conditioner, form tag) with 0 = entropy, 1 = kl,
        // 2 = bounded entropy.
        let configs: Vec<(Family, Conditioner, u8)> = vec![
            (Family::MeanField, Conditioner::Softplus, 0),
            (Family::MeanField, Conditioner::Softplus, 1),
            (Family::Cholesky, Conditioner::Softplus, 0),
            (Family::Cholesky, Conditioner::Softplus, 1),
            (Family::SquareRoot, Conditioner::Identity, 0),
            (Family::SquareRoot, Conditioner::Identity, 1),
            (Family::Cholesky, clipped.clone(), 2),
        ];
        let mut rng = RngStream::new(616, 1);
        for (cfg_idx, (family, cond, tag)) in configs.iter().enumerate() {
            let cond_arg = match family {
                Family::SquareRoot => None,
                _ => Some(cond),
            };
            let (bound, form) = match tag {
                0 => (
                    abc_entropy_form(&constants, d, kappa, m_samples, *family, cond_arg).unwrap(),
                    ElboForm::Entropy,
                ),
                1 => (
                    abc_kl_form(&constants, d, kappa, m_samples, *family, cond_arg).unwrap(),
                    ElboForm::Kl,
                ),
                _ => (
                    abc_bounded_entropy(
                        &constants,
                        d,
                        kappa,
                        m_samples,
                        *family,
                        cond_arg,
                        constants.h_star,
                    )
                    .unwrap(),
                    ElboForm::Entropy,
                ),
            };
            for trial in 0..8 {
                let near = if trial % 2 == 0 {
                    Some((constants.zbar_h.as_slice(), 0.05))
                } else {
                    None
                };
                let p = random_point(*family, d, cond.clone(), near, &mut rng);
                let (f_val, grad_f) = exact_elbo(&t, &p, &dist).unwrap();
                let gap = f_val - constants.f_star;
                let rhs = evaluate_abc(&bound, gap, grad_f.norm_sq()).unwrap();
                let est = empirical_sqnorm(
                    &t,
                    form,
                    &p,
                    &dist,
                    m_samples,
                    200,
                    90_000 + (cfg_idx * 100 + trial) as u64,
                )
                .unwrap();
                assert!(
                    est.second_moment <= rhs + 3.0 * est.std_error,
                    "config {cfg_idx} trial {trial}: emp={} rhs={rhs}",
                    est.second_moment
                );
            }
        }
    }

    #[test]
    fn lower_bound_coefficient_and_validity() {
        // L = mu, d = 20, M = 10 gives coefficient 4 mu exactly.
        let c = record(20, 6.0, 6.0, 6.0, 6.0);
        let spec = lower_bound_spec(&c, ElboForm::Entropy, 10, Family::SquareRoot, 1.0).unwrap();
        assert_eq!(spec.coefficient, 24.0);
        assert!(spec.validity);
        // Boundary: L / mu = sqrt(d + 1) exactly (d = 3) gives zero.
        let c = record(3, 2.0, 2.0, 2.0, 1.0);
        let mut cb = c.clone();
        cb.mu_h = 1.0;
        let spec = lower_bound_spec(&cb, ElboForm::Entropy, 4, Family::SquareRoot, 0.5).unwrap();
        assert_eq!(spec.coefficient, 0.0);
        assert!(!spec.validity);
        assert_eq!(lower_bound_rhs(&spec, 3.0, 7.0).unwrap(), 7.0);
        // Beyond the boundary: refused.
        let mut cv = cb.clone();
        cv.l_h = 2.5;
        let err = lower_bound_spec(&cv, ElboForm::Entropy, 4, Family::SquareRoot, 0.5).unwrap_err();
        assert!(err.to_string().contains("lower bound not applicable"));
        // Wrong family: refused.
        let err =
            lower_bound_spec(&c, ElboForm::Entropy, 4, Family::Cholesky, 0.5).unwrap_err();
        assert!(err.to_string().contains("lower bound not applicable"));
    }

    #[test]
    fn lower_bound_holds_near_the_optimum() {
        // Flat quadratic, square-root family: measured second moment stays
        // above the lower bound at the optimum and at small perturbations.
        let d = 5;
        let a: f64 = 0.5;
        let t = quadratic_target_flat(0.5, 1.0, vec![0.2, -0.4, 0.1, 0.0, 0.3], d).unwrap();
        let dist = BaseDistribution::gaussian();
        let c = target_constants(&t, &dist, None).unwrap();
        let m_samples = 10;
        // Optimal parameters: m = z*, C = I / sqrt(2a).
        let mut cm = DenseMatrix::zeros(d, d);
        for i in 0..d {
            cm.set(i, i, 1.0 / (2.0 * a).sqrt());
        }
        let p_star = VariationalParams::square_root(c.zbar_h.clone(), cm.clone()).unwrap();
        let baseline =
            expected_f(&t, ElboForm::Entropy, &p_star).unwrap() - c.f_min(ElboForm::Entropy);
        assert!((baseline - d as f64 / 2.0).abs() < 1e-12);
        let spec =
            lower_bound_spec(&c, ElboForm::Entropy, m_samples, Family::SquareRoot, baseline)
                .unwrap();
        assert!(spec.validity);
        let mut rng = RngStream::new(5150, 2);
        for trial in 0..12 {
            let p = if trial == 0 {
                p_star.clone()
            } else {
                // Perturb within a small ball around the optimum.
                let m: Vec<f64> = c
                    .zbar_h
                    .iter()
                    .map(|z| z + 0.05 * rng.next_gaussian())
                    .collect();
                let mut cp = cm.clone();
                for i in 0..d {
                    for j in 0..d {
                        cp.set(i, j, cp.get(i, j) + 0.03 * rng.next_gaussian());
                    }
                }
                VariationalParams::square_root(m, cp).unwrap()
            };
            let (f_val, grad_f) = exact_elbo(&t, &p, &dist).unwrap();
            let gap = f_val - c.f_star;
            let rhs = lower_bound_rhs(&spec, gap, grad_f.norm_sq()).unwrap();
            let est =
                empirical_sqnorm(&t, ElboForm::Entropy, &p, &dist, m_samples, 600, 7_700 + trial)
                    .unwrap();
            assert!(
                est.second_moment >= rhs - 3.0 * est.std_error,
                "trial {trial}: emp={} rhs={rhs} se={}",
                est.second_moment,
                est.std_error
            );
        }
    }

    #[test]
    fn constants_always_use_the_base_kurtosis() {
        // Heavier-tailed bases inflate the dimension constant and thus A.
        let c = record(6, 10.0, 10.0, 10.0, 5.0);
        let gauss = BaseDistribution::gaussian();
        let t8 = BaseDistribution::student_t(8.0).unwrap();
        let a_gauss =
            abc_kl_form(&c, 6, gauss.kurtosis(), 10, Family::Cholesky, None).unwrap();
        let a_t8 = abc_kl_form(&c, 6, t8.kurtosis(), 10, Family::Cholesky, None).unwrap();
        assert!(t8.kurtosis() > gauss.kurtosis());
        assert!(a_t8.a > a_gauss.a);
        assert_eq!(a_t8.a / a_gauss.a, (6.0 + t8.kurtosis()) / 9.0);
    }
}
