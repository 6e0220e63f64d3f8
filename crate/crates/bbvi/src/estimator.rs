//! Monte-Carlo reparameterization gradient estimators for both ELBO forms,
//! and empirical second-moment estimation with uncertainty.
//!
//! A single-sample gradient is `g(lambda; u) = pullback of grad f at
//! t_lambda(u), plus the regularizer gradient` — the negated entropy
//! gradient in the entropy form, the prior-KL gradient in the KL form. The
//! `M`-sample estimator is the arithmetic mean of `M` independent samples,
//! and [`empirical_sqnorm`] reports the Monte-Carlo second moment
//! `E ||g_M||^2` (the quantity the analytic bounds control), not the
//! centered variance.

use crate::basedist::{BaseDistribution, RngStream};
use crate::reparam::{entropy_gradient, pullback, transform, FlatGradient, VariationalParams};
use crate::targets::{kl_gradient, ElboForm, TargetError, TargetModel};
use thiserror::Error;

/// Errors from estimator configuration and propagated evaluation failures.
#[derive(Debug, Error)]
pub enum EstimatorError {
    /// `M` or the replication count is below its minimum.
    #[error("{what} must be at least {minimum} (got {got})")]
    InvalidCount {
        what: &'static str,
        minimum: usize,
        got: usize,
    },
    /// Propagated target failure.
    #[error(transparent)]
    Target(#[from] TargetError),
    /// Propagated family failure.
    #[error(transparent)]
    Reparam(#[from] crate::reparam::ReparamError),
}

type Result<T> = std::result::Result<T, EstimatorError>;

/// Empirical second moment of the `M`-sample gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate {
    /// Mean of `||g_M||^2` over the replicates.
    pub second_moment: f64,
    /// Sample standard deviation of the per-replicate `||g_M||^2` divided
    /// by `sqrt(replications)`.
    pub std_error: f64,
    /// Number of independent replicates averaged.
    pub replications: usize,
    /// Samples per estimate inside each replicate.
    pub m_samples: usize,
}

/// One-sample reparameterization gradient at draw `u`:
/// the flat-order pullback of `grad f(t_lambda(u))` plus the regularizer
/// gradient for the chosen form.
pub fn grad_sample(
    t: &TargetModel,
    form: ElboForm,
    params: &VariationalParams,
    u: &[f64],
) -> Result<FlatGradient> {
    let zeta = transform(params, u)?;
    let g_f = t.grad_f(form, &zeta)?;
    let mut g = pullback(params, u, &g_f)?;
    let reg = match form {
        ElboForm::Entropy => {
            let mut e = entropy_gradient(params)?;
            e.scale(-1.0);
            e
        }
        ElboForm::Kl => kl_gradient(params, t.prior_variance_required()?)?,
    };
    g.axpy(1.0, &reg);
    Ok(g)
}

/// `M`-sample estimator: the arithmetic mean of `M` independent
/// [`grad_sample`] evaluations with draws from `rng`.
pub fn grad_estimate(
    t: &TargetModel,
    form: ElboForm,
    params: &VariationalParams,
    dist: &BaseDistribution,
    m_samples: usize,
    rng: &mut RngStream,
) -> Result<FlatGradient> {
    if m_samples < 1 {
        return Err(EstimatorError::InvalidCount {
            what: "M",
            minimum: 1,
            got: m_samples,
        });
    }
    let d = params.dim();
    let mut acc = FlatGradient::zeros(params.param_count());
    for _ in 0..m_samples {
        let u = dist.sample(d, rng);
        acc.axpy(1.0, &grad_sample(t, form, params, &u)?);
    }
    acc.scale(1.0 / m_samples as f64);
    Ok(acc)
}

/// Estimates `E ||g_M||^2` from `replications` independent replicates.
///
/// Replicate `r` draws from the stream `(root_seed, r)`, so results are a
/// deterministic function of `(root_seed, configuration)` regardless of
/// evaluation order.
pub fn empirical_sqnorm(
    t: &TargetModel,
    form: ElboForm,
    params: &VariationalParams,
    dist: &BaseDistribution,
    m_samples: usize,
    replications: usize,
    root_seed: u64,
) -> Result<VarianceEstimate> {
    if replications < 2 {
        return Err(EstimatorError::InvalidCount {
            what: "replications",
            minimum: 2,
            got: replications,
        });
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 0..replications {
        let mut rng = RngStream::new(root_seed, r as u64);
        let sq = grad_estimate(t, form, params, dist, m_samples, &mut rng)?.norm_sq();
        sum += sq;
        sum_sq += sq * sq;
    }
    let n = replications as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean).max(0.0) / (n - 1.0);
    Ok(VarianceEstimate {
        second_moment: mean,
        std_error: (var / n).sqrt(),
        replications,
        m_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::reparam::{Conditioner, Family};
    use crate::targets::{
        exact_elbo, linreg_target, quadratic_target, target_constants, TargetModel,
    };

    fn quad(d: usize) -> TargetModel {
        let zstar: Vec<f64> = (0..d).map(|i| 0.3 - 0.2 * i as f64).collect();
        quadratic_target(4.0, 1.0, 2.0, zstar, d).unwrap()
    }

    fn linreg(d: usize, rng: &mut RngStream) -> TargetModel {
        let n = 12;
        let mut x = DenseMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                x.set(i, j, rng.next_gaussian());
            }
        }
        let y: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        linreg_target(&x, &y, 0.8, 1.5).unwrap()
    }

    fn random_params(
        family: Family,
        d: usize,
        conditioner: Conditioner,
        rng: &mut RngStream,
    ) -> VariationalParams {
        let m: Vec<f64> = (0..d).map(|_| 0.7 * rng.next_gaussian()).collect();
        match family {
            Family::MeanField => {
                let s: Vec<f64> = (0..d).map(|_| 0.6 * rng.next_gaussian()).collect();
                VariationalParams::mean_field(m, s, conditioner).unwrap()
            }
            Family::Cholesky => {
                let s: Vec<f64> = (0..d).map(|_| 0.6 * rng.next_gaussian()).collect();
                let l: Vec<f64> = (0..crate::reparam::strict_lower_len(d))
                    .map(|_| 0.3 * rng.next_gaussian())
                    .collect();
                VariationalParams::cholesky(m, s, l, conditioner).unwrap()
            }
            Family::SquareRoot => {
                let mut c = DenseMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        c.set(i, j, 0.3 * rng.next_gaussian() + if i == j { 0.9 } else { 0.0 });
                    }
                }
                VariationalParams::square_root(m, c).unwrap()
            }
        }
    }

    /// Optimal square-root parameters of an isotropic quadratic target.
    fn quad_optimum(t: &TargetModel) -> VariationalParams {
        let c = target_constants(t, &BaseDistribution::gaussian(), None).unwrap();
        let d = t.dim();
        let prec = c.l_h; // Hessian scale 2(a+b)
        let mut cm = DenseMatrix::zeros(d, d);
        for i in 0..d {
            cm.set(i, i, 1.0 / prec.sqrt());
        }
        VariationalParams::square_root(c.zbar_h.clone(), cm).unwrap()
    }

    #[test]
    fn zero_draw_hits_location_block_plus_regularizer() {
        let t = quad(3);
        let mut rng = RngStream::new(10, 0);
        for family in [Family::MeanField, Family::Cholesky, Family::SquareRoot] {
            for form in [ElboForm::Entropy, ElboForm::Kl] {
                let p = random_params(family, 3, Conditioner::Softplus, &mut rng);
                let g = grad_sample(&t, form, &p, &[0.0; 3]).unwrap();
                let g_f = t.grad_f(form, p.location()).unwrap();
                let reg = match form {
                    ElboForm::Entropy => {
                        let mut e = entropy_gradient(&p).unwrap();
                        e.scale(-1.0);
                        e
                    }
                    ElboForm::Kl => kl_gradient(&p, t.prior_variance().unwrap()).unwrap(),
                };
                for k in 0..p.param_count() {
                    let expect = if k < 3 { g_f[k] } else { 0.0 } + reg.values()[k];
                    assert!((g.values()[k] - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_sample_estimate_equals_grad_sample() {
        let t = quad(2);
        let dist = BaseDistribution::gaussian();
        let mut rng = RngStream::new(42, 7);
        let p = random_params(Family::Cholesky, 2, Conditioner::Softplus, &mut rng);
        let mut rng_a = RngStream::new(5, 5);
        let u = dist.sample(2, &mut rng_a);
        let direct = grad_sample(&t, ElboForm::Entropy, &p, &u).unwrap();
        let mut rng_b = RngStream::new(5, 5);
        let est = grad_estimate(&t, ElboForm::Entropy, &p, &dist, 1, &mut rng_b).unwrap();
        for (a, b) in est.values().iter().zip(direct.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn estimate_is_mean_of_samples_bit_for_bit() {
        let t = quad(3);
        let dist = BaseDistribution::gaussian();
        let mut rng = RngStream::new(43, 1);
        let p = random_params(Family::SquareRoot, 3, Conditioner::Identity, &mut rng);
        let m = 7;
        let mut rng_a = RngStream::new(9, 2);
        let est = grad_estimate(&t, ElboForm::Kl, &p, &dist, m, &mut rng_a).unwrap();
        // Recompute with identical draws and the same summation order.
        let mut rng_b = RngStream::new(9, 2);
        let mut acc = FlatGradient::zeros(p.param_count());
        for _ in 0..m {
            let u = dist.sample(3, &mut rng_b);
            acc.axpy(1.0, &grad_sample(&t, ElboForm::Kl, &p, &u).unwrap());
        }
        acc.scale(1.0 / m as f64);
        for (a, b) in est.values().iter().zip(acc.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_degenerate_counts() {
        let t = quad(2);
        let dist = BaseDistribution::gaussian();
        let p = VariationalParams::mean_field(
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            Conditioner::Softplus,
        )
        .unwrap();
        let mut rng = RngStream::new(1, 1);
        assert!(grad_estimate(&t, ElboForm::Entropy, &p, &dist, 0, &mut rng).is_err());
        assert!(empirical_sqnorm(&t, ElboForm::Entropy, &p, &dist, 1, 1, 0).is_err());
    }

    #[test]
    fn mean_gradient_vanishes_at_the_optimum() {
        // Averaged over 10^6 draws at lambda*, each component is zero
        // within 3 standard errors.
        let t = quad(3);
        let dist = BaseDistribution::gaussian();
        let p = quad_optimum(&t);
        let n = 1_000_000usize;
        let pc = p.param_count();
        let mut sum = vec![0.0; pc];
        let mut sum_sq = vec![0.0; pc];
        let mut rng = RngStream::new(314159, 3);
        for _ in 0..n {
            let u = dist.sample(3, &mut rng);
            let g = grad_sample(&t, ElboForm::Entropy, &p, &u).unwrap();
            for (k, v) in g.values().iter().enumerate() {
                sum[k] += v;
                sum_sq[k] += v * v;
            }
        }
        for k in 0..pc {
            let mean = sum[k] / n as f64;
            let var = (sum_sq[k] - n as f64 * mean * mean).max(0.0) / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!(
                mean.abs() <= 3.0 * se + 1e-12,
                "component {k}: mean={mean} se={se}"
            );
        }
    }

    #[test]
    fn unbiased_against_exact_gradient() {
        // Mean of grad_sample over 10^7 draws matches the closed-form
        // objective gradient within 3 standard errors per component, for
        // both targets, all three families, and both forms.
        let mut seeder = RngStream::new(777, 4);
        let quad_t = quad(2);
        let lin_t = linreg(2, &mut seeder);
        let dist = BaseDistribution::gaussian();
        let n = 10_000_000usize;
        for t in [&quad_t, &lin_t] {
            for family in [Family::MeanField, Family::Cholesky, Family::SquareRoot] {
                for form in [ElboForm::Entropy, ElboForm::Kl] {
                    let p = random_params(family, 2, Conditioner::Softplus, &mut seeder);
                    let (_, exact) = exact_elbo(t, &p, &dist).unwrap();
                    let pc = p.param_count();
                    let mut sum = vec![0.0; pc];
                    let mut sum_sq = vec![0.0; pc];
                    let mut rng = RngStream::new(8888, 5);
                    for _ in 0..n {
                        let u = dist.sample(2, &mut rng);
                        let g = grad_sample(t, form, &p, &u).unwrap();
                        for (k, v) in g.values().iter().enumerate() {
                            sum[k] += v;
                            sum_sq[k] += v * v;
                        }
                    }
                    for k in 0..pc {
                        let mean = sum[k] / n as f64;
                        let var =
                            (sum_sq[k] - n as f64 * mean * mean).max(0.0) / (n as f64 - 1.0);
                        let se = (var / n as f64).sqrt();
                        let want = exact.values()[k];
                        assert!(
                            (mean - want).abs() <= 3.0 * se + 1e-12,
                            "{} {form} k={k}: mc={mean} exact={want} se={se}",
                            family.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn component_variance_scales_inversely_with_m() {
        let t = quad(2);
        let dist = BaseDistribution::gaussian();
        let mut rng = RngStream::new(31, 6);
        let p = random_params(Family::MeanField, 2, Conditioner::Softplus, &mut rng);
        let reps = 10_000usize;
        let total_variance = |m: usize, tag: u64| -> f64 {
            let pc = p.param_count();
            let mut sum = vec![0.0; pc];
            let mut sum_sq = vec![0.0; pc];
            for r in 0..reps {
                let mut rng = RngStream::new(tag, r as u64);
                let g = grad_estimate(&t, ElboForm::Entropy, &p, &dist, m, &mut rng).unwrap();
                for (k, v) in g.values().iter().enumerate() {
                    sum[k] += v;
                    sum_sq[k] += v * v;
                }
            }
            (0..pc)
                .map(|k| {
                    let mean = sum[k] / reps as f64;
                    (sum_sq[k] - reps as f64 * mean * mean).max(0.0) / (reps as f64 - 1.0)
                })
                .sum()
        };
        let v1 = total_variance(1, 100);
        let v10 = total_variance(10, 200);
        let ratio = v1 / v10;
        assert!(
            (ratio - 10.0).abs() <= 1.5,
            "variance ratio {ratio} not within 15% of 10"
        );
    }

    #[test]
    fn std_error_follows_replication_count() {
        // Doubling R halves the squared standard error within 20%.
        let t = quad(2);
        let dist = BaseDistribution::gaussian();
        let mut rng = RngStream::new(77, 7);
        let p = random_params(Family::Cholesky, 2, Conditioner::Softplus, &mut rng);
        let a = empirical_sqnorm(&t, ElboForm::Entropy, &p, &dist, 3, 2000, 4242).unwrap();
        let b = empirical_sqnorm(&t, ElboForm::Entropy, &p, &dist, 3, 4000, 4242).unwrap();
        let ratio = (a.std_error * a.std_error) / (b.std_error * b.std_error);
        assert!(
            (ratio - 2.0).abs() <= 0.4,
            "squared-SE ratio {ratio} not within 20% of 2"
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let t = quad(2);
        let dist = BaseDistribution::gaussian();
        let mut rng = RngStream::new(3, 8);
        let p = random_params(Family::SquareRoot, 2, Conditioner::Identity, &mut rng);
        let a = empirical_sqnorm(&t, ElboForm::Kl, &p, &dist, 5, 300, 999).unwrap();
        let b = empirical_sqnorm(&t, ElboForm::Kl, &p, &dist, 5, 300, 999).unwrap();
        assert_eq!(a.second_moment.to_bits(), b.second_moment.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        assert_eq!((a.replications, a.m_samples), (300, 5));
        // A different root seed moves the estimate.
        let c = empirical_sqnorm(&t, ElboForm::Kl, &p, &dist, 5, 300, 1000).unwrap();
        assert_ne!(a.second_moment.to_bits(), c.second_moment.to_bits());
    }

    /// Closed-form `E ||pullback of grad f||^2` for the square-root family
    /// on an isotropic quadratic with Hessian `2 a_f I` and minimizer
    /// `zbar`: `4 a_f^2 [(d+1)||m - zbar||^2 + (d+kappa)||C||_F^2]`.
    fn closed_form_f_sqnorm(
        a_f: f64,
        zbar: &[f64],
        params: &VariationalParams,
        kappa: f64,
    ) -> f64 {
        let d = params.dim() as f64;
        let m_dist: f64 = params
            .location()
            .iter()
            .zip(zbar)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let c_fro = params.build_scale().frobenius_norm_sq();
        4.0 * a_f * a_f * ((d + 1.0) * m_dist + (d + kappa) * c_fro)
    }

    #[test]
    fn second_moment_is_pure_variance_at_the_optimum() {
        // At lambda* the objective gradient vanishes, so E||g_M||^2 equals
        // (E||X||^2 - ||EX||^2)/M with X the pulled-back f-gradient, all
        // from closed forms.
        let t = quad(3);
        let dist = BaseDistribution::gaussian();
        let p = quad_optimum(&t);
        let c = target_constants(&t, &dist, None).unwrap();
        let (l_h, _) = c.curvature(ElboForm::Entropy);
        let m = 4usize;
        let est = empirical_sqnorm(&t, ElboForm::Entropy, &p, &dist, m, 4000, 31337).unwrap();
        let e_x_sq = closed_form_f_sqnorm(l_h / 2.0, &c.zbar_h, &p, dist.kurtosis());
        // EX = grad F - grad h = -grad h at lambda*; entropy-form grad h is
        // the negated entropy gradient.
        let ex_sq = entropy_gradient(&p).unwrap().norm_sq();
        let closed = (e_x_sq - ex_sq) / m as f64;
        assert!(
            (est.second_moment - closed).abs() <= 3.0 * est.std_error,
            "emp={} closed={closed} se={}",
            est.second_moment,
            est.std_error
        );
    }

    #[test]
    fn bounded_by_uncentered_second_moment_at_random_points() {
        // E||g_M||^2 <= E||X||^2 / M + ||grad F||^2 + 3 SE at 50 random
        // parameter points, both forms, with the right-hand side assembled
        // from closed forms only.
        let t = quad(4);
        let dist = BaseDistribution::gaussian();
        let c = target_constants(&t, &dist, None).unwrap();
        let mut rng = RngStream::new(2025, 9);
        let m = 3usize;
        for trial in 0..50 {
            let p = random_params(Family::SquareRoot, 4, Conditioner::Identity, &mut rng);
            let form = if trial % 2 == 0 {
                ElboForm::Entropy
            } else {
                ElboForm::Kl
            };
            let (l, _) = c.curvature(form);
            let zbar = c.minimizer(form);
            let e_x_sq = closed_form_f_sqnorm(l / 2.0, zbar, &p, dist.kurtosis());
            let (_, grad_f) = exact_elbo(&t, &p, &dist).unwrap();
            let rhs = e_x_sq / m as f64 + grad_f.norm_sq();
            let est =
                empirical_sqnorm(&t, form, &p, &dist, m, 500, 5000 + trial as u64).unwrap();
            assert!(
                est.second_moment <= rhs + 3.0 * est.std_error,
                "trial {trial}: emp={} rhs={rhs} se={}",
                est.second_moment,
                est.std_error
            );
        }
    }
}
