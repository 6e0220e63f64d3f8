//! Standardized base distributions and deterministic random streams.
//!
//! # Base distributions
//!
//! Sampling is always from a *standardized* distribution: zero mean, identity
//! covariance, finite fourth moment. Two families are supported:
//!
//! - `Gaussian`: kurtosis 3, entropy `ln(2 pi e) / 2` per dimension.
//! - `StudentT { nu }` with `nu > 4`, scaled by `sqrt((nu - 2) / nu)` so the
//!   variance is exactly 1. The `nu > 4` restriction keeps the fourth moment
//!   (kurtosis `3 (nu - 2) / (nu - 4)`) finite, which the variance bounds
//!   require.
//!
//! # Random streams
//!
//! [`RngStream`] is a counter-mode generator (ChaCha8) addressed by a
//! `(seed, stream)` pair. The 32-byte ChaCha key is derived from the pair by
//! two rounds of splitmix64, so equal pairs give bit-identical draw sequences
//! on every platform and distinct streams are statistically independent for
//! simulation purposes. Gaussians come from Box-Muller over the open-interval
//! uniform, with the spare draw cached, so the number of raw uniforms
//! consumed is a deterministic function of the requested draws.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};
use thiserror::Error;

/// Errors from base-distribution construction and sampling.
#[derive(Debug, Error, PartialEq)]
pub enum BaseDistError {
    /// Student-t with `nu <= 4` has no finite fourth moment.
    #[error("kurtosis undefined: student-t requires nu > 4 (got nu = {nu})")]
    KurtosisUndefined { nu: f64 },
    /// Degrees of freedom must be a finite number.
    #[error("degrees of freedom must be finite (got {nu})")]
    NonFiniteNu { nu: f64 },
}

/// Standardized (zero-mean, unit-variance) base distribution for the
/// reparameterization trick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseDistribution {
    /// Standard normal.
    Gaussian,
    /// Student-t with `nu > 4` degrees of freedom, rescaled to unit variance.
    StudentT { nu: f64 },
}

impl BaseDistribution {
    /// Standard normal base.
    pub fn gaussian() -> Self {
        BaseDistribution::Gaussian
    }

    /// Standardized student-t base; requires `nu > 4` for a finite kurtosis.
    pub fn student_t(nu: f64) -> Result<Self, BaseDistError> {
        if !nu.is_finite() {
            return Err(BaseDistError::NonFiniteNu { nu });
        }
        if nu <= 4.0 {
            return Err(BaseDistError::KurtosisUndefined { nu });
        }
        Ok(BaseDistribution::StudentT { nu })
    }

    /// Fourth standardized moment `E u_i^4`.
    pub fn kurtosis(&self) -> f64 {
        match self {
            BaseDistribution::Gaussian => 3.0,
            BaseDistribution::StudentT { nu } => 3.0 * (nu - 2.0) / (nu - 4.0),
        }
    }

    /// Differential entropy of one coordinate of the standardized base.
    pub fn entropy_per_dim(&self) -> f64 {
        match self {
            BaseDistribution::Gaussian => 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln(),
            BaseDistribution::StudentT { nu } => {
                // Unit-scale student-t entropy plus the ln-scale shift from
                // standardizing by sqrt((nu - 2) / nu).
                let half_nu = 0.5 * nu;
                let half_nu1 = 0.5 * (nu + 1.0);
                let unit = half_nu1 * (statrs::function::gamma::digamma(half_nu1)
                    - statrs::function::gamma::digamma(half_nu))
                    + (nu.sqrt()
                        * (statrs::function::gamma::ln_gamma(half_nu)
                            + statrs::function::gamma::ln_gamma(0.5)
                            - statrs::function::gamma::ln_gamma(half_nu + 0.5))
                            .exp())
                    .ln();
                unit + 0.5 * ((nu - 2.0) / nu).ln()
            }
        }
    }

    /// Draws one standardized vector of length `d`.
    pub fn sample(&self, d: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..d).map(|_| self.sample_scalar(rng)).collect()
    }

    /// Draws one standardized scalar.
    pub fn sample_scalar(&self, rng: &mut RngStream) -> f64 {
        match self {
            BaseDistribution::Gaussian => rng.next_gaussian(),
            BaseDistribution::StudentT { nu } => {
                let z = rng.next_gaussian();
                let chi = ChiSquared::new(*nu).expect("nu > 4 checked at construction");
                let w: f64 = chi.sample(rng);
                let t = z / (w / nu).sqrt();
                t * ((nu - 2.0) / nu).sqrt()
            }
        }
    }
}

/// Mixes one splitmix64 step into `state` and returns the output word.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child stream index from a domain tag and parts.
///
/// Used to address independent substreams (per replicate, per iteration, per
/// role) from one root seed without coordination: equal inputs always map to
/// the same stream, distinct inputs are scrambled apart.
pub fn stream_id(parts: &[u64]) -> u64 {
    let mut state = 0x243F_6A88_85A3_08D3; // pi fraction, fixed domain root
    let mut acc = 0;
    for &p in parts {
        state ^= p;
        acc = splitmix64(&mut state);
    }
    acc
}

/// Deterministic, splittable random stream addressed by `(seed, stream)`.
///
/// Equal `(seed, stream)` pairs produce bit-identical sequences; different
/// pairs produce decorrelated sequences. Cloning snapshots the full state.
#[derive(Debug, Clone)]
pub struct RngStream {
    chacha: ChaCha8Rng,
    spare_gaussian: Option<f64>,
}

impl RngStream {
    /// Opens the stream addressed by `(seed, stream)`.
    pub fn new(seed: u64, stream: u64) -> Self {
        // Two mixing rounds: absorb the seed, then the stream index, then
        // squeeze 32 key bytes. Distinct pairs land on distinct keys except
        // with negligible (2^-64-scale) collision probability.
        let mut state = seed;
        let first = splitmix64(&mut state);
        let mut key_state = first ^ stream.wrapping_mul(0xD605_BBB5_8C8E_C2A5);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut key_state).to_le_bytes());
        }
        Self {
            chacha: ChaCha8Rng::from_seed(key),
            spare_gaussian: None,
        }
    }

    /// Next raw 64-bit word.
    pub fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    /// Uniform draw in the half-open interval `(0, 1]`.
    ///
    /// The lower endpoint is excluded so `ln(u)` is always finite.
    pub fn next_uniform(&mut self) -> f64 {
        (((self.chacha.next_u64() >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller with spare caching.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }
}

// rand_distr samplers (the chi-square draw inside student-t) pull entropy
// through the rand_core interface.
impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.chacha.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.chacha.fill_bytes(dest)
    }
}
