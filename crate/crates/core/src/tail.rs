//! Hill estimation of power-law tail exponents and heavy-tailed samplers.
//!
//! Tail exponents use the density convention `p(x) ~ c x^{-alpha}`, so the
//! survival function decays like `x^{-(alpha - 1)}`. The `1 +` term in the
//! estimator converts the survival exponent back to the density exponent.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sums of log-ratios at or below this are treated as an infinite estimate.
const DEGENERATE_LOG_SUM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TailError {
    #[error("sample {index} is not strictly positive ({value})")]
    NonPositiveSample { index: usize, value: f64 },
    #[error("top-{k} log-ratio sum {sum:e} is degenerate; the tail estimate would be infinite")]
    DegenerateTail { k: usize, sum: f64 },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("order-statistic cut k = {k} outside [1, {max}]")]
    InvalidK { k: usize, max: usize },
    #[error("invalid tail exponent {0}")]
    InvalidAlpha(f64),
}

/// Order-statistic cut for the Hill estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "HillKRepr", into = "HillKRepr")]
pub enum HillK {
    /// `k = floor(n / 2)`.
    #[default]
    Auto,
    Fixed(usize),
}

impl HillK {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            HillK::Auto => n / 2,
            HillK::Fixed(k) => k,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum HillKRepr {
    Fixed(usize),
    Named(String),
}

impl TryFrom<HillKRepr> for HillK {
    type Error = String;

    fn try_from(r: HillKRepr) -> Result<Self, String> {
        match r {
            HillKRepr::Fixed(0) => Err("hill_k must be a positive integer or \"auto\"".into()),
            HillKRepr::Fixed(k) => Ok(HillK::Fixed(k)),
            HillKRepr::Named(s) if s == "auto" => Ok(HillK::Auto),
            HillKRepr::Named(s) => Err(format!("unknown hill_k {s:?}; expected \"auto\" or an integer")),
        }
    }
}

impl From<HillK> for HillKRepr {
    fn from(k: HillK) -> Self {
        match k {
            HillK::Auto => HillKRepr::Named("auto".into()),
            HillK::Fixed(k) => HillKRepr::Fixed(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub alpha_hat: f64,
    pub k: usize,
    pub n: usize,
}

/// Hill estimator `1 + k / Σ_{i=1..k} ln(x_{n-i+1} / x_{n-k})` over the
/// ascending order statistics of `samples`.
pub fn hill_estimator(samples: &[f64], k: HillK) -> Result<TailEstimate, TailError> {
    let n = samples.len();
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(TailError::NonPositiveSample { index, value });
    }
    if n < 2 {
        return Err(TailError::TooFewSamples(n));
    }
    let k = k.resolve(n);
    if k < 1 || k > n - 1 {
        return Err(TailError::InvalidK { k, max: n - 1 });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let reference = sorted[n - k - 1];
    let sum: f64 = sorted[n - k..].iter().map(|&x| (x / reference).ln()).sum();
    if !(sum > DEGENERATE_LOG_SUM) {
        return Err(TailError::DegenerateTail { k, sum });
    }
    let alpha_hat = 1.0 + k as f64 / sum;
    if !alpha_hat.is_finite() {
        return Err(TailError::DegenerateTail { k, sum });
    }
    Ok(TailEstimate { alpha_hat, k, n })
}

/// Inverse CDF of the unit-scale power law with density exponent `alpha`.
pub fn pareto_quantile(u: f64, alpha: f64) -> f64 {
    u.powf(-1.0 / (alpha - 1.0))
}

/// Inverse CDF of the standard Fréchet law with shape `alpha`.
pub fn frechet_quantile(u: f64, alpha: f64) -> f64 {
    (-u.ln()).powf(-1.0 / alpha)
}

/// `n` i.i.d. power-law draws with `x_min = 1` and density exponent `alpha`.
pub fn sample_pareto(alpha: f64, n: usize, seed: u64) -> Result<Vec<f64>, TailError> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(TailError::InvalidAlpha(alpha));
    }
    Ok(uniform_open(n, seed)
        .map(|u| pareto_quantile(u, alpha))
        .collect())
}

/// `n` i.i.d. standard Fréchet(`alpha`) draws.
pub fn sample_frechet(alpha: f64, n: usize, seed: u64) -> Result<Vec<f64>, TailError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(TailError::InvalidAlpha(alpha));
    }
    Ok(uniform_open(n, seed)
        .map(|u| frechet_quantile(u, alpha))
        .collect())
}

fn uniform_open(n: usize, seed: u64) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(move |_| rng.sample::<f64, _>(Open01))
}
