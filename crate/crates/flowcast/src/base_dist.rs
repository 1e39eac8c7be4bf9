//! Conditional Gaussian base distribution: context-dependent shape
//! parameters, log-density, seeded sampling, and quantiles.
//!
//! The multivariate covariance is diagonal; cross-dimension dependence is
//! modeled entirely by the autoregressive transforms downstream.

use rand::Rng;

use crate::autodiff::softplus;
use crate::error::{Error, Result};
use crate::nets::Mlp;

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const LN_2PI: f64 = 1.8378770664093453;

/// Per-dimension mean and positive scale of the base Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<GaussianParams> {
        if mu.len() != sigma.len() {
            return Err(Error::Shape(format!(
                "mu has {} dims, sigma has {}",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite gaussian parameter".into()));
        }
        if sigma.iter().any(|&s| s < SIGMA_FLOOR) {
            return Err(Error::Domain(format!("sigma below {SIGMA_FLOOR} floor")));
        }
        Ok(GaussianParams { mu, sigma })
    }

    /// Standard normal N(0, I) in `d` dimensions.
    pub fn standard(d: usize) -> GaussianParams {
        GaussianParams { mu: vec![0.0; d], sigma: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Map context features through the shape-parameter network: the first `d`
/// outputs are the means, the last `d` pass through softplus plus the floor
/// to become scales.
pub fn shape_params(phi_net: &Mlp, x: &[f64]) -> Result<GaussianParams> {
    let out = phi_net.forward_values(x)?;
    if out.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "shape net must emit 2d outputs, got {}",
            out.len()
        )));
    }
    let d = out.len() / 2;
    let mu = out[..d].to_vec();
    let sigma = out[d..].iter().map(|&raw| softplus(raw) + SIGMA_FLOOR).collect();
    GaussianParams::new(mu, sigma)
}

/// Diagonal-Gaussian log-density of one point.
pub fn log_prob(p: &GaussianParams, z: &[f64]) -> Result<f64> {
    if z.len() != p.dim() {
        return Err(Error::Shape(format!("point has {} dims, params {}", z.len(), p.dim())));
    }
    let mut total = 0.0;
    for i in 0..p.dim() {
        let r = (z[i] - p.mu[i]) / p.sigma[i];
        total += -0.5 * LN_2PI - p.sigma[i].ln() - 0.5 * r * r;
    }
    Ok(total)
}

/// One standard-normal draw via Box-Muller over the caller's uniform stream.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `count` independent draws of `mu + sigma * eps`; reproducible under a
/// fixed seed since the generator is owned by the caller.
pub fn sample(p: &GaussianParams, count: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..p.dim())
                .map(|i| p.mu[i] + p.sigma[i] * standard_normal(rng))
                .collect()
        })
        .collect()
}

/// Per-dimension `alpha`-quantile: `mu + sigma * Phi^{-1}(alpha)`.
pub fn quantile(p: &GaussianParams, alpha: f64) -> Result<Vec<f64>> {
    let q = norm_quantile(alpha)?;
    Ok(p.mu.iter().zip(&p.sigma).map(|(m, s)| m + s * q).collect())
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley refinement step, accurate to well under 1e-8 absolute.
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level {p} outside (0,1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };

    // Halley refinement against the erfc-based CDF.
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}
