//! Safety indicators and the Monte-Carlo trajectory-safety probability.
//!
//! A trajectory is safe when every safety value along it is nonnegative;
//! `xi_mc` estimates that orthant probability under the safety model's
//! predictive Gaussian. All estimators are deterministic given a seed, and
//! candidates evaluated within one acquisition solve can share a single set
//! of base normal draws so the constraint surface stays continuous.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chol::CholFactor;
use crate::error::{Error, Result};

/// One scalar safety-indicator measurement; nonnegative values are safe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyObservation {
    pub z: f64,
}

impl SafetyObservation {
    pub fn new(z: f64) -> Result<Self> {
        if !z.is_finite() {
            return Err(Error::arg(format!(
                "safety indicator must be finite, got {z}"
            )));
        }
        Ok(SafetyObservation { z })
    }

    pub fn is_safe(&self) -> bool {
        self.z >= 0.0
    }
}

/// Monte-Carlo estimate of the trajectory-safety probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyEstimate {
    pub p_hat: f64,
    pub n_samples: usize,
    pub std_err: f64,
    pub seed: u64,
}

/// Pressure-margin safety indicator: `1 - exp((psi - psi_max) / lambda_p)`.
///
/// Zero exactly at `psi_max`, increasing toward 1 as the pressure drops,
/// negative above the limit; `lambda_p` sets how fast the margin collapses.
pub fn pressure_indicator(psi: f64, psi_max: f64, lambda_p: f64) -> f64 {
    debug_assert!(lambda_p > 0.0, "lambda_p must be positive");
    1.0 - ((psi - psi_max) / lambda_p).exp()
}

/// Shared standard-normal draws (`n_samples x m`), keyed by seed.
#[derive(Debug, Clone)]
pub struct NormalDraws {
    z: DMatrix<f64>,
    seed: u64,
}

impl NormalDraws {
    pub fn generate(n_samples: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n_samples, m, |_, _| StandardNormal.sample(&mut rng));
        NormalDraws { z, seed }
    }

    pub fn n_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Monte-Carlo estimate of `P(all components >= 0)` under `N(mu, sigma)`,
/// reusing previously generated base draws.
pub fn xi_mc_with_draws(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    draws: &NormalDraws,
) -> Result<SafetyEstimate> {
    let m = mu.len();
    if sigma.nrows() != m || sigma.ncols() != m {
        return Err(Error::dim(format!(
            "xi_mc: mean of dim {} vs covariance {}x{}",
            m,
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if draws.dim() != m {
        return Err(Error::dim(format!(
            "xi_mc: draws of dim {} vs mean of dim {}",
            draws.dim(),
            m
        )));
    }
    // Symmetrize before factoring; predictive covariances carry O(1e-12)
    // asymmetry from accumulated rounding.
    let sym = (sigma + sigma.transpose()) * 0.5;
    let scale = sym.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = CholFactor::factor(&sym, scale)?;
    let l = chol.l();

    let n = draws.n_samples();
    let mut safe = 0usize;
    // Sample i is mu + L z_i; count it when every component clears zero.
    for i in 0..n {
        let mut all_safe = true;
        for r in 0..m {
            let mut v = mu[r];
            for c in 0..=r {
                v += l[(r, c)] * draws.z[(i, c)];
            }
            if v < 0.0 {
                all_safe = false;
                break;
            }
        }
        if all_safe {
            safe += 1;
        }
    }
    let p_hat = safe as f64 / n as f64;
    Ok(SafetyEstimate {
        p_hat,
        n_samples: n,
        std_err: (p_hat * (1.0 - p_hat) / n as f64).sqrt(),
        seed: draws.seed(),
    })
}

/// Monte-Carlo estimate of the trajectory-safety probability with fresh
/// draws from `seed`.
pub fn xi_mc(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<SafetyEstimate> {
    if n_samples == 0 {
        return Err(Error::arg("xi_mc needs at least one sample"));
    }
    let draws = NormalDraws::generate(n_samples, mu.len(), seed);
    xi_mc_with_draws(mu, sigma, &draws)
}

/// Exact 1-D orthant probability `P(z >= 0) = Phi(mu / sigma)`; the test
/// oracle for `xi_mc` in the scalar case.
pub fn xi_analytic_1d(mu: f64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0, "sigma must be positive");
    normal_cdf(mu / sigma)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Safety decision: the estimated probability must exceed `1 - alpha`.
pub fn is_safe(estimate: &SafetyEstimate, alpha: f64) -> bool {
    debug_assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    estimate.p_hat > 1.0 - alpha
}
