//! Exact Gaussian-process inference over trajectory-structured data.
//!
//! Models are immutable once fitted: `fit` and `block_update` return new
//! values, so a snapshot can be shared across concurrent evaluators. All
//! solves go through the stored Cholesky factor of `K + sigma^2 I + jitter I`.
//!
//! A model lives in a "model space" defined by its [`Standardizer`]: inputs
//! and targets are standardized on the way in, predictions are
//! de-standardized on the way out. `Standardizer::identity` gives the raw
//! pass-through used by most unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::chol::CholFactor;
use crate::error::{Error, Result};
use crate::kernel::{self, KernelParams};
use crate::trajectory::Trajectory;

/// Per-dimension standardization statistics, frozen at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardizer {
    /// No-op standardizer for `dim` input dimensions.
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            input_mean: vec![0.0; dim],
            input_std: vec![1.0; dim],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Zero-mean / unit-variance statistics of the given dataset. Constant
    /// dimensions keep a unit scale so standardization stays invertible.
    pub fn from_data(inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Self {
        let n = inputs.nrows().max(1) as f64;
        let d = inputs.ncols();
        let mut input_mean = vec![0.0; d];
        let mut input_std = vec![1.0; d];
        for j in 0..d {
            let col = inputs.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            input_mean[j] = mean;
            input_std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let t_n = targets.len().max(1) as f64;
        let t_mean = targets.sum() / t_n;
        let t_var = targets
            .iter()
            .map(|v| (v - t_mean) * (v - t_mean))
            .sum::<f64>()
            / t_n;
        let t_std = if t_var.sqrt() > 1e-12 {
            t_var.sqrt()
        } else {
            1.0
        };
        Standardizer {
            input_mean,
            input_std,
            target_mean: t_mean,
            target_std: t_std,
        }
    }

    pub fn dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn standardize_inputs(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = inputs.clone();
        for j in 0..out.ncols() {
            let (m, s) = (self.input_mean[j], self.input_std[j]);
            for i in 0..out.nrows() {
                out[(i, j)] = (out[(i, j)] - m) / s;
            }
        }
        out
    }

    pub fn standardize_targets(&self, targets: &DVector<f64>) -> DVector<f64> {
        targets.map(|v| (v - self.target_mean) / self.target_std)
    }

    pub fn destandardize_mean(&self, mean: &DVector<f64>) -> DVector<f64> {
        mean.map(|v| self.target_mean + self.target_std * v)
    }

    pub fn is_identity(&self) -> bool {
        self.target_mean == 0.0
            && self.target_std == 1.0
            && self.input_mean.iter().all(|v| *v == 0.0)
            && self.input_std.iter().all(|v| *v == 1.0)
    }
}

/// Predictive distribution over the `m` points of a trajectory.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Box bounds for hyperparameter training, laid out as
/// `[signal_variance, inv_lengthscale_sq_1, .., inv_lengthscale_sq_d, noise_variance]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl HyperBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = HyperBounds { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.len() < 3 {
            return Err(Error::arg(format!(
                "hyper bounds need matching lower/upper of length >= 3, got {} / {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(*lo > 0.0 && lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::arg(format!(
                    "hyper bound {i} must satisfy 0 < lower <= upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Number of kernel input dimensions these bounds describe.
    pub fn input_dim(&self) -> usize {
        self.lower.len() - 2
    }
}

/// Immutable fitted GP posterior.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: DMatrix<f64>,  // standardized, one point per row
    targets: DVector<f64>, // standardized
    kernel: KernelParams,
    noise_variance: f64,
    prior_mean: f64, // in standardized target space
    stats: Standardizer,
    chol: CholFactor,
    alpha: DVector<f64>, // (K + sigma^2 I + jI)^{-1} (targets - prior_mean)
}

impl GpModel {
    /// Fit on raw data with identity standardization.
    pub fn fit(
        inputs: &DMatrix<f64>,
        targets: &DVector<f64>,
        kernel: KernelParams,
        noise_variance: f64,
        prior_mean: f64,
    ) -> Result<Self> {
        let stats = Standardizer::identity(kernel.dim());
        Self::fit_standardized(inputs, targets, kernel, noise_variance, prior_mean, stats)
    }

    /// Fit on raw data, standardizing it with the given frozen statistics.
    /// `prior_mean` is interpreted in the standardized target space.
    pub fn fit_standardized(
        inputs: &DMatrix<f64>,
        targets: &DVector<f64>,
        kernel: KernelParams,
        noise_variance: f64,
        prior_mean: f64,
        stats: Standardizer,
    ) -> Result<Self> {
        kernel.validate()?;
        if inputs.nrows() != targets.len() {
            return Err(Error::dim(format!(
                "fit: {} input rows vs {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if inputs.nrows() > 0 && inputs.ncols() != kernel.dim() {
            return Err(Error::dim(format!(
                "fit: input dim {} vs kernel dim {}",
                inputs.ncols(),
                kernel.dim()
            )));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::arg(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        if stats.dim() != kernel.dim() {
            return Err(Error::dim(format!(
                "fit: standardizer dim {} vs kernel dim {}",
                stats.dim(),
                kernel.dim()
            )));
        }
        let inputs_s = stats.standardize_inputs(inputs);
        let targets_s = stats.standardize_targets(targets);
        let mut k = kernel::gram(&inputs_s, &kernel)?;
        for i in 0..k.nrows() {
            k[(i, i)] += noise_variance;
        }
        let chol = CholFactor::factor(&k, kernel.signal_variance)?;
        let centered = targets_s.map(|v| v - prior_mean);
        let alpha = if centered.is_empty() {
            DVector::zeros(0)
        } else {
            chol.solve_vec(&centered)
        };
        Ok(GpModel {
            inputs: inputs_s,
            targets: targets_s,
            kernel,
            noise_variance,
            prior_mean,
            stats,
            chol,
            alpha,
        })
    }

    /// Model with no observations (prior only).
    pub fn empty(kernel: KernelParams, noise_variance: f64, prior_mean: f64) -> Result<Self> {
        let d = kernel.dim();
        Self::fit(
            &DMatrix::zeros(0, d),
            &DVector::zeros(0),
            kernel,
            noise_variance,
            prior_mean,
        )
    }

    /// Like [`GpModel::empty`] but with explicit standardization statistics.
    pub fn empty_standardized(
        kernel: KernelParams,
        noise_variance: f64,
        prior_mean: f64,
        stats: Standardizer,
    ) -> Result<Self> {
        let d = kernel.dim();
        Self::fit_standardized(
            &DMatrix::zeros(0, d),
            &DVector::zeros(0),
            kernel,
            noise_variance,
            prior_mean,
            stats,
        )
    }

    pub fn num_points(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Noise variance plus the jitter actually applied to the factor; this is
    /// the effective noise the stored posterior corresponds to.
    pub fn effective_noise(&self) -> f64 {
        self.noise_variance + self.chol.jitter()
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn stats(&self) -> &Standardizer {
        &self.stats
    }

    pub fn chol(&self) -> &CholFactor {
        &self.chol
    }

    /// Standardized training inputs (one point per row).
    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// Standardized training targets.
    pub fn train_targets(&self) -> &DVector<f64> {
        &self.targets
    }

    fn standardize_trajectory(&self, tau: &Trajectory) -> Result<DMatrix<f64>> {
        if tau.dim() != self.kernel.dim() {
            return Err(Error::dim(format!(
                "predict: trajectory dim {} vs model dim {}",
                tau.dim(),
                self.kernel.dim()
            )));
        }
        Ok(self.stats.standardize_inputs(&tau.to_rows()))
    }

    /// Posterior over the trajectory in standardized (model) space.
    pub fn predict_internal(&self, tau: &Trajectory) -> Result<Prediction> {
        let x_star = self.standardize_trajectory(tau)?;
        let k_ss = kernel::gram(&x_star, &self.kernel)?;
        if self.num_points() == 0 {
            return Ok(Prediction {
                mean: DVector::from_element(x_star.nrows(), self.prior_mean),
                cov: k_ss,
            });
        }
        let k_star = kernel::cross(&self.inputs, &x_star, &self.kernel)?;
        let mean = DVector::from_fn(x_star.nrows(), |i, _| {
            self.prior_mean + k_star.column(i).dot(&self.alpha)
        });
        let v = self.chol.solve_lower(&k_star);
        let cov = k_ss - v.transpose() * v;
        Ok(Prediction { mean, cov })
    }

    /// Posterior over the trajectory, de-standardized to raw target units.
    pub fn predict(&self, tau: &Trajectory) -> Result<Prediction> {
        let internal = self.predict_internal(tau)?;
        let scale = self.stats.target_std * self.stats.target_std;
        Ok(Prediction {
            mean: self.stats.destandardize_mean(&internal.mean),
            cov: internal.cov * scale,
        })
    }

    /// De-standardized posterior mean only; skips the covariance solve.
    pub fn predict_mean(&self, tau: &Trajectory) -> Result<DVector<f64>> {
        let x_star = self.standardize_trajectory(tau)?;
        let mean_s = if self.num_points() == 0 {
            DVector::from_element(x_star.nrows(), self.prior_mean)
        } else {
            let k_star = kernel::cross(&self.inputs, &x_star, &self.kernel)?;
            DVector::from_fn(x_star.nrows(), |i, _| {
                self.prior_mean + k_star.column(i).dot(&self.alpha)
            })
        };
        Ok(self.stats.destandardize_mean(&mean_s))
    }

    /// New model equal to refitting on the union of the old data and the new
    /// trajectory, built by extending the Cholesky factor with one block
    /// (O(n^2 m) instead of O(n^3)). Falls back to a batch refit if the
    /// extension loses positive definiteness.
    pub fn block_update(&self, tau: &Trajectory, targets_new: &DVector<f64>) -> Result<Self> {
        if tau.num_points() != targets_new.len() {
            return Err(Error::dim(format!(
                "block_update: {} trajectory points vs {} targets",
                tau.num_points(),
                targets_new.len()
            )));
        }
        let x_new = self.standardize_trajectory(tau)?;
        let y_new = self.stats.standardize_targets(targets_new);

        let inputs = stack_rows(&self.inputs, &x_new);
        let targets = stack_vec(&self.targets, &y_new);

        let cross = kernel::cross(&self.inputs, &x_new, &self.kernel)?;
        let mut corner = kernel::gram(&x_new, &self.kernel)?;
        for i in 0..corner.nrows() {
            corner[(i, i)] += self.noise_variance;
        }
        let chol = match self.chol.extend(&cross, &corner) {
            Ok(c) => c,
            Err(_) => {
                // Conditioning degraded; rebuild from scratch with the ladder.
                let mut k = kernel::gram(&inputs, &self.kernel)?;
                for i in 0..k.nrows() {
                    k[(i, i)] += self.noise_variance;
                }
                CholFactor::factor(&k, self.kernel.signal_variance)?
            }
        };
        let centered = targets.map(|v| v - self.prior_mean);
        let alpha = chol.solve_vec(&centered);
        Ok(GpModel {
            inputs,
            targets,
            kernel: self.kernel.clone(),
            noise_variance: self.noise_variance,
            prior_mean: self.prior_mean,
            stats: self.stats.clone(),
            chol,
            alpha,
        })
    }

    /// Log marginal likelihood of the standardized data under the model,
    /// with targets centered on the prior mean.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let n = self.num_points();
        if n == 0 {
            return Err(Error::state(
                "log marginal likelihood needs at least one data point",
            ));
        }
        let centered = self.targets.map(|v| v - self.prior_mean);
        let quad = centered.dot(&self.alpha);
        Ok(-0.5 * quad
            - 0.5 * self.chol.logdet()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), b.ncols());
    if a.nrows() > 0 {
        out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    }
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols()))
        .copy_from(b);
    out
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Result of hyperparameter training.
#[derive(Debug, Clone)]
pub struct TrainedHypers {
    pub kernel: KernelParams,
    pub noise_variance: f64,
    /// Best log marginal likelihood found (NaN if every evaluation failed).
    pub log_likelihood: f64,
    /// Set when no restart produced a usable likelihood and the initial
    /// point was returned unchanged.
    pub warning: bool,
}

/// Maximize the log marginal likelihood over box-constrained hyperparameters
/// `[signal_variance, inv_lengthscale_sq.., noise_variance]`.
///
/// Data is expected in the space the model will be fitted in (standardize
/// first). Search runs in log-hyperparameter space: the initial point plus
/// `restarts` seeded uniform starts, each refined by coordinate pattern
/// search with step halving. Deterministic for a fixed seed.
pub fn train_hyperparams(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    bounds: &HyperBounds,
    init: &[f64],
    restarts: usize,
    seed: u64,
) -> Result<TrainedHypers> {
    bounds.validate()?;
    let dim = bounds.lower.len();
    if init.len() != dim {
        return Err(Error::arg(format!(
            "init has {} entries, bounds describe {}",
            init.len(),
            dim
        )));
    }
    if inputs.nrows() == 0 {
        return Err(Error::state("hyperparameter training needs data"));
    }
    if inputs.ncols() != bounds.input_dim() {
        return Err(Error::dim(format!(
            "training data dim {} vs bounds input dim {}",
            inputs.ncols(),
            bounds.input_dim()
        )));
    }

    let lo: Vec<f64> = bounds.lower.iter().map(|v| v.ln()).collect();
    let hi: Vec<f64> = bounds.upper.iter().map(|v| v.ln()).collect();
    let clamp = |theta: &mut [f64]| {
        for ((t, l), h) in theta.iter_mut().zip(&lo).zip(&hi) {
            *t = t.clamp(*l, *h);
        }
    };

    let eval = |theta: &[f64]| -> f64 {
        let sv = theta[0].exp();
        let ils: Vec<f64> = theta[1..dim - 1].iter().map(|t| t.exp()).collect();
        let noise = theta[dim - 1].exp();
        let kernel = match KernelParams::new(sv, ils) {
            Ok(k) => k,
            Err(_) => return f64::NEG_INFINITY,
        };
        match GpModel::fit(inputs, targets, kernel, noise, 0.0) {
            Ok(m) => m.log_marginal_likelihood().unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let mut init_theta: Vec<f64> = init.iter().map(|v| v.ln()).collect();
    clamp(&mut init_theta);

    // Degenerate box: nothing to search.
    if lo.iter().zip(&hi).all(|(l, h)| (h - l).abs() < 1e-15) {
        let theta = lo.clone();
        return Ok(finish(&theta, eval(&theta), dim, false));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut starts = vec![init_theta.clone()];
    for _ in 0..restarts {
        let mut s: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { rng.random_range(*l..*h) } else { *l })
            .collect();
        clamp(&mut s);
        starts.push(s);
    }

    let budget = 60 * dim;
    let mut best_theta = init_theta.clone();
    let mut best_val = f64::NEG_INFINITY;
    for start in &starts {
        let (theta, val) = pattern_search(start, &lo, &hi, budget, &eval);
        if val > best_val {
            best_val = val;
            best_theta = theta;
        }
    }

    if best_val.is_finite() {
        Ok(finish(&best_theta, best_val, dim, false))
    } else {
        Ok(finish(&init_theta, f64::NAN, dim, true))
    }
}

fn finish(theta: &[f64], val: f64, dim: usize, warning: bool) -> TrainedHypers {
    TrainedHypers {
        kernel: KernelParams {
            signal_variance: theta[0].exp(),
            inv_lengthscales_sq: theta[1..dim - 1].iter().map(|t| t.exp()).collect(),
        },
        noise_variance: theta[dim - 1].exp(),
        log_likelihood: val,
        warning,
    }
}

/// Coordinate pattern search with step halving inside a box, maximizing `f`.
fn pattern_search(
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    budget: usize,
    f: &dyn Fn(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    let dim = start.len();
    let mut steps: Vec<f64> = lo
        .iter()
        .zip(hi)
        .map(|(l, h)| ((h - l) * 0.25).max(1e-12))
        .collect();
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut evals = 1usize;
    while evals < budget && steps.iter().any(|s| *s > 1e-4) {
        let mut improved = false;
        for j in 0..dim {
            for sign in [1.0, -1.0] {
                if evals >= budget {
                    break;
                }
                if hi[j] - lo[j] < 1e-15 {
                    continue;
                }
                let mut cand = x.clone();
                cand[j] = (cand[j] + sign * steps[j]).clamp(lo[j], hi[j]);
                if cand[j] == x[j] {
                    continue;
                }
                let fc = f(&cand);
                evals += 1;
                if fc > fx {
                    x = cand;
                    fx = fc;
                    improved = true;
                }
            }
        }
        if !improved {
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    (x, fx)
}
