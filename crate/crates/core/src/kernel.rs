//! Gaussian (squared-exponential) kernel with per-dimension inverse
//! lengthscales, evaluated over embedded input points.

use nalgebra::{DMatrix, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel hyperparameters: `k(x, x') = sv * exp(-1/2 (x-x')^T diag(ils) (x-x'))`.
///
/// `inv_lengthscales_sq` is the diagonal of the precision matrix in the
/// exponent, one strictly positive entry per embedded input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub inv_lengthscales_sq: Vec<f64>,
}

impl KernelParams {
    pub fn new(signal_variance: f64, inv_lengthscales_sq: Vec<f64>) -> Result<Self> {
        let p = KernelParams {
            signal_variance,
            inv_lengthscales_sq,
        };
        p.validate()?;
        Ok(p)
    }

    /// Isotropic kernel with the same inverse squared lengthscale in every dimension.
    pub fn isotropic(signal_variance: f64, inv_lengthscale_sq: f64, dim: usize) -> Result<Self> {
        Self::new(signal_variance, vec![inv_lengthscale_sq; dim])
    }

    pub fn dim(&self) -> usize {
        self.inv_lengthscales_sq.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::arg(format!(
                "signal variance must be positive and finite, got {}",
                self.signal_variance
            )));
        }
        if self.inv_lengthscales_sq.is_empty() {
            return Err(Error::arg("kernel needs at least one input dimension"));
        }
        for (i, v) in self.inv_lengthscales_sq.iter().enumerate() {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!(
                    "inverse squared lengthscale {i} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Evaluate the kernel on two points of dimension `params.dim()`.
pub fn kernel_eval(
    x_i: DVectorView<f64>,
    x_j: DVectorView<f64>,
    params: &KernelParams,
) -> Result<f64> {
    let d = params.dim();
    if x_i.len() != d || x_j.len() != d {
        return Err(Error::dim(format!(
            "kernel_eval: points of dim {} and {} against kernel of dim {}",
            x_i.len(),
            x_j.len(),
            d
        )));
    }
    Ok(kernel_eval_unchecked(x_i, x_j, params))
}

#[inline]
fn kernel_eval_unchecked(
    x_i: DVectorView<f64>,
    x_j: DVectorView<f64>,
    params: &KernelParams,
) -> f64 {
    let mut q = 0.0;
    for k in 0..params.inv_lengthscales_sq.len() {
        let diff = x_i[k] - x_j[k];
        q += params.inv_lengthscales_sq[k] * diff * diff;
    }
    params.signal_variance * (-0.5 * q).exp()
}

/// Symmetric kernel matrix over points stored as rows of `points`.
pub fn gram(points: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    if n > 0 && points.ncols() != params.dim() {
        return Err(Error::dim(format!(
            "gram: points of dim {} against kernel of dim {}",
            points.ncols(),
            params.dim()
        )));
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let v = kernel_eval_unchecked(
                points.row(i).transpose().as_view(),
                points.row(j).transpose().as_view(),
                params,
            );
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Cross-kernel matrix: entry (i, j) couples row i of `a` with row j of `b`.
pub fn cross(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    let d = params.dim();
    if (a.nrows() > 0 && a.ncols() != d) || (b.nrows() > 0 && b.ncols() != d) {
        return Err(Error::dim(format!(
            "cross: point dims {} / {} against kernel of dim {}",
            a.ncols(),
            b.ncols(),
            d
        )));
    }
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            k[(i, j)] = kernel_eval_unchecked(
                a.row(i).transpose().as_view(),
                b.row(j).transpose().as_view(),
                params,
            );
        }
    }
    Ok(k)
}
