//! Lower-triangular Cholesky factors with a diagonal-jitter ladder and
//! block extension, the workhorse behind exact GP inference.
//!
//! A factor built here represents `A + jitter*I` where `A` is the matrix
//! handed to [`CholFactor::factor`] (typically `K + sigma^2 I`). The jitter
//! starts at `1e-8 * scale` and escalates by factors of ten up to
//! `1e-2 * scale` before giving up; `scale` is the kernel signal variance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter ladder: start, multiplier, cap.
pub const JITTER_INIT: f64 = 1e-8;
pub const JITTER_GROWTH: f64 = 10.0;
pub const JITTER_MAX: f64 = 1e-2;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CholFactor {
    /// Factor of the empty 0x0 matrix. `scale` fixes the jitter that block
    /// extensions of this factor will use, so that incremental growth and
    /// batch factorization see the same matrix.
    pub fn empty(scale: f64) -> Self {
        CholFactor {
            l: DMatrix::zeros(0, 0),
            jitter: JITTER_INIT * scale,
        }
    }

    /// Factor `mat + jitter*I`, escalating the jitter on failure.
    ///
    /// `mat` must be symmetric and already include any noise term; `scale`
    /// anchors the jitter ladder (use the kernel signal variance).
    pub fn factor(mat: &DMatrix<f64>, scale: f64) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::dim(format!(
                "cannot factor {}x{} matrix",
                mat.nrows(),
                mat.ncols()
            )));
        }
        if mat.nrows() == 0 {
            return Ok(Self::empty(scale));
        }
        let mut jitter = JITTER_INIT * scale;
        let max = JITTER_MAX * scale;
        loop {
            let mut a = mat.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += jitter;
            }
            if let Some(ch) = nalgebra::linalg::Cholesky::new(a) {
                return Ok(CholFactor {
                    l: ch.unpack(),
                    jitter,
                });
            }
            if jitter >= max {
                return Err(Error::NotPositiveDefinite { jitter });
            }
            jitter *= JITTER_GROWTH;
        }
    }

    /// Extend the factor of `A` to a factor of `[[A, B], [B^T, D + jitter*I]]`.
    ///
    /// `cross` is `B` (n x c) and `corner` is `D` (c x c, noise included,
    /// jitter not). Cost is O(n^2 c), versus O(n^3) for refactoring. Fails if
    /// the Schur complement is not positive definite at the current jitter;
    /// callers typically fall back to a batch refit then.
    pub fn extend(&self, cross: &DMatrix<f64>, corner: &DMatrix<f64>) -> Result<Self> {
        let n = self.l.nrows();
        let c = corner.nrows();
        if cross.nrows() != n || cross.ncols() != c || corner.ncols() != c {
            return Err(Error::dim(format!(
                "extend: factor {}x{}, cross {}x{}, corner {}x{}",
                n,
                n,
                cross.nrows(),
                cross.ncols(),
                corner.nrows(),
                corner.ncols()
            )));
        }
        // C = L^{-1} B, then Schur complement S = D + jitter*I - C^T C.
        let c_mat = if n == 0 {
            DMatrix::zeros(0, c)
        } else {
            self.l
                .solve_lower_triangular(cross)
                .ok_or(Error::NotPositiveDefinite {
                    jitter: self.jitter,
                })?
        };
        let mut schur = corner - c_mat.transpose() * &c_mat;
        for i in 0..c {
            schur[(i, i)] += self.jitter;
        }
        let ls = nalgebra::linalg::Cholesky::new(schur)
            .ok_or(Error::NotPositiveDefinite {
                jitter: self.jitter,
            })?
            .unpack();

        let mut l = DMatrix::zeros(n + c, n + c);
        l.view_mut((0, 0), (n, n)).copy_from(&self.l);
        l.view_mut((n, 0), (c, n)).copy_from(&c_mat.transpose());
        l.view_mut((n, n), (c, c)).copy_from(&ls);
        Ok(CholFactor {
            l,
            jitter: self.jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solve `(L L^T) x = b`.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has positive diagonal")
    }

    /// Solve `(L L^T) x = b` for a vector.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has positive diagonal")
    }

    /// Solve `L y = b` (forward substitution only).
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has positive diagonal")
    }

    /// `log |L L^T| = 2 * sum(log diag L)`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Reconstruct `L L^T` (testing and diagnostics).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}
