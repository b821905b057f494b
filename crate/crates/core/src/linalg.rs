//! Gaussian design generation and the dense kernels the simulator and
//! numerical oracles rely on: projections onto column spans, least squares,
//! and minimum-norm interpolating updates.
//!
//! No explicit inverse is ever formed; every application of a projector or
//! pseudo-inverse goes through a positive-definite factorization of the
//! relevant Gram matrix, guarded by a condition-number threshold.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Condition number above which a Gram matrix is declared rank deficient.
pub const COND_LIMIT: f64 = 1e12;

/// A p x n design whose columns are samples.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub seed: u64,
}

impl DesignMatrix {
    pub fn p(&self) -> usize {
        self.x.nrows()
    }
    pub fn n(&self) -> usize {
        self.x.ncols()
    }
}

/// Observation noise for one client-round.
#[derive(Debug, Clone)]
pub struct NoiseVector {
    pub e: DVector<f64>,
    pub sigma: f64,
}

/// Samples a p x n matrix with i.i.d. standard Gaussian entries,
/// deterministic in the seed.
pub fn sample_design(p: usize, n: usize, seed: u64) -> DesignMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Column-major fill keeps the layout independent of nalgebra's iteration
    // order.
    let mut x = DMatrix::zeros(p, n);
    for j in 0..n {
        for i in 0..p {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    DesignMatrix { x, seed }
}

/// Samples a length-n noise vector with std `sigma` from the given RNG.
pub fn sample_noise(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> NoiseVector {
    let e = DVector::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    NoiseVector { e, sigma }
}

/// A factorized Gram matrix with its condition number already checked.
struct GramFactor {
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl GramFactor {
    /// Factorizes `g`, rejecting matrices whose spectral condition number
    /// exceeds `COND_LIMIT`.
    fn new(g: DMatrix<f64>) -> Result<Self> {
        let eigen = g.clone().symmetric_eigen();
        let max = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        if !(min > 0.0) || max / min > COND_LIMIT {
            return Err(Error::RankDeficient(format!(
                "Gram condition number {:.3e} exceeds {:.0e}",
                if min > 0.0 { max / min } else { f64::INFINITY },
                COND_LIMIT
            )));
        }
        let chol = Cholesky::new(g).ok_or_else(|| {
            Error::RankDeficient("positive-definite factorization failed".into())
        })?;
        Ok(Self { chol })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Applies the orthogonal projector onto the column span of `x` to `v`,
/// i.e. x (x^T x)^{-1} x^T v, without forming the projector.
///
/// Requires full column rank (p >= n); rank deficiency is reported through
/// the Gram condition guard.
pub fn orthogonal_projector_apply(design: &DesignMatrix, v: &DVector<f64>) -> Result<DVector<f64>> {
    let x = &design.x;
    let gram = x.tr_mul(x);
    let factor = GramFactor::new(gram)?;
    let coeffs = factor.solve(&x.tr_mul(v));
    Ok(x * coeffs)
}

/// Solves argmin_w ||y - X^T w||^2 for n > p via the normal equations
/// X X^T w = X y.
pub fn least_squares_solve(design: &DesignMatrix, y: &DVector<f64>) -> Result<DVector<f64>> {
    let x = &design.x;
    if x.ncols() <= x.nrows() {
        return Err(Error::DimensionViolation(format!(
            "least squares needs n > p (n = {}, p = {})",
            x.ncols(),
            x.nrows()
        )));
    }
    let gram = x * x.transpose();
    let factor = GramFactor::new(gram)?;
    Ok(factor.solve(&(x * y)))
}

/// Minimum-norm-change interpolating update for p > n:
/// w = w_prev + X (X^T X)^{-1} (y - X^T w_prev), the closest point to
/// `w_prev` satisfying X^T w = y.
pub fn min_norm_update(
    design: &DesignMatrix,
    y: &DVector<f64>,
    w_prev: &DVector<f64>,
) -> Result<DVector<f64>> {
    let x = &design.x;
    if x.nrows() <= x.ncols() {
        return Err(Error::DimensionViolation(format!(
            "interpolating update needs p > n (p = {}, n = {})",
            x.nrows(),
            x.ncols()
        )));
    }
    let gram = x.tr_mul(x);
    let factor = GramFactor::new(gram)?;
    let residual = y - x.tr_mul(w_prev);
    Ok(w_prev + x * factor.solve(&residual))
}
