//! Rank-revealing least squares.
//!
//! Solved through the singular value decomposition of the design matrix.
//! Singular values below `RANK_TOLERANCE * max column norm` are treated as
//! zero, which yields the minimum-norm solution on rank-deficient systems.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative rank tolerance, scaled by the largest column norm.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Iterative-refinement passes after the SVD solve.
const REFINEMENT_STEPS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LstsqError {
    #[error("underdetermined system: {rows} observations for {cols} parameters")]
    Underdetermined { rows: usize, cols: usize },
    #[error("design matrix has {0} rows but response has {1}")]
    ShapeMismatch(usize, usize),
    #[error("design matrix contains non-finite entries")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub theta: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rank: usize,
    /// `rank < cols`; `theta` is then the minimum-norm minimizer.
    pub rank_deficient: bool,
    /// Ratio of extreme retained singular values.
    pub condition: f64,
    /// Pseudo-inverse of `A^T A`; multiply by the noise variance to get the
    /// covariance of `theta`.
    pub cov_unscaled: DMatrix<f64>,
}

impl LstsqSolution {
    pub fn rss(&self) -> f64 {
        self.residuals.norm_squared()
    }

    /// Degrees of freedom of the residual, `n - rank`.
    pub fn dof(&self) -> usize {
        self.residuals.len() - self.rank
    }
}

pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LstsqSolution, LstsqError> {
    let (rows, cols) = a.shape();
    if rows != b.len() {
        return Err(LstsqError::ShapeMismatch(rows, b.len()));
    }
    if rows < cols || cols == 0 {
        return Err(LstsqError::Underdetermined { rows, cols });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(LstsqError::NonFinite);
    }

    let max_col_norm = a
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    let tol = RANK_TOLERANCE * max_col_norm;

    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sv = &svd.singular_values;

    let kept: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > tol && sv[i] != 0.0).collect();
    let rank = kept.len();
    let s_max = kept.iter().map(|&i| sv[i]).fold(0.0f64, f64::max);
    let s_min = kept.iter().map(|&i| sv[i]).fold(f64::INFINITY, f64::min);
    let pinv_apply = |r: &DVector<f64>| {
        let mut out = DVector::zeros(cols);
        for &i in &kept {
            let coef = u.column(i).dot(r) / sv[i];
            out.axpy(coef, &v_t.row(i).transpose(), 1.0);
        }
        out
    };
    let mut cov = DMatrix::zeros(cols, cols);
    for &i in &kept {
        let v_i = v_t.row(i).transpose();
        cov += (&v_i * v_i.transpose()) / (sv[i] * sv[i]);
    }

    // The iterative SVD can leave errors well above machine precision on
    // block-structured designs; refining against the same factors recovers
    // the accuracy while keeping the pseudo-inverse on rank-deficient input.
    let mut theta = pinv_apply(b);
    let mut residuals = b - a * &theta;
    for _ in 0..REFINEMENT_STEPS {
        let step = pinv_apply(&residuals);
        if step.amax() <= f64::EPSILON * theta.amax() {
            break;
        }
        let candidate = &theta + step;
        let r = b - a * &candidate;
        if r.norm() > residuals.norm() {
            break;
        }
        theta = candidate;
        residuals = r;
    }
    let condition = if rank == 0 { f64::INFINITY } else { s_max / s_min };

    Ok(LstsqSolution {
        theta,
        residuals,
        rank,
        rank_deficient: rank < cols,
        condition,
        cov_unscaled: cov,
    })
}
