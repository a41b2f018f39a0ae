//! Dense symmetric positive definite matrices with rank-one inverse
//! maintenance.
//!
//! The Gibbs sweep adds and removes one event at a time from a cluster's
//! regularized Gram matrix. Keeping the inverse current via the Woodbury
//! identity costs O(F²) per event instead of O(F³) for a fresh
//! factorization:
//!
//! ```text
//! (D + s·xxᵀ)⁻¹ = H − s·Hx (1 + s·xᵀHx)⁻¹ xᵀH
//! (D − s·xxᵀ)⁻¹ = H + s·Hx (1 − s·xᵀHx)⁻¹ xᵀH
//! ```
//!
//! Every operation re-symmetrizes its result so drift stays bounded over
//! long sweeps.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

/// Downdate denominator guard. The denominator 1 − s·xᵀHx hits zero
/// exactly when the removed vector was the last support of the matrix
/// beyond its prior term; floating error can push it slightly negative.
pub const DOWNDATE_EPS: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (Cholesky failed)")]
    NonPositiveDefinite,
    #[error("rank-one downdate denominator {denom:.3e} below guard; rebuild from D")]
    DowndateSingular { denom: f64 },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("dimension mismatch: matrix is {dim}, vector is {other}")]
    DimensionMismatch { dim: usize, other: usize },
}

/// Dense symmetric positive definite matrix, stored row-major.
///
/// Constructors either build trivially SPD matrices (scaled identities)
/// or go through a symmetry check plus Cholesky, so any value of this
/// type can be assumed SPD by callers.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn identity(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        SpdMatrix {
            m: DMatrix::identity(dim, dim),
        }
    }

    /// s·I with s > 0.
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        assert!(dim > 0, "dimension must be positive");
        assert!(s > 0.0 && s.is_finite(), "scale must be positive finite");
        SpdMatrix {
            m: DMatrix::identity(dim, dim) * s,
        }
    }

    /// Wraps a matrix after checking symmetry. Positive definiteness is
    /// not verified here; [`SpdMatrix::invert`] performs the Cholesky
    /// check on use.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        assert_eq!(m.nrows(), m.ncols(), "matrix must be square");
        for a in 0..m.nrows() {
            for b in (a + 1)..m.ncols() {
                let tol = SYMMETRY_TOL * m[(a, b)].abs().max(1.0);
                if (m[(a, b)] - m[(b, a)]).abs() > tol {
                    return Err(LinalgError::NotSymmetric { row: a, col: b });
                }
            }
        }
        Ok(SpdMatrix { m })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Direct inverse via Cholesky. Doubles as the definiteness check.
    pub fn invert(&self) -> Result<SpdMatrix, LinalgError> {
        let chol =
            Cholesky::new(self.m.clone()).ok_or(LinalgError::NonPositiveDefinite)?;
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        Ok(SpdMatrix { m: inv })
    }

    /// Log-determinant via Cholesky.
    pub fn log_det(&self) -> Result<f64, LinalgError> {
        let chol =
            Cholesky::new(self.m.clone()).ok_or(LinalgError::NonPositiveDefinite)?;
        Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// Given H = D⁻¹, returns (D + s·xxᵀ)⁻¹ in O(F²).
    pub fn rank1_update_inverse(&self, x: &DVector<f64>, s: f64) -> SpdMatrix {
        self.check_vec(x);
        let hx = &self.m * x;
        let denom = 1.0 + s * x.dot(&hx);
        let mut out = self.m.clone();
        // H is SPD so denom > 1; no guard needed.
        out.ger(-s / denom, &hx, &hx, 1.0);
        symmetrize(&mut out);
        SpdMatrix { m: out }
    }

    /// Given H = D⁻¹, returns (D − s·xxᵀ)⁻¹ in O(F²). Fails with
    /// [`LinalgError::DowndateSingular`] when the denominator falls below
    /// [`DOWNDATE_EPS`]; the caller must rebuild from D directly.
    pub fn rank1_downdate_inverse(
        &self,
        x: &DVector<f64>,
        s: f64,
    ) -> Result<SpdMatrix, LinalgError> {
        self.check_vec(x);
        let hx = &self.m * x;
        let denom = 1.0 - s * x.dot(&hx);
        if denom <= DOWNDATE_EPS {
            return Err(LinalgError::DowndateSingular { denom });
        }
        let mut out = self.m.clone();
        out.ger(s / denom, &hx, &hx, 1.0);
        symmetrize(&mut out);
        Ok(SpdMatrix { m: out })
    }

    /// In-place M ← M + s·xxᵀ, re-symmetrized. Used for the shadow D.
    pub fn add_scaled_outer(&mut self, x: &DVector<f64>, s: f64) {
        self.check_vec(x);
        self.m.ger(s, x, x, 1.0);
        symmetrize(&mut self.m);
    }

    /// xᵀMx.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        self.check_vec(x);
        x.dot(&(&self.m * x))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        self.check_vec(x);
        &self.m * x
    }

    /// Convex combination (1−γ)·A + γ·B of two SPD matrices; SPD for any
    /// γ ∈ [0, 1], and for γ outside [0,1] still symmetric.
    pub fn blend(&self, other: &SpdMatrix, gamma: f64) -> SpdMatrix {
        assert_eq!(self.dim(), other.dim());
        SpdMatrix {
            m: &self.m * (1.0 - gamma) + &other.m * gamma,
        }
    }

    /// Max-norm of M·other − I. Residual check used by invariants.
    pub fn inverse_residual(&self, other: &SpdMatrix) -> f64 {
        let mut prod = &self.m * &other.m;
        for i in 0..prod.nrows() {
            prod[(i, i)] -= 1.0;
        }
        prod.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    fn check_vec(&self, x: &DVector<f64>) {
        assert_eq!(
            self.dim(),
            x.len(),
            "vector length must match matrix dimension"
        );
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in (a + 1)..m.ncols() {
            let v = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
}
