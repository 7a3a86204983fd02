//! Positive semi-definite matrices and the primitives built on them:
//! pseudoinverses, range membership and weighted (semi)norms.
//!
//! Every PSD matrix is decomposed once, at construction, with a symmetric
//! eigensolver. Eigenvalues at or below `rank_tol * lambda_max` are treated
//! as exact zeros, which fixes the numerical rank used by every downstream
//! operation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Relative eigenvalue cutoff shared by every module.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Relative tolerance for range-membership checks (`y in R(A)`).
///
/// Larger than [`DEFAULT_RANK_TOL`] so that pseudoinverse rounding is absorbed.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-8;

/// The numerical-rank part of an eigendecomposition: `A = U diag(eigenvalues) U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFactor {
    /// `dim x rank` matrix with orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Strictly positive eigenvalues, one per column of `basis`.
    pub eigenvalues: DVector<f64>,
}

impl SpectralFactor {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = scale_columns(&self.basis, self.eigenvalues.iter().copied());
        &scaled * self.basis.transpose()
    }
}

/// A dense symmetric positive semi-definite matrix with a cached spectral factor.
#[derive(Debug, Clone)]
pub struct PsdMatrix {
    matrix: DMatrix<f64>,
    factor: SpectralFactor,
    rank_tol: f64,
}

impl PsdMatrix {
    /// Validates and decomposes `matrix` using [`DEFAULT_RANK_TOL`].
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        Self::with_rank_tol(matrix, DEFAULT_RANK_TOL)
    }

    /// Validates and decomposes `matrix`.
    ///
    /// The input is symmetrized. It is rejected if it is not square, has
    /// non-finite entries, is asymmetric beyond `rank_tol * (1 + max|A|)`, or
    /// has an eigenvalue below `-rank_tol * lambda_max`. Negative eigenvalues
    /// within that band are clamped to zero.
    pub fn with_rank_tol(matrix: DMatrix<f64>, rank_tol: f64) -> Result<Self> {
        if !(rank_tol.is_finite() && rank_tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "rank tolerance must be positive and finite, got {rank_tol}"
            )));
        }
        if !matrix.is_square() {
            return Err(Error::InvalidInput(format!(
                "PSD matrix must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let max_abs = matrix.amax();
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > rank_tol * (1.0 + max_abs) {
            return Err(Error::InvalidInput(format!(
                "matrix is not symmetric (max |A - A^T| = {asym:e})"
            )));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let scale = eig.eigenvalues.amax();
        let cutoff = rank_tol * scale;
        let min_eig = eig.eigenvalues.min();
        if min_eig < -cutoff {
            return Err(Error::NotPsd {
                eigenvalue: min_eig,
                tolerance: cutoff,
            });
        }
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > cutoff)
            .collect();
        let factor = SpectralFactor {
            basis: eig.eigenvectors.select_columns(keep.iter()),
            eigenvalues: DVector::from_iterator(keep.len(), keep.iter().map(|&i| eig.eigenvalues[i])),
        };
        Ok(Self {
            matrix: sym,
            factor,
            rank_tol,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_diagonal_unchecked(&vec![0.0; dim], DEFAULT_RANK_TOL)
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0).expect("unit scale is valid")
    }

    /// `kappa * I`, with `kappa >= 0`.
    pub fn scaled_identity(dim: usize, kappa: f64) -> Result<Self> {
        Self::from_diagonal(&vec![kappa; dim])
    }

    /// Diagonal matrix with nonnegative entries. The eigenbasis is the exact
    /// coordinate basis, so zero-variance coordinates stay exactly zero.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if let Some(bad) = diag.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "diagonal entries must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Self::from_diagonal_unchecked(diag, DEFAULT_RANK_TOL))
    }

    fn from_diagonal_unchecked(diag: &[f64], rank_tol: f64) -> Self {
        let dim = diag.len();
        let scale = diag.iter().fold(0.0_f64, |m, &v| m.max(v));
        let keep: Vec<usize> = (0..dim).filter(|&i| diag[i] > rank_tol * scale).collect();
        let mut basis = DMatrix::zeros(dim, keep.len());
        for (col, &i) in keep.iter().enumerate() {
            basis[(i, col)] = 1.0;
        }
        Self {
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            factor: SpectralFactor {
                basis,
                eigenvalues: DVector::from_iterator(keep.len(), keep.iter().map(|&i| diag[i])),
            },
            rank_tol,
        }
    }

    /// `scale * x x^T` with `scale >= 0`.
    pub fn outer(x: &DVector<f64>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "outer-product scale must be finite and nonnegative, got {scale}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("vector has non-finite entries".into()));
        }
        let norm = x.norm();
        let dim = x.len();
        let matrix = x * x.transpose() * scale;
        let factor = if norm > 0.0 && scale > 0.0 {
            SpectralFactor {
                basis: DMatrix::from_column_slice(dim, 1, (x / norm).as_slice()),
                eigenvalues: DVector::from_element(1, scale * norm * norm),
            }
        } else {
            SpectralFactor {
                basis: DMatrix::zeros(dim, 0),
                eigenvalues: DVector::zeros(0),
            }
        };
        Ok(Self {
            matrix,
            factor,
            rank_tol: DEFAULT_RANK_TOL,
        })
    }

    fn from_factor(factor: SpectralFactor, rank_tol: f64) -> Self {
        let matrix = factor.reconstruct();
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        Self {
            matrix,
            factor,
            rank_tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn rank(&self) -> usize {
        self.factor.rank()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn spectral_factor(&self) -> &SpectralFactor {
        &self.factor
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.matrix.diagonal()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.factor.eigenvalues.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn is_zero(&self) -> bool {
        self.rank() == 0
    }

    /// Moore-Penrose pseudoinverse, sharing this matrix's eigenbasis.
    pub fn pseudo_inverse(&self) -> PsdMatrix {
        let inv = SpectralFactor {
            basis: self.factor.basis.clone(),
            eigenvalues: self.factor.eigenvalues.map(|v| 1.0 / v),
        };
        Self::from_factor(inv, self.rank_tol)
    }

    /// Symmetric square root `A^{1/2}`.
    pub fn sqrt(&self) -> PsdMatrix {
        let root = SpectralFactor {
            basis: self.factor.basis.clone(),
            eigenvalues: self.factor.eigenvalues.map(f64::sqrt),
        };
        Self::from_factor(root, self.rank_tol)
    }

    /// `alpha * A` for `alpha > 0`.
    pub fn scaled(&self, alpha: f64) -> Result<PsdMatrix> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "scale factor must be positive and finite, got {alpha}"
            )));
        }
        Ok(Self {
            matrix: &self.matrix * alpha,
            factor: SpectralFactor {
                basis: self.factor.basis.clone(),
                eigenvalues: &self.factor.eigenvalues * alpha,
            },
            rank_tol: self.rank_tol,
        })
    }

    /// `A A^dagger v`, the orthogonal projection of `v` onto the range.
    pub fn project_onto_range(&self, v: &DVector<f64>) -> DVector<f64> {
        let coords = self.factor.basis.tr_mul(v);
        &self.factor.basis * coords
    }

    /// `A^dagger v` without forming the pseudoinverse.
    pub fn pinv_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut coords = self.factor.basis.tr_mul(v);
        coords.component_div_assign(&self.factor.eigenvalues);
        &self.factor.basis * coords
    }

    /// `v^T A^dagger v`, the squared seminorm `||v||^2_{A^dagger}`.
    pub fn pinv_quadratic(&self, v: &DVector<f64>) -> f64 {
        let coords = self.factor.basis.tr_mul(v);
        coords
            .iter()
            .zip(self.factor.eigenvalues.iter())
            .map(|(c, l)| c * c / l)
            .sum()
    }

    /// Relative distance of `v` from the range: `||A A^dagger v - v|| / ||v||`
    /// (zero for `v = 0`).
    pub fn range_gap(&self, v: &DVector<f64>) -> f64 {
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        // ||v - P v||^2 = ||v||^2 - ||U^T v||^2 loses accuracy near zero, so
        // form the residual explicitly.
        (self.project_onto_range(v) - v).norm() / norm
    }
}

/// Moore-Penrose pseudoinverse `A^dagger`. `A = 0` maps to `0`.
pub fn pseudo_inverse(a: &PsdMatrix) -> PsdMatrix {
    a.pseudo_inverse()
}

/// `true` iff `||A A^dagger v - v|| <= tol * ||v||`.
pub fn in_range(v: &DVector<f64>, a: &PsdMatrix, tol: f64) -> Result<bool> {
    check_dim("in_range", a.dim(), v.len())?;
    Ok(a.range_gap(v) <= tol)
}

/// `x^T W x`, clamped at zero.
pub fn weighted_sq_norm(x: &DVector<f64>, w: &PsdMatrix) -> Result<f64> {
    check_dim("weighted_sq_norm", w.dim(), x.len())?;
    Ok(x.dot(&(w.matrix() * x)).max(0.0))
}

/// Pseudoinverse of a general (rectangular) matrix through its SVD, with
/// singular values at or below `rank_tol * sigma_max` treated as zero.
pub fn general_pseudo_inverse(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.amax();
    let cutoff = rank_tol * sigma_max;
    let u = svd.u.expect("requested U");
    let mut v = svd.v_t.expect("requested V^T").transpose();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let inv = if s > cutoff { 1.0 / s } else { 0.0 };
        v.column_mut(k).scale_mut(inv);
    }
    v * u.transpose()
}

/// Minimum-norm least-squares solution of `a x = b`. Uses a Cholesky
/// factorization of the smaller Gram matrix when it is well conditioned and
/// falls back to [`general_pseudo_inverse`] otherwise.
pub fn least_squares_min_norm(a: &DMatrix<f64>, b: &DVector<f64>, rank_tol: f64) -> DVector<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return DVector::zeros(cols);
    }
    let tall = rows >= cols;
    let gram = if tall { a.tr_mul(a) } else { a * a.transpose() };
    if let Some(chol) = gram.clone().cholesky() {
        let l = chol.l_dirty();
        let diag = l.diagonal();
        let (lo, hi) = (diag.min(), diag.max());
        // A rough condition estimate; normal equations lose its square.
        if lo > 0.0 && lo / hi > 1e-4 {
            return if tall {
                chol.solve(&a.tr_mul(b))
            } else {
                a.tr_mul(&chol.solve(b))
            };
        }
    }
    general_pseudo_inverse(a, rank_tol) * b
}

/// Numerical rank of a general matrix using the same relative cutoff as
/// [`general_pseudo_inverse`].
pub fn numerical_rank(a: &DMatrix<f64>, rank_tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.singular_values();
    let cutoff = rank_tol * sv.amax();
    sv.iter().filter(|&&s| s > cutoff).count()
}

fn scale_columns(m: &DMatrix<f64>, scales: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut col, s) in out.column_iter_mut().zip(scales) {
        col *= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn penrose_residuals(a: &DMatrix<f64>, p: &DMatrix<f64>) -> [f64; 4] {
        let scale = 1.0 + a.amax().max(p.amax());
        let apa = a * p * a;
        let pap = p * a * p;
        let ap = a * p;
        let pa = p * a;
        [
            (apa - a).amax() / scale,
            (pap - p).amax() / scale,
            (&ap - ap.transpose()).amax() / scale,
            (&pa - pa.transpose()).amax() / scale,
        ]
    }

    #[test]
    fn identity_is_its_own_pseudoinverse() {
        let p = pseudo_inverse(&PsdMatrix::identity(2));
        assert_relative_eq!(p.matrix(), &DMatrix::identity(2, 2), epsilon = 1e-15);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let a = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0])).unwrap();
        let p = pseudo_inverse(&a);
        assert_relative_eq!(
            p.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]),
            epsilon = 1e-15
        );
        assert_eq!(a.rank(), 1);
    }

    #[test]
    fn zero_matrix_maps_to_zero() {
        let p = pseudo_inverse(&PsdMatrix::zeros(3));
        assert_eq!(p.matrix(), &DMatrix::zeros(3, 3));
        let q = pseudo_inverse(&PsdMatrix::new(DMatrix::zeros(3, 3)).unwrap());
        assert_eq!(q.matrix(), &DMatrix::zeros(3, 3));
    }

    #[test]
    fn rank_two_of_four_satisfies_penrose() {
        let b = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -0.5, 0.3, 0.0, 1.5, 2.2, -1.0]);
        let a = PsdMatrix::new(&b * b.transpose()).unwrap();
        assert_eq!(a.rank(), 2);
        let p = pseudo_inverse(&a);
        for r in penrose_residuals(a.matrix(), p.matrix()) {
            assert!(r < 1e-12, "{r}");
        }
    }

    #[test]
    fn rejects_non_finite_and_indefinite() {
        let nan = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matches!(PsdMatrix::new(nan), Err(Error::InvalidInput(_))));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(PsdMatrix::new(indef), Err(Error::NotPsd { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(PsdMatrix::new(asym), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn tiny_negative_eigenvalue_is_clamped() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-14]);
        let m = PsdMatrix::new(a).unwrap();
        assert_eq!(m.rank(), 1);
        assert!(m.spectral_factor().eigenvalues.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn range_membership() {
        let a = PsdMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        assert!(in_range(&e1, &a, DEFAULT_FEASIBILITY_TOL).unwrap());
        assert!(!in_range(&e2, &a, DEFAULT_FEASIBILITY_TOL).unwrap());
        assert!(in_range(&DVector::zeros(2), &a, DEFAULT_FEASIBILITY_TOL).unwrap());
        assert!(matches!(
            in_range(&DVector::zeros(3), &a, 1e-8),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn weighted_norms() {
        let x = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(weighted_sq_norm(&x, &PsdMatrix::identity(2)).unwrap(), 25.0);
        assert_eq!(weighted_sq_norm(&x, &PsdMatrix::zeros(2)).unwrap(), 0.0);
        let w = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let x = DVector::from_vec(vec![1.0, -1.0]);
        // 2*1 + 2*(1)(-1)*1 + 2*1 evaluated term by term.
        let expected = 2.0 * 1.0 * 1.0 + 1.0 * 1.0 * (-1.0) + 1.0 * (-1.0) * 1.0 + 2.0 * (-1.0) * (-1.0);
        assert_eq!(weighted_sq_norm(&x, &w).unwrap(), expected);
        assert_eq!(expected, 2.0);
    }

    #[test]
    fn outer_product_factor() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let m = PsdMatrix::outer(&x, 1.0).unwrap();
        assert_eq!(m.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert_eq!(m.rank(), 1);
        assert_relative_eq!(m.spectral_factor().reconstruct(), m.matrix().clone(), epsilon = 1e-14);
        assert!(PsdMatrix::outer(&DVector::zeros(2), 1.0).unwrap().is_zero());
    }

    #[test]
    fn general_pinv_of_column() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let p = general_pseudo_inverse(&x, DEFAULT_RANK_TOL);
        assert_relative_eq!(p, DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), epsilon = 1e-15);
        assert_eq!(numerical_rank(&x, DEFAULT_RANK_TOL), 1);
    }
}
