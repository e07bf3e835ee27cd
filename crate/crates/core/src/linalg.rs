//! Dense real-matrix kernels used throughout the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Symmetric matrices are wrapped in
//! [`SymMat`], which is symmetrized on construction and rejects inputs whose
//! asymmetry exceeds rounding level.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Relative symmetry defect above which a matrix is rejected as asymmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Largest dimension handled by the vectorized (Kronecker) Lyapunov solve.
pub const DIRECT_LYAPUNOV_MAX_DIM: usize = 30;

const SCHUR_EPS: f64 = 1e-15;

/// Builds a matrix from row-major entries, rejecting NaN/Inf.
pub fn mat(rows: usize, cols: usize, row_major: &[f64]) -> Result<Mat> {
    if rows * cols != row_major.len() {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} matrix needs {} entries, got {}",
            rows * cols,
            row_major.len()
        )));
    }
    let m = Mat::from_row_slice(rows, cols, row_major);
    check_finite(&m)?;
    Ok(m)
}

pub fn check_finite(m: &Mat) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

pub fn row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn require_square(m: &Mat, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

fn symmetry_defect(m: &Mat) -> f64 {
    (m - m.transpose()).norm() / (1.0 + m.norm())
}

/// Square symmetric matrix, stored exactly symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RowMat", into = "RowMat")]
pub struct SymMat(Mat);

impl SymMat {
    /// Symmetrizes `m` as `(m + mᵀ)/2`; errors when the defect is above [`SYMMETRY_TOL`].
    pub fn new(m: Mat) -> Result<Self> {
        require_square(&m, "symmetric matrix")?;
        check_finite(&m)?;
        let defect = symmetry_defect(&m);
        if defect > SYMMETRY_TOL {
            return Err(Error::Asymmetric { defect });
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMat(sym))
    }

    pub fn identity(n: usize) -> Self {
        SymMat(Mat::identity(n, n))
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        SymMat(Mat::identity(n, n) * scale)
    }

    pub fn zeros(n: usize) -> Self {
        SymMat(Mat::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.0.clone()).eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    /// Returns `(M^{1/2}, M^{-1/2})`; requires M ≻ 0.
    pub fn sqrt_and_inv_sqrt(&self, what: &'static str) -> Result<(Mat, Mat)> {
        let eig = SymmetricEigen::new(self.0.clone());
        let min_eig = eig.eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(Error::Indefinite { what, min_eig });
        }
        let q = &eig.eigenvectors;
        let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let inv_root = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt()));
        Ok((q * root * q.transpose(), q * inv_root * q.transpose()))
    }
}

impl Deref for SymMat {
    type Target = Mat;

    fn deref(&self) -> &Mat {
        &self.0
    }
}

/// Serialized form of a matrix: a list of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowMat(pub Vec<Vec<f64>>);

impl From<&Mat> for RowMat {
    fn from(m: &Mat) -> Self {
        RowMat(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
        )
    }
}

impl TryFrom<RowMat> for Mat {
    type Error = Error;

    fn try_from(rows: RowMat) -> Result<Mat> {
        let nrows = rows.0.len();
        let ncols = rows.0.first().map_or(0, Vec::len);
        if rows.0.iter().any(|r| r.len() != ncols) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        let flat: Vec<f64> = rows.0.into_iter().flatten().collect();
        mat(nrows, ncols, &flat)
    }
}

impl TryFrom<RowMat> for SymMat {
    type Error = Error;

    fn try_from(rows: RowMat) -> Result<SymMat> {
        SymMat::new(Mat::try_from(rows)?)
    }
}

impl From<SymMat> for RowMat {
    fn from(m: SymMat) -> Self {
        RowMat::from(&m.0)
    }
}

/// serde adapter for `Mat` fields, written as nested rows.
pub mod serde_rows {
    use super::{Mat, RowMat};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        RowMat::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = RowMat::deserialize(d)?;
        Mat::try_from(rows).map_err(serde::de::Error::custom)
    }
}

/// Largest modulus over the complex spectrum, via real Schur decomposition.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    let n = require_square(m, "spectral radius input")?;
    check_finite(m)?;
    if n == 0 {
        return Ok(0.0);
    }
    let max_iter = 1000 * n.max(10);
    let schur = Schur::try_new(m.clone(), SCHUR_EPS, max_iter).ok_or(Error::Numerical {
        what: "eigenvalue iteration",
        iterations: max_iter,
    })?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Solves `X = Aclᵀ X Acl + W` for stable `Acl`.
pub fn solve_dlyap_transpose(acl: &Mat, w: &SymMat) -> Result<SymMat> {
    let n = require_square(acl, "closed-loop matrix")?;
    if w.dim() != n {
        return Err(Error::Dimension(format!(
            "Lyapunov weight is {}x{}, closed loop is {n}x{n}",
            w.dim(),
            w.dim()
        )));
    }
    let rho = spectral_radius(acl)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    let x = if n <= DIRECT_LYAPUNOV_MAX_DIM {
        lyapunov_direct(acl, w)?
    } else {
        lyapunov_doubling(acl, w)?
    };
    SymMat::new(symmetrize(x))
}

/// Solves `X = Acl X Aclᵀ + W` for stable `Acl`.
pub fn solve_dlyap(acl: &Mat, w: &SymMat) -> Result<SymMat> {
    solve_dlyap_transpose(&acl.transpose(), w)
}

/// Residual `‖X − AclᵀXAcl − W‖_F`.
pub fn dlyap_transpose_residual(acl: &Mat, w: &Mat, x: &Mat) -> f64 {
    (x - acl.transpose() * x * acl - w).norm()
}

fn symmetrize(m: Mat) -> Mat {
    (&m + m.transpose()) * 0.5
}

// vec(AᵀXA) = (Aᵀ ⊗ Aᵀ) vec(X) with column-major vec.
fn lyapunov_direct(acl: &Mat, w: &Mat) -> Result<Mat> {
    let n = acl.nrows();
    let at = acl.transpose();
    let op = Mat::identity(n * n, n * n) - at.kronecker(&at);
    let lu = op.clone().lu();
    let rhs = DVector::from_column_slice(w.as_slice());
    let mut sol = lu.solve(&rhs).ok_or(Error::Numerical {
        what: "vectorized Lyapunov solve",
        iterations: 0,
    })?;
    // One round of iterative refinement keeps the residual at rounding level
    // for closed loops close to the unit circle.
    let resid = &rhs - &op * &sol;
    if let Some(corr) = lu.solve(&resid) {
        sol += corr;
    }
    Ok(Mat::from_column_slice(n, n, sol.as_slice()))
}

// Smith doubling: X = Σ (Aᵀ)^t W A^t accumulated in powers of two.
fn lyapunov_doubling(acl: &Mat, w: &Mat) -> Result<Mat> {
    const MAX_DOUBLINGS: usize = 64;
    let mut a = acl.clone();
    let mut x = w.clone();
    for k in 0..MAX_DOUBLINGS {
        let next = &x + a.transpose() * &x * &a;
        let step = (&next - &x).norm();
        x = next;
        a = &a * &a;
        if step <= f64::EPSILON * (1.0 + x.norm()) || a.norm() == 0.0 {
            return Ok(x);
        }
        if k + 1 == MAX_DOUBLINGS {
            break;
        }
    }
    Err(Error::Numerical {
        what: "Lyapunov doubling iteration",
        iterations: MAX_DOUBLINGS,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue_sym(m: &Mat) -> Result<f64> {
    require_square(m, "symmetric matrix")?;
    let defect = symmetry_defect(m);
    if defect > SYMMETRY_TOL {
        return Err(Error::Contract(format!(
            "min_eigenvalue_sym needs a symmetric matrix (defect {defect:.3e})"
        )));
    }
    Ok(SymMat::new(m.clone())?.min_eigenvalue())
}

/// Thin singular value decomposition with singular values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub singular_values: DVector<f64>,
    pub v: Mat,
}

impl Svd {
    pub fn reconstruct(&self) -> Mat {
        &self.u * Mat::from_diagonal(&self.singular_values) * self.v.transpose()
    }
}

pub fn svd(m: &Mat) -> Result<Svd> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: Mat::zeros(rows, 0),
            singular_values: DVector::zeros(0),
            v: Mat::zeros(cols, 0),
        });
    }
    let dec = SVD::new(m.clone(), true, true);
    let u = dec.u.expect("left singular vectors requested");
    let v_t = dec.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));
    let mut su = Mat::zeros(rows, k);
    let mut sv = Mat::zeros(cols, k);
    let mut sigma = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &v_t.row(src).transpose());
        sigma[dst] = dec.singular_values[src].max(0.0);
    }
    Ok(Svd {
        u: su,
        singular_values: sigma,
        v: sv,
    })
}

/// Smallest singular value (0 for empty matrices).
pub fn sigma_min(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

/// Spectral norm ‖M‖₂.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Inverse via LU with a conditioning guard on the smallest singular value.
pub fn inverse(m: &Mat, what: &'static str) -> Result<Mat> {
    require_square(m, what)?;
    let smin = sigma_min(m);
    if smin < 1e-12 * (1.0 + spectral_norm(m)) {
        return Err(Error::Indefinite { what, min_eig: smin });
    }
    m.clone().try_inverse().ok_or(Error::Indefinite { what, min_eig: smin })
}
