//! Dense helpers on top of nalgebra: Cholesky with pivot reporting, PSD
//! repair, and block-diagonal matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FmmError, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes `a`. A pivot that is not positive, or is below
    /// `1e-13 · max diag`, is reported as rank deficiency.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(FmmError::Shape(format!(
                "cholesky of non-square {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let threshold = 1e-13 * scale.max(f64::MIN_POSITIVE);
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > threshold) || !d.is_finite() {
                return Err(FmmError::RankDeficient { pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let mut v = DVector::from_column_slice(col.as_slice());
            self.solve_in_place(&mut v);
            col.copy_from(&v);
        }
        x
    }

    fn solve_in_place(&self, x: &mut DVector<f64>) {
        let n = self.dim();
        let l = &self.l;
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[(i, k)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.solve_mat(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize(&inv)
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetrizes and floors eigenvalues at `floor`. Fails when the matrix has a
/// non-finite entry or an eigenvalue below `-tolerance · max(1, ‖a‖)`.
pub fn repair_psd(a: &DMatrix<f64>, floor: f64, tolerance: f64) -> Result<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FmmError::IllConditioned("non-finite covariance entry".into()));
    }
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -tolerance * scale {
        return Err(FmmError::IllConditioned(format!(
            "covariance has eigenvalue {min:e}"
        )));
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    Ok(symmetrize(
        &(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()),
    ))
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped to 0).
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// `Diag(blocks…)` as a dense matrix.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `Σ_ij a_ij b_ji = tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

/// Quadratic form `xᵀ A y`.
pub fn quad(x: &DVector<f64>, a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    x.dot(&(a * y))
}
