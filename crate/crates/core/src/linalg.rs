//! Small dense symmetric-matrix helpers over `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>, name: &str) -> Result<Self> {
        if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite { name: name.into() });
        }
        let chol =
            nalgebra::Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite { name: name.into() })?;
        if chol.l_dirty().diagonal().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::NotPositiveDefinite { name: name.into() });
        }
        Ok(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    /// `xᵀ M⁻¹ x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("non-singular triangular factor");
        w.norm_squared()
    }
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax();
    (m - m.transpose()).amax() <= rel_tol * scale
}

/// Lower-triangular `L` with `L Lᵀ = m` for a positive *semi*-definite `m`.
///
/// Zero pivots (within a relative tolerance) are allowed so that perfectly
/// correlated designs can be sampled; a negative pivot is an error.
pub fn psd_cholesky(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if !m.is_square() || !is_symmetric(m, 1e-12) || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { name: name.into() });
    }
    let tol = 1e-12 * m.diagonal().amax().max(1.0);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::NotPositiveDefinite { name: name.into() });
        }
        if d <= tol {
            // rank-deficient column: the remaining entries must vanish too
            for i in (j + 1)..n {
                let mut v = m[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                if v.abs() > 1e-8 * m.diagonal().amax().max(1.0) {
                    return Err(Error::NotPositiveDefinite { name: name.into() });
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
