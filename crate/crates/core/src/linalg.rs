//! Helpers for lower-triangular scale factors.
//!
//! Scale factors `L` here are lower triangular and parameterize the
//! covariance `Lᵀ·L` (not `L·Lᵀ`). Draws are therefore `μ + Lᵀ·ε`.

use crate::{Error, Matrix, Result, Vector};

/// Checks that `m` is square, lower triangular, with a positive diagonal.
pub fn validate_lower_scale(m: &Matrix, dim: usize) -> Result<()> {
    check_lower_shape(m, dim)?;
    for i in 0..dim {
        if !(m[(i, i)] > 0.0) {
            return Err(Error::Matrix(format!(
                "diagonal entry {i} must be positive, found {}",
                m[(i, i)]
            )));
        }
    }
    Ok(())
}

/// Like [`validate_lower_scale`] but admits zero diagonal entries
/// (degenerate point-mass beliefs).
pub fn check_lower_shape(m: &Matrix, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::Matrix(format!(
            "expected {dim}x{dim}, found {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            if m[(i, j)] != 0.0 {
                return Err(Error::Matrix(format!(
                    "entry ({i},{j}) above the diagonal is nonzero"
                )));
            }
        }
        if !m[(i, i)].is_finite() || m[(i, i)] < 0.0 {
            return Err(Error::Matrix(format!("diagonal entry {i} is negative")));
        }
    }
    Ok(())
}

/// Covariance `Lᵀ·L` of a lower scale factor.
pub fn covariance_of(scale: &Matrix) -> Matrix {
    scale.transpose() * scale
}

/// Draw `mean + scaleᵀ·eps`.
pub fn affine_draw(mean: &Vector, scale: &Matrix, eps: &Vector) -> Vector {
    mean + scale.tr_mul(eps)
}

/// Lower-triangular `L` with positive diagonal such that `Lᵀ·L = cov`.
pub fn lower_scale_for(cov: &Matrix) -> Result<Matrix> {
    let n = cov.nrows();
    // Reverse index order, take the ordinary Cholesky factor, reverse back.
    let rev = Matrix::from_fn(n, n, |i, j| cov[(n - 1 - i, n - 1 - j)]);
    let chol = rev
        .cholesky()
        .ok_or_else(|| Error::Matrix("covariance is not positive definite".into()))?;
    let m = chol.l();
    // cov = J M Mᵀ J = (J Mᵀ J)ᵀ (J Mᵀ J)
    Ok(Matrix::from_fn(n, n, |i, j| m[(n - 1 - j, n - 1 - i)]))
}

/// Inverse of `Lᵀ·L`.
pub fn precision_of(scale: &Matrix) -> Result<Matrix> {
    let cov = covariance_of(scale);
    cov.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Matrix("covariance is singular".into()))
}

/// Closed-form `KL(N(m0, S0) ‖ N(m1, S1))`. Returns `+∞` when either
/// covariance is singular.
pub fn gaussian_kl(m0: &Vector, s0: &Matrix, m1: &Vector, s1: &Matrix) -> f64 {
    let d = m0.len() as f64;
    let (Some(c0), Some(c1)) = (s0.clone().cholesky(), s1.clone().cholesky()) else {
        return f64::INFINITY;
    };
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let inv1 = c1.inverse();
    let diff = m1 - m0;
    let trace = (&inv1 * s0).trace();
    let quad = diff.dot(&(&inv1 * &diff));
    (0.5 * (trace + quad - d + logdet(&c1) - logdet(&c0))).max(0.0)
}

/// Packs the lower triangle row-major.
pub fn pack_lower(m: &Matrix) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unpack_lower(values: &[f64], n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = values[k];
            k += 1;
        }
    }
    m
}

pub fn rows_to_matrix(rows: &[Vec<f64>], dim: usize) -> Result<Matrix> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Matrix(format!("expected {dim} rows of length {dim}")));
    }
    Ok(Matrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serializes a [`Vector`] as a plain JSON array.
pub mod vector_serde {
    use crate::Vector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lower_scale_reproduces_covariance() {
        let a = Matrix::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.5, 1.1, 0.4, 0.0, 0.7, 0.9]);
        let cov = a.transpose() * &a + Matrix::identity(3, 3) * 0.1;
        let l = lower_scale_for(&cov).unwrap();
        validate_lower_scale(&l, 3).unwrap();
        assert_relative_eq!(covariance_of(&l), cov, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_iff_equal() {
        let m = Vector::from_vec(vec![0.5, -1.0]);
        let s = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(gaussian_kl(&m, &s, &m, &s).abs() < 1e-12);
        let m2 = Vector::from_vec(vec![0.6, -1.0]);
        assert!(gaussian_kl(&m, &s, &m2, &s) > 0.0);
        assert!(gaussian_kl(&m, &s, &m, &(s.clone() * 1.5)) > 0.0);
    }

    #[test]
    fn pack_roundtrip() {
        let l = Matrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0]);
        assert_eq!(unpack_lower(&pack_lower(&l), 3), l);
    }
}
