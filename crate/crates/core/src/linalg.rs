//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{OsmacError, Result};

/// Copy of `x` with row `i` multiplied by `w[i]`.
pub fn scale_rows(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    debug_assert_eq!(x.nrows(), w.len());
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        for (v, wi) in col.iter_mut().zip(w) {
            *v *= wi;
        }
    }
    out
}

/// Xᵀ diag(w) X, symmetrized.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let wx = scale_rows(x, w);
    let mut g = x.tr_mul(&wx);
    symmetrize(&mut g);
    g
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Euclidean norm of every row.
pub fn row_norms(x: &DMatrix<f64>) -> Vec<f64> {
    let mut sq = vec![0.0; x.nrows()];
    for col in x.column_iter() {
        for (s, v) in sq.iter_mut().zip(col.iter()) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(OsmacError::Numeric(format!("non-finite entry in {context}")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| OsmacError::Singular {
        context: context.to_string(),
    })
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, context)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    Ok(cholesky(m, context)?.solve(b))
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Singular values sorted in decreasing order.
pub fn singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = x.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Ratio of largest to smallest eigenvalue of a symmetric positive definite matrix,
/// which equals its condition number and that of its inverse.
pub fn spd_condition_number(m: &DMatrix<f64>) -> Result<f64> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        return Err(OsmacError::Singular {
            context: "condition number of information matrix".into(),
        });
    }
    Ok(max / min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_gram_matches_explicit_sum() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let w = [1.0, 2.0, 0.5];
        let g = weighted_gram(&x, &w);
        let mut expect = DMatrix::zeros(2, 2);
        for (i, wi) in w.iter().enumerate() {
            let r = x.row(i).transpose();
            expect += *wi * &r * r.transpose();
        }
        assert!((g - expect).abs().max() < 1e-14);
    }

    #[test]
    fn row_norms_and_inverse() {
        let x = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 1.0]);
        assert_eq!(row_norms(&x), vec![5.0, 1.0]);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let inv = spd_inverse(&m, "test").unwrap();
        assert!((&m * inv - DMatrix::identity(2, 2)).abs().max() < 1e-14);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_inverse(&singular, "test").is_err());
    }

    #[test]
    fn condition_number_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert!((spd_condition_number(&m).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(singular_values(&m), vec![4.0, 1.0]);
    }
}
