use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Cholesky factor `L` (lower triangular) with `L·Lᵀ = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: a.cols(),
        });
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L·x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `A·x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let col = cholesky_solve(&l, &e);
        for r in 0..n {
            inv[(r, c)] = col[r];
        }
    }
    inv.symmetrize();
    Ok(inv)
}

/// Inverse of a general square matrix by Gauss-Jordan elimination with
/// partial pivoting. Returns `None` when a pivot falls below `tolerance`
/// relative to the largest entry.
pub fn general_inverse(a: &Matrix, tolerance: f64) -> Option<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let scale = a.max_abs();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let mut work = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot_row = (col..n).max_by(|&i, &j| work[(i, col)].abs().total_cmp(&work[(j, col)].abs()))?;
        let pivot = work[(pivot_row, col)];
        if pivot.abs() <= tolerance * scale {
            return None;
        }
        if pivot_row != col {
            for c in 0..n {
                let tmp = work[(col, c)];
                work[(col, c)] = work[(pivot_row, c)];
                work[(pivot_row, c)] = tmp;
                let tmp = inv[(col, c)];
                inv[(col, c)] = inv[(pivot_row, c)];
                inv[(pivot_row, c)] = tmp;
            }
        }
        for c in 0..n {
            work[(col, c)] /= pivot;
            inv[(col, c)] /= pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work[(r, col)];
            if factor == 0.0 {
                continue;
            }
            for c in 0..n {
                work[(r, c)] -= factor * work[(col, c)];
                inv[(r, c)] -= factor * inv[(col, c)];
            }
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_factor_is_identity() {
        assert_eq!(cholesky(&Matrix::identity(4)).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn reconstructs_two_by_two() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        assert_eq!(l[(0, 1)], 0.0);
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.frobenius_distance(&a) < 1e-10);
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]]);
        let prod = a.matmul(&spd_inverse(&a).unwrap()).unwrap();
        assert!(prod.frobenius_distance(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn general_inverse_handles_non_symmetric() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 0.0, 0.0], vec![3.0, 1.0, 4.0]]);
        let inv = general_inverse(&a, 1e-12).unwrap();
        assert!(a.matmul(&inv).unwrap().frobenius_distance(&Matrix::identity(3)) < 1e-12);
        let singular = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(general_inverse(&singular, 1e-12).is_none());
    }

    proptest! {
        #[test]
        fn cholesky_round_trips_lower_factor(
            n in 1usize..6,
            entries in proptest::collection::vec(-1.0f64..1.0, 36),
            diag in proptest::collection::vec(0.5f64..2.0, 6),
        ) {
            let mut l = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..i {
                    l[(i, j)] = entries[i * 6 + j];
                }
                l[(i, i)] = diag[i];
            }
            let a = l.matmul(&l.transpose()).unwrap();
            let back = cholesky(&a).unwrap();
            prop_assert!(back.frobenius_distance(&l) < 1e-9);
        }
    }
}
