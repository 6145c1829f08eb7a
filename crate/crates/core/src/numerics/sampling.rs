use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use super::linalg::{cholesky, solve_lower_transpose};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Generator used for every stochastic component.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with stream coordinates (splitmix64 finaliser).
///
/// Used to give every (sweep, entity) pair its own generator so parallel
/// sampling stays bitwise reproducible regardless of thread scheduling.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draw from `N(mean, covariance)`.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &[f64], covariance: &Matrix, rng: &mut R) -> Result<Vec<f64>> {
    if covariance.rows() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            actual: covariance.rows(),
        });
    }
    let l = cholesky(covariance)?;
    let z = standard_normal_vec(mean.len(), rng);
    let lz = l.matvec(&z)?;
    Ok(mean.iter().zip(lz).map(|(m, d)| m + d).collect())
}

/// Draw from `N(mean, precision⁻¹)` without forming the covariance.
pub fn sample_mvn_precision<R: Rng + ?Sized>(mean: &[f64], precision: &Matrix, rng: &mut R) -> Result<Vec<f64>> {
    if precision.rows() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            actual: precision.rows(),
        });
    }
    let l = cholesky(precision)?;
    let z = standard_normal_vec(mean.len(), rng);
    // x = mean + L⁻ᵀ z has covariance (L Lᵀ)⁻¹
    let offset = solve_lower_transpose(&l, &z);
    Ok(mean.iter().zip(offset).map(|(m, d)| m + d).collect())
}

/// Wishart draw via the Bartlett decomposition; `E[W] = dof · scale`.
pub fn sample_wishart<R: Rng + ?Sized>(scale: &Matrix, dof: f64, rng: &mut R) -> Result<Matrix> {
    let p = scale.rows();
    if dof <= (p as f64) - 1.0 {
        return Err(Error::invalid(format!(
            "wishart degrees of freedom {dof} must exceed dimension - 1 = {}",
            p as f64 - 1.0
        )));
    }
    let l = cholesky(scale)?;
    let mut a = Matrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| Error::invalid(format!("chi-squared: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l.matmul(&a)?;
    let mut w = la.matmul(&la.transpose())?;
    w.symmetrize();
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanishing_covariance_returns_mean() {
        let mut rng = seeded_rng(3);
        let cov = Matrix::from_diagonal(&[1e-20, 1e-20, 1e-20]);
        let x = sample_mvn(&[1.0, -2.0, 0.5], &cov, &mut rng).unwrap();
        for (a, b) in x.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn non_spd_covariance_rejected() {
        let mut rng = seeded_rng(3);
        let cov = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(sample_mvn(&[0.0, 0.0], &cov, &mut rng).is_err());
        assert!(sample_wishart(&cov, 5.0, &mut rng).is_err());
    }

    #[test]
    fn wishart_rejects_small_dof() {
        let mut rng = seeded_rng(3);
        assert!(sample_wishart(&Matrix::identity(3), 1.5, &mut rng).is_err());
    }

    #[test]
    fn mvn_moments_match() {
        let mut rng = seeded_rng(11);
        let mean = [1.0, -0.5];
        let cov = Matrix::from_rows(&[vec![2.0, 0.6], vec![0.6, 1.0]]);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_mvn(&mean, &cov, &mut rng).unwrap()).collect();
        let mut m = [0.0; 2];
        for d in &draws {
            m[0] += d[0] / n as f64;
            m[1] += d[1] / n as f64;
        }
        for i in 0..2 {
            let sigma = cov[(i, i)].sqrt();
            assert!((m[i] - mean[i]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
        let mut c = Matrix::zeros(2, 2);
        for d in &draws {
            let centered = [d[0] - m[0], d[1] - m[1]];
            c.add_outer(1.0 / (n as f64 - 1.0), &centered, &centered);
        }
        assert!(c.frobenius_distance(&cov) / cov.frobenius_norm() < 0.05);
    }

    #[test]
    fn precision_sampler_matches_covariance() {
        let mut rng = seeded_rng(5);
        let precision = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let cov = super::super::linalg::spd_inverse(&precision).unwrap();
        let n = 50_000;
        let mut c = Matrix::zeros(2, 2);
        for _ in 0..n {
            let d = sample_mvn_precision(&[0.0, 0.0], &precision, &mut rng).unwrap();
            c.add_outer(1.0 / n as f64, &d, &d);
        }
        assert!(c.frobenius_distance(&cov) / cov.frobenius_norm() < 0.05);
    }

    #[test]
    fn wishart_mean_is_dof_times_scale() {
        let mut rng = seeded_rng(13);
        let scale = Matrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.5]]);
        let dof = 6.0;
        let n = 10_000;
        let mut mean = Matrix::zeros(2, 2);
        for _ in 0..n {
            let w = sample_wishart(&scale, dof, &mut rng).unwrap();
            mean.add_assign(&w);
        }
        mean.scale(1.0 / n as f64);
        let mut target = scale.clone();
        target.scale(dof);
        for (a, b) in mean.as_slice().iter().zip(target.as_slice()) {
            assert!((a - b).abs() <= 0.05 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[3]), derive_seed(9, &[3]));
    }
}
