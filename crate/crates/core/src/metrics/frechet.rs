use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricsError;

/// Diagonal loading used when a side has fewer than `d + 1` samples.
pub const SHRINKAGE: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-9;

/// Gaussian fit of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    n: usize,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    shrunk: bool,
}

impl FeatureStats {
    /// Validates symmetry and positive semi-definiteness.
    pub fn new(n: usize, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self, MetricsError> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(MetricsError::DimensionMismatch { a: d, b: sigma.nrows() });
        }
        if n < 2 {
            return Err(MetricsError::NotEnoughSamples { n });
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(MetricsError::NotPsd("matrix is not symmetric".into()));
        }
        let eig = eigen(&sigma)?;
        let min = eig.eigenvalues.min();
        if min < -PSD_TOL * scale {
            return Err(MetricsError::NotPsd(format!("smallest eigenvalue {min}")));
        }
        Ok(Self { n, mu, sigma, shrunk: false })
    }

    /// Mean and unbiased covariance of `rows`.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let n = rows.len();
        if n < 2 {
            return Err(MetricsError::NotEnoughSamples { n });
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(MetricsError::DimensionMismatch { a: d, b: bad.len() });
        }
        let mut mu = DVector::zeros(d);
        for r in rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= n as f64;
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mu[j]);
        let mut sigma = centered.tr_mul(&centered) / (n - 1) as f64;
        // exact symmetry regardless of summation order
        for i in 0..d {
            for j in 0..i {
                sigma[(i, j)] = sigma[(j, i)];
            }
        }
        Self::new(n, mu, sigma)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn is_shrunk(&self) -> bool {
        self.shrunk
    }

    /// Adds [`SHRINKAGE`] to the diagonal when `n < d + 1`.
    pub fn shrink_if_needed(mut self) -> Self {
        if self.n < self.dim() + 1 && !self.shrunk {
            for i in 0..self.dim() {
                self.sigma[(i, i)] += SHRINKAGE;
            }
            self.shrunk = true;
        }
        self
    }
}

fn eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| MetricsError::Eigen(format!("no convergence for a {}x{} matrix", m.nrows(), m.ncols())))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::Eigen("non-finite eigenvalue".into()));
    }
    Ok(eig)
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    if !m.is_square() {
        return Err(MetricsError::DimensionMismatch { a: m.nrows(), b: m.ncols() });
    }
    let eig = eigen(&symmetrized(m))?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrized(&(v * DMatrix::from_diagonal(&roots) * v.transpose())))
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, at least 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch { a: a.dim(), b: b.dim() });
    }
    let mean_term = (a.mu() - b.mu()).norm_squared();
    let ra = sqrtm_psd(a.sigma())?;
    let inner = symmetrized(&(&ra * b.sigma() * &ra));
    let cross: f64 = eigen(&inner)?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = mean_term + a.sigma().trace() + b.sigma().trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn stats(mu: &[f64], diag: &[f64]) -> FeatureStats {
        FeatureStats::new(10, DVector::from_column_slice(mu), DMatrix::from_diagonal(&DVector::from_column_slice(diag))).unwrap()
    }

    fn random_psd(d: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let x = DMatrix::<f64>::from_fn(d, rank, |_, _| StandardNormal.sample(rng));
        symmetrized(&(&x * x.transpose()))
    }

    #[test]
    fn analytic_cases() {
        assert!((frechet_distance(&stats(&[0.0], &[2.0]), &stats(&[3.0], &[2.0])).unwrap() - 9.0).abs() < 1e-8);
        assert!((frechet_distance(&stats(&[0.0, 0.0], &[1.0, 4.0]), &stats(&[0.0, 0.0], &[1.0, 1.0])).unwrap() - 1.0).abs() < 1e-8);
        let s = stats(&[1.0, 2.0], &[0.5, 3.0]);
        assert!(frechet_distance(&s, &s).unwrap() <= 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            frechet_distance(&stats(&[0.0], &[1.0]), &stats(&[0.0, 0.0], &[1.0, 1.0])),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(FeatureStats::new(5, DVector::zeros(2), asym).is_err());
        let neg = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1.0]));
        assert!(matches!(FeatureStats::new(5, DVector::zeros(2), neg), Err(MetricsError::NotPsd(_))));
        assert!(matches!(
            FeatureStats::from_features(&[vec![1.0]]),
            Err(MetricsError::NotEnoughSamples { n: 1 })
        ));
    }

    #[test]
    fn unbiased_covariance() {
        let s = FeatureStats::from_features(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![5.0, 3.0]]).unwrap();
        assert_eq!(s.mu().as_slice(), &[3.0, 1.0]);
        assert_eq!(s.sigma()[(0, 0)], 4.0);
        assert_eq!(s.sigma()[(1, 1)], 3.0);
        assert_eq!(s.sigma()[(0, 1)], 3.0);
        assert!(!s.clone().shrink_if_needed().is_shrunk());
    }

    #[test]
    fn shrinkage_applies_below_d_plus_one() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, (i * i) as f64, 1.0]).collect();
        let s = FeatureStats::from_features(&rows).unwrap().shrink_if_needed();
        assert!(s.is_shrunk());
        assert_eq!(s.sigma()[(2, 2)], SHRINKAGE);
    }

    #[test]
    fn sqrt_reconstructs_up_to_dim_83() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [1, 2, 5, 17, 40, 83] {
            for rank in [d, (d / 2).max(1)] {
                let m = random_psd(d, rank, &mut rng);
                let r = sqrtm_psd(&m).unwrap();
                let err = (&r * &r - &m).norm() / m.norm();
                assert!(err < 1e-8, "d={d} rank={rank} err={err}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symmetric_and_non_negative(seed in any::<u64>(), d in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                let mu = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
                FeatureStats::new(20, mu, random_psd(d, d, rng)).unwrap()
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-8);
            // the root of a near-singular sigma^2 loses about sqrt(eps) of its scale
            let tol = f64::EPSILON.sqrt() * (1.0 + a.sigma().trace());
            prop_assert!(frechet_distance(&a, &a).unwrap() <= tol);
        }
    }
}
