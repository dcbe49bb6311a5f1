use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::FeatureExtractor;
use crate::error::{Error, Result};
use crate::imageio::Image;

/// Sample mean and unbiased covariance of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let n = vectors.len();
        if n < 2 {
            return Err(Error::Config(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = vectors[0].len();
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let data = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
        let mu = DVector::from_fn(d, |j, _| data.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Stats of the pooled extractor features of `images`.
pub fn extract_stats<E: FeatureExtractor + ?Sized>(images: &[Image], extractor: &E) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Config(format!("feature statistics need at least 2 images, got {}", images.len())));
    }
    let vectors = images.iter().map(|im| extractor.pooled(im)).collect::<Result<Vec<_>>>()?;
    FeatureStats::from_vectors(&vectors)
}

fn eigen(m: DMatrix<f64>) -> Option<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let e = eigen((m + m.transpose()) * 0.5)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Some(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `Tr((Σa·Σb)^½)` computed as `Tr((√Σa·Σb·√Σa)^½)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ra = psd_sqrt(a)?;
    let m = &ra * b * &ra;
    let e = eigen((&m + m.transpose()) * 0.5)?;
    Some(e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)`, clamped at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let tr = match trace_sqrt_product(&a.sigma, &b.sigma) {
        Some(t) => t,
        None => {
            let eye = DMatrix::<f64>::identity(a.dim(), a.dim()) * 1e-6;
            trace_sqrt_product(&(&a.sigma + &eye), &(&b.sigma + &eye))
                .ok_or_else(|| Error::Numeric("matrix square root failed after 1e-6 regularization".into()))?
        }
    };
    let d = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * tr;
    if !d.is_finite() {
        return Err(Error::Numeric(format!("non-finite Fréchet distance {d}")));
    }
    Ok(d.max(0.0))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            out[i] = r;
        }
        start = end + 1;
    }
    out
}

/// Spearman rank correlation. A constant input has no rank order and yields 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!("spearman needs two equal lists of >= 2 values, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spearman input is not finite".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mu: &[f64], sigma: DMatrix<f64>) -> FeatureStats {
        FeatureStats { mu: DVector::from_column_slice(mu), sigma, n: 10 }
    }

    #[test]
    fn hand_statistics() {
        let s = FeatureStats::from_vectors(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.mu[0], 1.0);
        assert_eq!(s.sigma[(0, 0)], 2.0);
        assert!(FeatureStats::from_vectors(&[vec![1.0]]).is_err());
        let same = FeatureStats::from_vectors(&vec![vec![1.0, 2.0]; 3]).unwrap();
        assert!(same.sigma.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn closed_forms() {
        let eye = DMatrix::identity(2, 2);
        let d = frechet_distance(&stats(&[0.0, 0.0], eye.clone()), &stats(&[1.0, 1.0], eye.clone())).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let a = stats(&[0.0, 0.0], DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])));
        let d = frechet_distance(&a, &stats(&[0.0, 0.0], eye)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &stats(&[0.0], DMatrix::identity(1, 1))).is_err());
    }

    #[test]
    fn spearman_edge_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[10.0, 12.0, 14.0, 16.0, 18.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn one_dimensional_closed_form(ma in -3.0f64..3.0, mb in -3.0f64..3.0, va in 0.01f64..5.0, vb in 0.01f64..5.0) {
            let a = stats(&[ma], DMatrix::from_element(1, 1, va));
            let b = stats(&[mb], DMatrix::from_element(1, 1, vb));
            let expected = (ma - mb).powi(2) + (va.sqrt() - vb.sqrt()).powi(2);
            let d = frechet_distance(&a, &b).unwrap();
            prop_assert!((d - expected).abs() <= 1e-8, "{} vs {}", d, expected);
            prop_assert!((frechet_distance(&b, &a).unwrap() - d).abs() <= 1e-6);
            prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
        }

        #[test]
        fn self_distance_is_zero(values in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let vectors: Vec<Vec<f64>> = values.chunks(3).map(|c| c.to_vec()).collect();
            let s = FeatureStats::from_vectors(&vectors).unwrap();
            prop_assert!(frechet_distance(&s, &s).unwrap() <= 1e-6);
            prop_assert!((&s.sigma - s.sigma.transpose()).amax() == 0.0);
        }
    }
}
