use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::model::{p_batch, Generator};
use crate::tensor::Graph;

/// Spatially averaged activations right after image features and the
/// p-embedding are first mixed, for every (image, p) combination, image-major.
pub fn bottleneck_activations(gen: &Generator<f32>, images: &[Image], p_grid: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len() * p_grid.len());
    for img in images {
        for p in p_grid {
            let mut g = Graph::new();
            let bound = crate::model::Translator::params(gen).bind(&mut g, false);
            let x = g.constant(img.clone());
            let pv = g.constant(p_batch(p, 1));
            let trace = gen.forward_traced(&mut g, &bound, x, pv)?;
            let pooled = g.spatial_mean(trace.post_mix)?;
            out.push(g.value(pooled).data().iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

/// Top principal components of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Per input vector, its coordinates along the retained components.
    pub projections: Vec<Vec<f64>>,
    /// Fraction of the total variance carried by each retained component.
    pub explained_variance: Vec<f64>,
    /// Retained components, one unit vector each.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// Center `vectors` and project them onto their top three principal components
/// (fewer if the dimension is smaller).
pub fn latent_pca(vectors: &[Vec<f64>]) -> Result<Pca> {
    let n = vectors.len();
    if n < 4 {
        return Err(Error::Config(format!("latent PCA needs at least 4 activation vectors, got {n}")));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("activation vectors must share a non-zero length".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let total: f64 = cov.trace();
    if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Numeric("activations have zero variance; PCA is undefined".into()));
    }
    let eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = d.min(3);
    let components: Vec<Vec<f64>> = order[..k].iter().map(|&c| eig.eigenvectors.column(c).iter().copied().collect()).collect();
    let projections = (0..n)
        .map(|i| components.iter().map(|c| (0..d).map(|j| centered[(i, j)] * c[j]).sum()).collect())
        .collect();
    let eigenvalues: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
    let explained_variance = eigenvalues[..k].iter().map(|l| l / total).collect();
    Ok(Pca { projections, explained_variance, components, mean, eigenvalues })
}

impl Pca {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pc1,pc2,pc3\n");
        for p in &self.projections {
            let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            row.resize(3, "0".into());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (d - j) as f64).collect()).collect()
    }

    #[test]
    fn rank_one_data() {
        let pts: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64, 2.0 * t as f64, -(t as f64), 0.5]).collect();
        let pca = latent_pca(&pts).unwrap();
        assert!(pca.explained_variance[0] >= 0.999);
        assert!(pca.explained_variance.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let same = vec![vec![1.0, 2.0]; 5];
        let err = latent_pca(&same).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
        assert!(latent_pca(&cloud(3, 4, 0)).is_err());
    }

    #[test]
    fn reconstruction_error_matches_discarded_variance() {
        let pts = cloud(40, 6, 3);
        let pca = latent_pca(&pts).unwrap();
        let n = pts.len();
        let mut err = 0.0;
        for (p, proj) in pts.iter().zip(&pca.projections) {
            for j in 0..6 {
                let rec: f64 = pca.mean[j] + proj.iter().zip(&pca.components).map(|(a, c)| a * c[j]).sum::<f64>();
                err += (p[j] - rec).powi(2);
            }
        }
        let discarded: f64 = pca.eigenvalues[3..].iter().sum();
        assert!((err / (n - 1) as f64 - discarded).abs() <= 1e-6);
    }

    proptest! {
        #[test]
        fn projections_invariant_under_rotation(seed in 0u64..1000, angle in 0.0f64..std::f64::consts::TAU) {
            let pts = cloud(12, 4, seed);
            let (c, s) = (angle.cos(), angle.sin());
            let rotated: Vec<Vec<f64>> = pts.iter().map(|p| vec![c * p[0] - s * p[2], p[1], s * p[0] + c * p[2], p[3]]).collect();
            let a = latent_pca(&pts).unwrap();
            let b = latent_pca(&rotated).unwrap();
            for k in 0..3 {
                let dot: f64 = a.projections.iter().zip(&b.projections).map(|(pa, pb)| pa[k] * pb[k]).sum();
                let sign = dot.signum();
                for (pa, pb) in a.projections.iter().zip(&b.projections) {
                    prop_assert!((pa[k] - sign * pb[k]).abs() < 1e-6);
                }
            }
        }
    }
}
