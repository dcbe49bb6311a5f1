use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{extract_stats, frechet_distance, patch_perceptual_distance, spearman, FeatureExtractor};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::model::{p_batch, run_translator, Generator};

/// Anything that maps (image, p) to an image.
pub trait GeneratorHandle {
    fn generate(&self, x: &Image, p: &[f64]) -> Result<Image>;
}

impl GeneratorHandle for Generator<f32> {
    fn generate(&self, x: &Image, p: &[f64]) -> Result<Image> {
        run_translator(self, x, &p_batch(p, 1))
    }
}

impl<F: Fn(&Image, &[f64]) -> Result<Image>> GeneratorHandle for F {
    fn generate(&self, x: &Image, p: &[f64]) -> Result<Image> {
        self(x, p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Fréchet distance between extractor statistics of the two sets.
    Frechet,
    /// Mean patch perceptual distance over index-aligned pairs.
    Perceptual,
    /// Mean absolute pixel difference over index-aligned pairs.
    PixelL1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Frechet => "frechet",
            Metric::Perceptual => "perceptual",
            Metric::PixelL1 => "pixel_l1",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frechet" => Ok(Metric::Frechet),
            "perceptual" => Ok(Metric::Perceptual),
            "pixel_l1" | "l1" => Ok(Metric::PixelL1),
            other => Err(Error::Config(format!("unknown metric `{other}` (expected frechet, perceptual or pixel_l1)"))),
        }
    }
}

fn pixel_l1(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("pixel L1: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(sum / a.numel() as f64)
}

/// Distance between two image sets under `metric`.
pub fn set_distance<E: FeatureExtractor + ?Sized>(a: &[Image], b: &[Image], metric: Metric, extractor: &E) -> Result<f64> {
    match metric {
        Metric::Frechet => frechet_distance(&extract_stats(a, extractor)?, &extract_stats(b, extractor)?),
        Metric::Perceptual | Metric::PixelL1 => {
            if a.len() != b.len() || a.is_empty() {
                return Err(Error::Config(format!(
                    "{} pairs images by index and needs equal non-empty sets, got {} and {}",
                    metric.name(),
                    a.len(),
                    b.len()
                )));
            }
            let mut sum = 0.0;
            for (x, y) in a.iter().zip(b) {
                sum += match metric {
                    Metric::PixelL1 => pixel_l1(x, y)?,
                    _ => patch_perceptual_distance(x, y, extractor)?,
                };
            }
            Ok(sum / a.len() as f64)
        }
    }
}

/// `values[i][j]`: distance between images generated with `col_params[j]`
/// and the real set of `row_params[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMatrix {
    pub values: Vec<Vec<f64>>,
    pub row_params: Vec<Vec<f64>>,
    pub col_params: Vec<Vec<f64>>,
    pub metric_name: String,
}

impl SweepMatrix {
    pub fn from_sets<E: FeatureExtractor + ?Sized>(
        generated: &[Vec<Image>],
        reals: &[Vec<Image>],
        grid: &[Vec<f64>],
        metric: Metric,
        extractor: &E,
    ) -> Result<Self> {
        if grid.is_empty() || generated.len() != grid.len() || reals.len() != grid.len() {
            return Err(Error::Config("sweep needs one generated and one real set per grid entry".into()));
        }
        let values = reals
            .iter()
            .map(|real| generated.iter().map(|gen| set_distance(gen, real, metric, extractor)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric("sweep matrix has a negative or non-finite entry".into()));
        }
        Ok(Self { values, row_params: grid.to_vec(), col_params: grid.to_vec(), metric_name: metric.name().into() })
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    /// Per column, whether the diagonal entry is the column minimum (ties pass).
    pub fn diagonal_minimum(&self) -> Vec<bool> {
        (0..self.size()).map(|j| (0..self.size()).all(|i| self.values[j][j] <= self.values[i][j])).collect()
    }

    /// Spearman correlation, pooled over all cells, between `‖p_row − p_col‖`
    /// and the matrix value.
    pub fn distance_correlation(&self) -> Result<f64> {
        let mut gaps = Vec::new();
        let mut vals = Vec::new();
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let gap: f64 = self.row_params[i].iter().zip(&self.col_params[j]).map(|(a, b)| (a - b).powi(2)).sum();
                gaps.push(gap.sqrt());
                vals.push(*v);
            }
        }
        spearman(&gaps, &vals)
    }

    /// CSV with a header naming the generated grid values; each row starts with
    /// its real-set grid value. Vector parametrizations are joined with `;`.
    pub fn to_csv(&self) -> String {
        let label = |p: &[f64]| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
        let mut out = format!("real\\generated({})", self.metric_name);
        for p in &self.col_params {
            let _ = write!(out, ",{}", label(p));
        }
        out.push('\n');
        for (p, row) in self.row_params.iter().zip(&self.values) {
            out.push_str(&label(p));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Generate every input under every grid entry and compare against the real
/// set recorded for each grid entry.
pub fn sweep_matrix<G: GeneratorHandle + ?Sized, E: FeatureExtractor + ?Sized>(
    gen: &G,
    inputs: &[Image],
    real_sets: &[(Vec<f64>, Vec<Image>)],
    grid: &[Vec<f64>],
    metric: Metric,
    extractor: &E,
) -> Result<SweepMatrix> {
    let reals = grid
        .iter()
        .map(|p| {
            real_sets
                .iter()
                .find(|(q, _)| q == p)
                .map(|(_, set)| set.clone())
                .ok_or_else(|| Error::Config(format!("no real set for grid entry {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let generated = grid
        .iter()
        .map(|p| inputs.iter().map(|x| gen.generate(x, p)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    SweepMatrix::from_sets(&generated, &reals, grid, metric, extractor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub p_values: Vec<f64>,
    pub dist_to_source: Vec<f64>,
    pub dist_to_target: Vec<f64>,
    pub rho_source: f64,
    pub rho_target: f64,
}

impl MonotonicityReport {
    pub fn from_distances(p_values: Vec<f64>, dist_to_source: Vec<f64>, dist_to_target: Vec<f64>) -> Result<Self> {
        if p_values.len() < 3 {
            return Err(Error::Config(format!("monotonicity needs at least 3 p values, got {}", p_values.len())));
        }
        if p_values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("p values must be sorted ascending".into()));
        }
        let rho_source = spearman(&p_values, &dist_to_source)?;
        let rho_target = spearman(&p_values, &dist_to_target)?;
        Ok(Self { p_values, dist_to_source, dist_to_target, rho_source, rho_target })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,dist_to_source,dist_to_target\n");
        for ((p, s), t) in self.p_values.iter().zip(&self.dist_to_source).zip(&self.dist_to_target) {
            let _ = writeln!(out, "{p},{s},{t}");
        }
        let _ = writeln!(out, "rho,{},{}", self.rho_source, self.rho_target);
        out
    }
}

/// Distances of generated sets to the source and target sets as the
/// scalar `p` grows; `make_p` turns each scalar into a full parametrization.
#[allow(clippy::too_many_arguments)]
pub fn monotonicity_report<G: GeneratorHandle + ?Sized, E: FeatureExtractor + ?Sized>(
    gen: &G,
    inputs: &[Image],
    source_set: &[Image],
    target_set: &[Image],
    p_values: &[f64],
    make_p: impl Fn(f64) -> Vec<f64>,
    metric: Metric,
    extractor: &E,
) -> Result<MonotonicityReport> {
    if p_values.len() < 3 {
        return Err(Error::Config(format!("monotonicity needs at least 3 p values, got {}", p_values.len())));
    }
    let mut to_source = Vec::with_capacity(p_values.len());
    let mut to_target = Vec::with_capacity(p_values.len());
    for &v in p_values {
        let p = make_p(v);
        let generated = inputs.iter().map(|x| gen.generate(x, &p)).collect::<Result<Vec<_>>>()?;
        to_source.push(set_distance(&generated, source_set, metric, extractor)?);
        to_target.push(set_distance(&generated, target_set, metric, extractor)?);
    }
    MonotonicityReport::from_distances(p_values.to_vec(), to_source, to_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{PixelExtractor, RandomProjectionExtractor};
    use crate::synth::flat_image;

    fn grid(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|v| vec![*v]).collect()
    }

    fn reals(values: &[f64]) -> Vec<(Vec<f64>, Vec<Image>)> {
        values.iter().map(|v| (vec![*v], vec![flat_image(8, *v as f32), flat_image(8, *v as f32 * 0.5)])).collect()
    }

    #[test]
    fn real_sets_as_generated_give_zero_diagonal() {
        let vals = [0.0, 0.25, 0.5, 0.75, 1.0];
        let real = reals(&vals);
        let sets: Vec<Vec<Image>> = real.iter().map(|(_, s)| s.clone()).collect();
        for metric in [Metric::PixelL1, Metric::Perceptual] {
            let m = SweepMatrix::from_sets(&sets, &sets, &grid(&vals), metric, &RandomProjectionExtractor::default());
            let m = m.unwrap();
            assert!((0..5).all(|i| m.values[i][i] == 0.0));
        }
        let m = SweepMatrix::from_sets(&sets, &sets, &grid(&vals), Metric::PixelL1, &PixelExtractor).unwrap();
        assert!(m.diagonal_minimum().iter().all(|b| *b));
        assert!(m.distance_correlation().unwrap() > 0.9);
        assert!(m.to_csv().starts_with("real\\generated(pixel_l1),0,0.25,0.5,0.75,1\n0,0,"));
    }

    #[test]
    fn sweep_with_a_generator_handle() {
        // "generator" that paints the flat image for its p, scaled like the reals
        let gen = |x: &Image, p: &[f64]| -> Result<Image> { Ok(x.map(|v| v * p[0] as f32)) };
        let inputs = vec![flat_image(8, 1.0), flat_image(8, 0.5)];
        let vals = [0.0, 0.5, 1.0];
        let m = sweep_matrix(&gen, &inputs, &reals(&vals), &grid(&vals), Metric::PixelL1, &PixelExtractor).unwrap();
        assert!((0..3).all(|i| m.values[i][i].abs() < 1e-7));
        let single = sweep_matrix(&gen, &inputs, &reals(&vals), &grid(&[0.5]), Metric::PixelL1, &PixelExtractor).unwrap();
        assert_eq!(single.size(), 1);
        assert!(sweep_matrix(&gen, &inputs, &reals(&vals), &grid(&[0.3]), Metric::PixelL1, &PixelExtractor).is_err());
    }

    #[test]
    fn monotonicity_inputs_are_checked() {
        let gen = |x: &Image, p: &[f64]| -> Result<Image> { Ok(x.map(|v| v * (1.0 - p[0] as f32))) };
        let inputs = vec![flat_image(4, 0.8), flat_image(4, 0.6)];
        let target = vec![flat_image(4, 0.0), flat_image(4, 0.0)];
        let r = monotonicity_report(&gen, &inputs, &inputs, &target, &[0.0, 0.5, 1.0], |v| vec![v], Metric::PixelL1, &PixelExtractor)
            .unwrap();
        assert_eq!(r.rho_source, 1.0);
        assert_eq!(r.rho_target, -1.0);
        assert!(MonotonicityReport::from_distances(vec![0.0, 1.0], vec![1.0, 2.0], vec![1.0, 2.0]).is_err());
        assert!(MonotonicityReport::from_distances(vec![1.0, 0.0, 2.0], vec![1.0; 3], vec![1.0; 3]).is_err());
        let flat = MonotonicityReport::from_distances(vec![0.0, 0.5, 1.0], vec![2.0; 3], vec![10.0, 12.0, 14.0]).unwrap();
        assert_eq!(flat.rho_source, 0.0);
        assert_eq!(flat.rho_target, 1.0);
    }
}
