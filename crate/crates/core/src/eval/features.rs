use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::tensor::{Graph, Tensor};

/// A (C, H, W) activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Spatial mean of every channel.
    pub fn pooled(&self) -> Vec<f64> {
        let hw = self.positions();
        self.data.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
    }
}

/// Maps an image to one or more activation maps; the last map's spatial mean
/// is the feature vector used for distribution statistics.
pub trait FeatureExtractor {
    fn maps(&self, img: &Image) -> Result<Vec<FeatureMap>>;

    fn pooled(&self, img: &Image) -> Result<Vec<f64>> {
        let maps = self.maps(img)?;
        let last = maps.last().ok_or_else(|| Error::Shape("extractor produced no feature maps".into()))?;
        Ok(last.pooled())
    }
}

/// The image itself as a single feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelExtractor;

fn single_image(img: &Image) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("expected one image, got a batch of {n}")));
    }
    Ok((c, h, w))
}

impl FeatureExtractor for PixelExtractor {
    fn maps(&self, img: &Image) -> Result<Vec<FeatureMap>> {
        let (channels, height, width) = single_image(img)?;
        Ok(vec![FeatureMap { channels, height, width, data: img.data().iter().map(|&v| v as f64).collect() }])
    }
}

/// Fixed random strided convolutions (4×4, stride 2, leaky ReLU) standing in
/// for a pretrained feature network.
#[derive(Clone, Debug)]
pub struct RandomProjectionExtractor {
    weights: Vec<Tensor<f64>>,
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 17;
pub const DEFAULT_FEATURE_DIM: usize = 64;

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new(3, &[16, 32, DEFAULT_FEATURE_DIM], DEFAULT_EXTRACTOR_SEED)
    }
}

impl RandomProjectionExtractor {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let weights = widths
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 16) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                let data = (0..cout * cin * 16).map(|_| dist.sample(&mut rng)).collect();
                let w = Tensor::from_vec(&[cout, cin, 4, 4], data).expect("consistent weight");
                cin = cout;
                w
            })
            .collect();
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.shape()[0])
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn maps(&self, img: &Image) -> Result<Vec<FeatureMap>> {
        single_image(img)?;
        let mut g = Graph::<f64>::new();
        let mut h = g.constant(img.cast());
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let wv = g.constant(w.clone());
            let conv = g.conv2d(h, wv, None, 2, 1)?;
            h = g.leaky_relu(conv, 0.2);
            let (_, channels, height, width) = g.value(h).dims4()?;
            out.push(FeatureMap { channels, height, width, data: g.value(h).data().to_vec() });
        }
        Ok(out)
    }
}

/// Mean over layers and spatial positions of the Euclidean distance between
/// unit-normalized feature columns.
pub fn patch_perceptual_distance<E: FeatureExtractor + ?Sized>(a: &Image, b: &Image, extractor: &E) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("perceptual distance: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ma, mb) = (extractor.maps(a)?, extractor.maps(b)?);
    let mut total = 0.0;
    for (fa, fb) in ma.iter().zip(&mb) {
        let hw = fa.positions();
        let column = |m: &FeatureMap, pos: usize| -> Vec<f64> {
            let col: Vec<f64> = (0..m.channels).map(|c| m.data[c * hw + pos]).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            col.into_iter().map(|v| v / norm).collect()
        };
        let mut layer = 0.0;
        for pos in 0..hw {
            let (ca, cb) = (column(fa, pos), column(fb, pos));
            layer += ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
        total += layer / hw as f64;
    }
    Ok(total / ma.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::image_batch;
    use rand::Rng;

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        image_batch(1, 3, size, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_extractor_shapes() {
        let ex = RandomProjectionExtractor::default();
        let maps = ex.maps(&random_image(0, 32)).unwrap();
        assert_eq!(maps.iter().map(|m| (m.channels, m.height)).collect::<Vec<_>>(), vec![(16, 16), (32, 8), (64, 4)]);
        assert_eq!(ex.pooled(&random_image(0, 32)).unwrap().len(), 64);
        assert_eq!(ex.dim(), 64);
    }

    #[test]
    fn perceptual_distance_properties() {
        let ex = RandomProjectionExtractor::default();
        for seed in 0..5 {
            let a = random_image(seed, 16);
            let b = random_image(seed + 100, 16);
            assert_eq!(patch_perceptual_distance(&a, &a, &ex).unwrap(), 0.0);
            let ab = patch_perceptual_distance(&a, &b, &ex).unwrap();
            assert!((ab - patch_perceptual_distance(&b, &a, &ex).unwrap()).abs() < 1e-12);
            let inverted = a.map(|v| -v);
            let nudged = a.map(|v| v + 0.01);
            assert!(patch_perceptual_distance(&a, &inverted, &ex).unwrap() > patch_perceptual_distance(&a, &nudged, &ex).unwrap());
        }
        assert!(patch_perceptual_distance(&random_image(0, 16), &random_image(0, 8), &ex).is_err());
    }

    #[test]
    fn pixel_extractor_on_single_pixels() {
        let img = Tensor::from_vec(&[1, 3, 1, 1], vec![0.1f32, -0.2, 0.3]).unwrap();
        let pooled = PixelExtractor.pooled(&img).unwrap();
        let expected = [0.1f32 as f64, -0.2f32 as f64, 0.3f32 as f64];
        assert_eq!(pooled, expected);
    }
}
