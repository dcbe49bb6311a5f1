use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::adopt_params;
use super::{check_p, Critic};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, ConvBlock, ConvKind, ConvSpec, Mlp, ParamStore, Padding};
use crate::tensor::{conv_output_size, Element, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorInjection {
    /// Concatenate once, right after the image-only stem convolution.
    AfterStemOnce,
    /// Concatenate in front of every convolution after the stem.
    AllConvs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 convolutions (stem included).
    pub n_layers: usize,
    pub p_dim: usize,
    pub p_embed_dim: usize,
    pub p_mlp_layers: usize,
    pub injection: DiscriminatorInjection,
    pub n_scales: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            base_width: 64,
            n_layers: 3,
            p_dim: 1,
            p_embed_dim: 64,
            p_mlp_layers: 3,
            injection: DiscriminatorInjection::AfterStemOnce,
            n_scales: 1,
        }
    }
}

const KERNEL: usize = 4;
const MAX_WIDTH_MULT: usize = 8;

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("discriminator: {m}")));
        if self.in_channels == 0 || self.base_width == 0 || self.n_layers == 0 {
            return fail("in_channels, base_width and n_layers must be positive".into());
        }
        if self.n_scales == 0 {
            return fail("n_scales must be at least 1".into());
        }
        if self.p_dim > 0 && (self.p_embed_dim == 0 || self.p_mlp_layers == 0) {
            return fail("a conditioned discriminator needs p_embed_dim > 0 and p_mlp_layers > 0".into());
        }
        for scale in 0..self.n_scales {
            let size = self.image_size >> scale;
            if self.score_map_size(size).is_none() {
                return fail(format!("input of {size}px at scale {scale} is too small for {} layers", self.n_layers));
            }
        }
        Ok(())
    }

    /// Side of the patch score map for a `size`×`size` input.
    pub fn score_map_size(&self, size: usize) -> Option<usize> {
        let mut s = size;
        for _ in 0..self.n_layers {
            s = conv_output_size(s, KERNEL, 2, 1)?;
        }
        s = conv_output_size(s, KERNEL, 1, 1)?;
        conv_output_size(s, KERNEL, 1, 1).filter(|&v| v > 0)
    }

    pub fn embed_channels(&self) -> usize {
        if self.p_dim == 0 {
            0
        } else {
            self.p_embed_dim
        }
    }

    fn width(&self, i: usize) -> usize {
        self.base_width * (1 << i).min(MAX_WIDTH_MULT)
    }
}

#[derive(Clone, Debug)]
struct ScaleNet {
    mlp: Option<Mlp>,
    stem: ConvBlock,
    /// Convs after the stem; the flag marks a p concatenation in front.
    body: Vec<(ConvBlock, bool)>,
}

/// Patch discriminator: image-only stem, p-embedding concatenated at the
/// configured site(s), a patch score map, and its spatial mean.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    cfg: DiscriminatorConfig,
    store: ParamStore<T>,
    scales: Vec<ScaleNet>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorTrace {
    pub score_maps: Vec<Var>,
    pub scores: Vec<Var>,
}

impl<T: Element> Discriminator<T> {
    pub fn build<R: Rng>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let e = cfg.embed_channels();
        let scales = (0..cfg.n_scales)
            .map(|s| {
                let prefix = format!("scale{s}");
                let mlp = (cfg.p_dim > 0).then(|| {
                    let widths: Vec<usize> =
                        std::iter::once(cfg.p_dim).chain(std::iter::repeat_n(cfg.p_embed_dim, cfg.p_mlp_layers)).collect();
                    Mlp::new(&mut store, &format!("{prefix}.p_mlp"), &widths, rng)
                });
                let stem = ConvBlock::new(
                    &mut store,
                    &format!("{prefix}.stem"),
                    ConvSpec {
                        kind: ConvKind::Forward,
                        in_channels: cfg.in_channels,
                        out_channels: cfg.width(0),
                        kernel: KERNEL,
                        stride: 2,
                        padding: Padding::Zero(1),
                        norm: false,
                        activation: Activation::LeakyRelu,
                    },
                    rng,
                );
                let mut body = Vec::new();
                let total = cfg.n_layers + 1;
                for i in 1..=total {
                    let last = i == total;
                    let inject = match cfg.injection {
                        DiscriminatorInjection::AfterStemOnce => i == 1,
                        DiscriminatorInjection::AllConvs => true,
                    };
                    let in_channels = cfg.width(i - 1) + if inject { e } else { 0 };
                    let (out_channels, stride, activation) = if last {
                        (1, 1, Activation::None)
                    } else if i < cfg.n_layers {
                        (cfg.width(i), 2, Activation::LeakyRelu)
                    } else {
                        (cfg.width(i), 1, Activation::LeakyRelu)
                    };
                    let conv = ConvBlock::new(
                        &mut store,
                        &format!("{prefix}.conv{i}"),
                        ConvSpec {
                            kind: ConvKind::Forward,
                            in_channels,
                            out_channels,
                            kernel: KERNEL,
                            stride,
                            padding: Padding::Zero(1),
                            norm: !last && !inject,
                            activation,
                        },
                        rng,
                    );
                    body.push((conv, inject));
                }
                ScaleNet { mlp, stem, body }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), store, scales })
    }

    pub fn from_params(cfg: &DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        let mut net = Self::build(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        adopt_params(&mut net.store, params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, params: &Bound, x: Var, p: Var) -> Result<DiscriminatorTrace> {
        check_p(g, x, p, self.cfg.p_dim)?;
        let (n, c, _, _) = g.value(x).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {:?}",
                self.cfg.in_channels,
                g.shape(x)
            )));
        }
        let mut score_maps = Vec::with_capacity(self.scales.len());
        let mut scores = Vec::with_capacity(self.scales.len());
        let mut input = x;
        for (s, net) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input)?;
            }
            let embedding = match &net.mlp {
                Some(mlp) => Some(mlp.forward(g, params, p)?),
                None => None,
            };
            let mut h = net.stem.forward(g, params, input)?;
            for (conv, inject) in &net.body {
                if let Some(e) = embedding.filter(|_| *inject) {
                    let shape = g.shape(h).to_vec();
                    let tiled = g.tile(e, shape[2], shape[3])?;
                    h = g.concat(&[h, tiled])?;
                }
                h = conv.forward(g, params, h)?;
            }
            score_maps.push(h);
            let pooled = g.spatial_mean(h)?;
            scores.push(g.reshape(pooled, &[n])?);
        }
        Ok(DiscriminatorTrace { score_maps, scores })
    }
}

impl<T: Element> Critic<T> for Discriminator<T> {
    fn p_dim(&self) -> usize {
        self.cfg.p_dim
    }

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn score(&self, g: &mut Graph<T>, params: &Bound, x: Var, p: Var) -> Result<Vec<Var>> {
        Ok(self.forward_traced(g, params, x, p)?.scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{image_batch, p_batch, run_critic};
    use crate::tensor::Tensor;

    fn images(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        image_batch(n, 3, size, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn scalar_output_per_image() {
        let cfg = DiscriminatorConfig::default();
        let net = Discriminator::<f64>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let scores = run_critic(&net, &images(2, 64, 1), &p_batch(&[0.5], 2)).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].len(), 2);
    }

    #[test]
    fn score_is_mean_of_patch_map() {
        let cfg = DiscriminatorConfig { base_width: 8, ..Default::default() };
        assert_eq!(cfg.score_map_size(64), Some(6));
        let net = Discriminator::<f64>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut g = Graph::new();
        let bound = net.params().bind(&mut g, false);
        let x = g.constant(images(1, 64, 3));
        let p = g.constant(p_batch(&[0.25], 1));
        let trace = net.forward_traced(&mut g, &bound, x, p).unwrap();
        let map = g.value(trace.score_maps[0]);
        assert_eq!(map.shape(), &[1, 1, 6, 6]);
        let mut total = 0.0;
        for v in map.data() {
            total += *v;
        }
        let mean = total / 36.0;
        let score = g.value(trace.scores[0]).data()[0];
        assert!((score - mean).abs() < 1e-12);
    }

    #[test]
    fn unconditional_scores_ignore_p() {
        let cfg = DiscriminatorConfig { p_dim: 0, base_width: 8, image_size: 32, ..Default::default() };
        let net = Discriminator::<f64>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = images(1, 32, 4);
        let a = run_critic(&net, &x, &p_batch(&[0.1], 1)).unwrap();
        let b = run_critic(&net, &x, &p_batch(&[0.9, 0.3], 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioned_scores_depend_on_p() {
        for injection in [DiscriminatorInjection::AfterStemOnce, DiscriminatorInjection::AllConvs] {
            let cfg = DiscriminatorConfig { base_width: 8, image_size: 32, injection, ..Default::default() };
            let net = Discriminator::<f64>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let x = images(1, 32, 4);
            let a = run_critic(&net, &x, &p_batch(&[0.0], 1)).unwrap();
            let b = run_critic(&net, &x, &p_batch(&[1.0], 1)).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn multi_scale_returns_one_score_per_scale() {
        let cfg = DiscriminatorConfig { base_width: 8, image_size: 32, n_layers: 2, n_scales: 2, ..Default::default() };
        let net = Discriminator::<f64>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let scores = run_critic(&net, &images(3, 32, 1), &p_batch(&[0.3], 3)).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| s.len() == 3));
    }

    #[test]
    fn too_small_inputs_are_rejected() {
        let cfg = DiscriminatorConfig { image_size: 16, n_layers: 3, n_scales: 2, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = DiscriminatorConfig { n_scales: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
