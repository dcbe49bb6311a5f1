use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_p, Translator};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, ConvBlock, ConvKind, ConvSpec, Mlp, ParamStore, Padding};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Where the embedded conditioning vector is concatenated in the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorInjection {
    /// Once, on the bottleneck features leaving the last residual block.
    BottleneckOnce,
    /// At the input of every encoder convolution.
    EncoderAll,
    /// At the input of every decoder convolution.
    DecoderAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_downsample: usize,
    pub n_resblocks: usize,
    pub p_dim: usize,
    pub p_embed_dim: usize,
    pub p_mlp_layers: usize,
    pub injection: GeneratorInjection,
    pub use_skips: bool,
    /// Kernel of the first and last (full-resolution) convolutions.
    pub stem_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            out_channels: 3,
            base_width: 64,
            n_downsample: 2,
            n_resblocks: 6,
            p_dim: 1,
            p_embed_dim: 64,
            p_mlp_layers: 3,
            injection: GeneratorInjection::BottleneckOnce,
            use_skips: false,
            stem_kernel: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.n_downsample) {
            return fail(format!(
                "image_size {} must be divisible by 2^n_downsample = {}",
                self.image_size,
                1usize << self.n_downsample
            ));
        }
        if self.stem_kernel.is_multiple_of(2) || self.stem_kernel / 2 >= self.image_size {
            return fail(format!("stem_kernel {} must be odd and smaller than the image", self.stem_kernel));
        }
        if self.n_resblocks > 0 && self.bottleneck_size() < 2 {
            return fail("residual blocks need a bottleneck of at least 2x2".into());
        }
        if self.p_dim > 0 && (self.p_embed_dim == 0 || self.p_mlp_layers == 0) {
            return fail("a conditioned generator needs p_embed_dim > 0 and p_mlp_layers > 0".into());
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.n_downsample
    }

    /// Embedding width actually concatenated (0 in unconditional mode).
    pub fn embed_channels(&self) -> usize {
        if self.p_dim == 0 {
            0
        } else {
            self.p_embed_dim
        }
    }

    /// Channel width at encoder level `level` (0 = stem).
    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn mlp_widths(&self) -> Vec<usize> {
        if self.p_dim == 0 {
            return Vec::new();
        }
        std::iter::once(self.p_dim).chain(std::iter::repeat_n(self.p_embed_dim, self.p_mlp_layers)).collect()
    }
}

/// Which inputs a decoder conv concatenates in front of the running features.
#[derive(Clone, Debug)]
struct DecoderStage {
    conv: ConvBlock,
    /// Encoder level whose features are concatenated (skip variant).
    skip: Option<usize>,
    embed: bool,
}

/// Hourglass generator: conv encoder, residual bottleneck, transposed-conv
/// decoder, with the p-embedding concatenated at the configured sites.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    store: ParamStore<T>,
    mlp: Option<Mlp>,
    /// Stem then the strided downsampling convs; the flag marks p concatenation.
    encoder: Vec<(ConvBlock, bool)>,
    resblocks: Vec<(ConvBlock, ConvBlock)>,
    decoder: Vec<DecoderStage>,
}

/// Intermediate activations of one generator forward.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTrace {
    /// Image features right before the first concatenation of p.
    pub pre_injection: Var,
    /// The first concatenated tensor (features then embedding channels).
    pub injected: Var,
    /// Output of the first convolution consuming the concatenation.
    pub post_mix: Var,
    pub embedding: Option<Var>,
    pub output: Var,
}

impl<T: Element> Generator<T> {
    pub fn build<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let e = cfg.embed_channels();
        let inj = cfg.injection;
        let n = cfg.n_downsample;
        // convs fed by the p concatenation skip instance norm: a spatially
        // constant input would be cancelled by the per-channel normalization
        let mlp = (cfg.p_dim > 0).then(|| Mlp::new(&mut store, "p_mlp", &cfg.mlp_widths(), rng));

        let mut encoder = Vec::with_capacity(n + 1);
        let enc_inject = inj == GeneratorInjection::EncoderAll;
        let extra = if enc_inject { e } else { 0 };
        let stem = ConvBlock::new(
            &mut store,
            "enc.0",
            ConvSpec {
                kind: ConvKind::Forward,
                in_channels: cfg.in_channels + extra,
                out_channels: cfg.width_at(0),
                kernel: cfg.stem_kernel,
                stride: 1,
                padding: Padding::Reflect(cfg.stem_kernel / 2),
                norm: !enc_inject,
                activation: Activation::Relu,
            },
            rng,
        );
        encoder.push((stem, enc_inject));
        for level in 1..=n {
            let conv = ConvBlock::new(
                &mut store,
                &format!("enc.{level}"),
                ConvSpec {
                    kind: ConvKind::Forward,
                    in_channels: cfg.width_at(level - 1) + extra,
                    out_channels: cfg.width_at(level),
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Zero(1),
                    norm: !enc_inject,
                    activation: Activation::Relu,
                },
                rng,
            );
            encoder.push((conv, enc_inject));
        }

        let bw = cfg.width_at(n);
        let resblocks = (0..cfg.n_resblocks)
            .map(|i| {
                let spec = |activation| ConvSpec {
                    kind: ConvKind::Forward,
                    in_channels: bw,
                    out_channels: bw,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Reflect(1),
                    norm: true,
                    activation,
                };
                let a = ConvBlock::new(&mut store, &format!("res.{i}.a"), spec(Activation::Relu), rng);
                let b = ConvBlock::new(&mut store, &format!("res.{i}.b"), spec(Activation::None), rng);
                (a, b)
            })
            .collect();

        let mut decoder = Vec::with_capacity(n + 1);
        for level in (1..=n).rev() {
            let skip = (cfg.use_skips && level < n).then_some(level);
            let embed = e > 0
                && (skip.is_some()
                    || inj == GeneratorInjection::DecoderAll
                    || (inj == GeneratorInjection::BottleneckOnce && level == n));
            let in_channels =
                cfg.width_at(level) + skip.map_or(0, |s| cfg.width_at(s)) + if embed { e } else { 0 };
            let conv = ConvBlock::new(
                &mut store,
                &format!("dec.{level}"),
                ConvSpec {
                    kind: ConvKind::Transposed { output_pad: 1 },
                    in_channels,
                    out_channels: cfg.width_at(level - 1),
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Zero(1),
                    norm: !embed,
                    activation: Activation::Relu,
                },
                rng,
            );
            decoder.push(DecoderStage { conv, skip, embed });
        }
        let skip = cfg.use_skips.then_some(0);
        let embed = e > 0
            && (skip.is_some()
                || inj == GeneratorInjection::DecoderAll
                || (inj == GeneratorInjection::BottleneckOnce && n == 0));
        let in_channels = cfg.width_at(0) + skip.map_or(0, |_| cfg.width_at(0)) + if embed { e } else { 0 };
        let out = ConvBlock::new(
            &mut store,
            "dec.out",
            ConvSpec {
                kind: ConvKind::Forward,
                in_channels,
                out_channels: cfg.out_channels,
                kernel: cfg.stem_kernel,
                stride: 1,
                padding: Padding::Reflect(cfg.stem_kernel / 2),
                norm: false,
                activation: Activation::Tanh,
            },
            rng,
        );
        decoder.push(DecoderStage { conv: out, skip, embed });

        Ok(Self { cfg: cfg.clone(), store, mlp, encoder, resblocks, decoder })
    }

    /// Rebuild the architecture for `cfg` around stored parameters.
    pub fn from_params(cfg: &GeneratorConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::build(cfg, &mut rng)?;
        adopt_params(&mut net.store, params)?;
        Ok(net)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    pub fn mlp_parameter_count(&self) -> usize {
        self.store.count_prefix("p_mlp.")
    }

    /// Input channel count of the first convolution that consumes the
    /// concatenated embedding, if any.
    pub fn first_injection_channels(&self) -> Option<usize> {
        if self.cfg.embed_channels() == 0 {
            return None;
        }
        self.encoder
            .iter()
            .find(|(_, inj)| *inj)
            .map(|(c, _)| c.in_channels)
            .or_else(|| self.decoder.iter().find(|s| s.embed).map(|s| s.conv.in_channels))
    }

    /// Force the embedding MLP output to zero (last layer weights and bias).
    pub fn zero_embedding(&mut self) {
        if let Some((w, b)) = self.mlp.as_ref().and_then(Mlp::last_layer) {
            for id in [w, b] {
                self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn cast<U: Element>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            mlp: self.mlp.clone(),
            encoder: self.encoder.clone(),
            resblocks: self.resblocks.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, params: &Bound, x: Var, p: Var) -> Result<GeneratorTrace> {
        check_p(g, x, p, self.cfg.p_dim)?;
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.cfg.in_channels || h != w || h % (1 << self.cfg.n_downsample) != 0 {
            return Err(Error::Shape(format!(
                "generator expects {} channels and a square side divisible by {}, got {:?}",
                self.cfg.in_channels,
                1usize << self.cfg.n_downsample,
                g.shape(x)
            )));
        }
        let embedding = match &self.mlp {
            Some(mlp) => Some(mlp.forward(g, params, p)?),
            None => None,
        };
        let mut first: Option<(Var, Var)> = None;
        let mut post_mix = None;
        let mut concat = |g: &mut Graph<T>, parts: Vec<Var>, with_embed: bool| -> Result<(Var, bool)> {
            let mut parts = parts;
            let emb = embedding.filter(|_| with_embed);
            if let Some(e) = emb {
                let s = g.shape(parts[0]).to_vec();
                let tiled = g.tile(e, s[2], s[3])?;
                parts.push(tiled);
            }
            let cat = g.concat(&parts)?;
            let is_first = emb.is_some() && first.is_none();
            if is_first {
                first = Some((parts[0], cat));
            }
            Ok((cat, is_first))
        };

        let mut features = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (conv, inj) in &self.encoder {
            let (input, is_first) = concat(g, vec![h], *inj)?;
            h = conv.forward(g, params, input)?;
            if is_first {
                post_mix = Some(h);
            }
            features.push(h);
        }
        for (a, b) in &self.resblocks {
            let r = a.forward(g, params, h)?;
            let r = b.forward(g, params, r)?;
            h = g.add(h, r)?;
        }
        for stage in &self.decoder {
            let mut parts = vec![h];
            if let Some(level) = stage.skip {
                parts.push(features[level]);
            }
            let (input, is_first) = concat(g, parts, stage.embed)?;
            h = stage.conv.forward(g, params, input)?;
            if is_first {
                post_mix = Some(h);
            }
        }
        let (pre_injection, injected) = first.unwrap_or((h, h));
        Ok(GeneratorTrace { pre_injection, injected, post_mix: post_mix.unwrap_or(h), embedding, output: h })
    }
}

impl<T: Element> Translator<T> for Generator<T> {
    fn p_dim(&self) -> usize {
        self.cfg.p_dim
    }

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn translate(&self, g: &mut Graph<T>, params: &Bound, x: Var, p: Var) -> Result<Var> {
        Ok(self.forward_traced(g, params, x, p)?.output)
    }
}

/// Copy stored values into a freshly built store with identical layout.
pub(crate) fn adopt_params<T: Element>(target: &mut ParamStore<T>, source: ParamStore<T>) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: architecture has {} tensors, checkpoint {}",
            target.len(),
            source.len()
        )));
    }
    for (_, name, t) in source.iter() {
        target.set(name, t.clone())?;
    }
    Ok(())
}

/// Image batch helper for tests and tools: (N, C, S, S) filled from a closure.
pub fn image_batch<T: Element>(n: usize, c: usize, size: usize, mut f: impl FnMut(usize) -> f64) -> Tensor<T> {
    let data = (0..n * c * size * size).map(|i| T::of(f(i))).collect();
    Tensor::from_vec(&[n, c, size, size], data).expect("consistent batch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{p_batch, run_translator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(p_dim: usize) -> GeneratorConfig {
        GeneratorConfig {
            image_size: 16,
            base_width: 8,
            n_downsample: 2,
            n_resblocks: 2,
            p_dim,
            p_embed_dim: 8,
            p_mlp_layers: 2,
            ..GeneratorConfig::default()
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        image_batch(n, 3, size, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GeneratorConfig { p_dim: 3, ..GeneratorConfig::default() };
        let net = Generator::<f32>::build(&cfg, &mut rng).unwrap();
        let x = random_images(1, 64, 1);
        let y = run_translator(&net, &x, &p_batch(&[0.2, 0.5, 0.9], 1)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.max_abs() <= 1.0);
    }

    #[test]
    fn bottleneck_channel_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GeneratorConfig { base_width: 64, n_downsample: 2, p_embed_dim: 64, p_dim: 3, ..Default::default() };
        let net = Generator::<f32>::build(&cfg, &mut rng).unwrap();
        assert_eq!(net.first_injection_channels(), Some(256 + 64));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = GeneratorConfig { image_size: 30, ..small(1) };
        let err = Generator::<f32>::build(&bad, &mut rng).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
        let bad = GeneratorConfig { p_embed_dim: 0, ..small(1) };
        assert!(Generator::<f32>::build(&bad, &mut rng).is_err());
        let bad = GeneratorConfig { stem_kernel: 4, ..small(1) };
        assert!(Generator::<f32>::build(&bad, &mut rng).is_err());
    }

    #[test]
    fn unconditional_mode_has_no_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Generator::<f32>::build(&small(0), &mut rng).unwrap();
        assert_eq!(net.mlp_parameter_count(), 0);
        assert_eq!(net.first_injection_channels(), None);
        let x = random_images(1, 16, 2);
        let empty = Tensor::<f32>::zeros(&[1, 0]);
        let junk = p_batch::<f32>(&[0.7], 1);
        let a = run_translator(&net, &x, &empty).unwrap();
        let b = run_translator(&net, &x, &junk).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn p_dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Generator::<f32>::build(&small(2), &mut rng).unwrap();
        let x = random_images(1, 16, 2);
        let err = run_translator(&net, &x, &p_batch(&[0.1], 1)).unwrap_err();
        assert!(matches!(err, Error::Param(_)));
    }

    #[test]
    fn builds_are_deterministic() {
        let a = Generator::<f32>::build(&small(2), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = Generator::<f32>::build(&small(2), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let c = Generator::<f32>::build(&small(2), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn batched_forward_equals_per_sample_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Generator::<f32>::build(&small(1), &mut rng).unwrap();
        let x = random_images(2, 16, 5);
        let p = Tensor::from_vec(&[2, 1], vec![0.1f32, 0.8]).unwrap();
        let both = run_translator(&net, &x, &p).unwrap();
        let first = run_translator(&net, &x.batch_item(0).unwrap(), &p.batch_item(0).unwrap()).unwrap();
        let second = run_translator(&net, &x.batch_item(1).unwrap(), &p.batch_item(1).unwrap()).unwrap();
        assert_eq!(both, Tensor::stack(&[first, second]).unwrap());
    }

    #[test]
    fn all_injection_sites_and_skip_variant_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_images(1, 16, 7);
        for injection in [GeneratorInjection::BottleneckOnce, GeneratorInjection::EncoderAll, GeneratorInjection::DecoderAll] {
            for use_skips in [false, true] {
                let cfg = GeneratorConfig { injection, use_skips, ..small(2) };
                let net = Generator::<f32>::build(&cfg, &mut rng).unwrap();
                let a = run_translator(&net, &x, &p_batch(&[0.0, 0.0], 1)).unwrap();
                assert_eq!(a.shape(), x.shape());
                assert!(net.first_injection_channels().is_some());
            }
        }
    }

    #[test]
    fn doubling_width_more_than_doubles_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Generator::<f32>::build(&small(1), &mut rng).unwrap().count_parameters();
        let cfg = GeneratorConfig { base_width: 16, ..small(1) };
        let b = Generator::<f32>::build(&cfg, &mut rng).unwrap().count_parameters();
        assert!(b > 2 * a, "{b} vs {a}");
    }

    #[test]
    fn from_params_restores_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Generator::<f32>::build(&small(1), &mut rng).unwrap();
        let copy = Generator::from_params(net.config(), net.params().clone()).unwrap();
        let x = random_images(1, 16, 1);
        let p = p_batch(&[0.4], 1);
        assert_eq!(run_translator(&net, &x, &p).unwrap(), run_translator(&copy, &x, &p).unwrap());
        let other = Generator::<f32>::build(&small(2), &mut rng).unwrap();
        assert!(Generator::from_params(net.config(), other.params().clone()).is_err());
    }
}
