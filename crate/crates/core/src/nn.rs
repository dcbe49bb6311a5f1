//! Parameter storage and the small set of layer blocks the networks are made of.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Std of the zero-mean Gaussian used for conv and dense weights.
pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors of one network, in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Sum of element counts over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, _, t)| t.numel()).sum()
    }

    /// Replace a parameter's value, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?}, given {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Register every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }

    /// SHA-256 over names, shapes and values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn gaussian<T: Element, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Tanh,
}

fn activate<T: Element>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::None => x,
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
        Activation::Tanh => g.tanh(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Forward,
    /// Transposed convolution with the given output padding.
    Transposed { output_pad: usize },
}

/// Convolution followed by optional instance normalization and activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub norm: bool,
    pub activation: Activation,
}

impl ConvBlock {
    /// Convs feeding an instance norm carry no bias (the norm cancels it).
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let wshape = match spec.kind {
            ConvKind::Forward => [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            ConvKind::Transposed { .. } => [spec.in_channels, spec.out_channels, spec.kernel, spec.kernel],
        };
        let weight = store.add(format!("{name}.weight"), gaussian(&wshape, INIT_STD, rng));
        let (bias, norm) = if spec.norm {
            let gamma = store.add(format!("{name}.norm.gamma"), Tensor::full(&[spec.out_channels], T::one()));
            let beta = store.add(format!("{name}.norm.beta"), Tensor::zeros(&[spec.out_channels]));
            (None, Some((gamma, beta)))
        } else {
            (Some(store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]))), None)
        };
        Self {
            kind: spec.kind,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            weight,
            bias,
            norm,
            activation: spec.activation,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (x, zero_pad) = match self.padding {
            Padding::Zero(n) => (x, n),
            Padding::Reflect(n) => (g.reflect_pad(x, n)?, 0),
        };
        let w = p.var(self.weight);
        let b = self.bias.map(|b| p.var(b));
        let mut y = match self.kind {
            ConvKind::Forward => g.conv2d(x, w, b, self.stride, zero_pad)?,
            ConvKind::Transposed { output_pad } => g.conv_transpose2d(x, w, b, self.stride, zero_pad, output_pad)?,
        };
        if let Some((gamma, beta)) = self.norm {
            y = g.instance_norm(y, Some(p.var(gamma)), Some(p.var(beta)), NORM_EPS)?;
        }
        Ok(activate(g, y, self.activation))
    }
}

/// Stack of dense layers, ReLU between layers and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    pub widths: Vec<usize>,
}

impl Mlp {
    /// Dense weights are He-normal: at std 0.02 the embedding starts near 1e-3
    /// of the trunk features it is concatenated with and the nets learn to ignore it.
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add(format!("{name}.{i}.weight"), gaussian(&[w[1], w[0]], (2.0 / w[0] as f64).sqrt(), rng));
                let bias = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[w[1]]));
                (weight, bias)
            })
            .collect();
        Self { layers, widths: widths.to_vec() }
    }

    /// Number of scalars a dense stack with these widths holds.
    pub fn parameter_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn last_layer(&self) -> Option<(ParamId, ParamId)> {
        self.layers.last().copied()
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.linear(h, p.var(w), Some(p.var(b)))?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_parameter_arithmetic() {
        // a single 3 -> 64 layer with bias
        assert_eq!(Mlp::parameter_count(&[3, 64]), 3 * 64 + 64);
        assert_eq!(Mlp::parameter_count(&[3, 64]), 256);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Mlp::new(&mut store, "mlp", &[3, 64, 64, 64], &mut rng);
        assert_eq!(store.count(), Mlp::parameter_count(&[3, 64, 64, 64]));
    }

    #[test]
    fn init_scheme() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec {
            kind: ConvKind::Forward,
            in_channels: 32,
            out_channels: 32,
            kernel: 3,
            stride: 1,
            padding: Padding::Reflect(1),
            norm: true,
            activation: Activation::Relu,
        };
        let block = ConvBlock::new(&mut store, "c", spec, &mut rng);
        let w = store.get(block.weight_id());
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((std - INIT_STD).abs() < 0.002, "std {std}");
        assert_eq!(store.get(store.id_of("c.norm.gamma").unwrap()).data(), &[1.0; 32][..]);
        assert!(store.id_of("c.bias").is_none());
    }

    #[test]
    fn mlp_weights_are_he_scaled_and_biases_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&mut store, "m", &[64, 128], &mut rng);
        let (w, b) = mlp.last_layer().unwrap();
        let data = store.get(w).data();
        let std = (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt();
        assert!((std - (2.0f64 / 64.0).sqrt()).abs() < 0.01, "std {std}");
        assert!(store.get(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2]));
        assert!(store.set("a", Tensor::zeros(&[3])).is_err());
        assert!(store.set("b", Tensor::zeros(&[2])).is_err());
        store.set("a", Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(store.count(), 2);
    }
}
