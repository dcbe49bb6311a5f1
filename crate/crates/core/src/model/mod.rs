//! Parametrization-aware generator and discriminator networks.

mod checkpoint;
mod discriminator;
mod generator;

pub use checkpoint::{read_archive, write_archive, ArchiveEntry, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorInjection, DiscriminatorTrace};
pub use generator::{image_batch, Generator, GeneratorConfig, GeneratorInjection, GeneratorTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Element, Graph, Tensor, Var};

/// A network translating images under a conditioning vector (G or F).
pub trait Translator<T: Element> {
    fn p_dim(&self) -> usize;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// `x` is (N, C, H, W) in [-1, 1]; `p` is (N, p_dim).
    fn translate(&self, g: &mut Graph<T>, params: &Bound, x: Var, p: Var) -> Result<Var>;
}

/// A network scoring (image, p) pairs, one score vector (N) per scale.
pub trait Critic<T: Element> {
    fn p_dim(&self) -> usize;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn score(&self, g: &mut Graph<T>, params: &Bound, x: Var, p: Var) -> Result<Vec<Var>>;
}

/// Generator and discriminator hyperparameters of a full translation system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.p_dim != self.discriminator.p_dim {
            return Err(Error::Config(format!(
                "generator p_dim {} differs from discriminator p_dim {}",
                self.generator.p_dim, self.discriminator.p_dim
            )));
        }
        if self.discriminator.n_scales >= 2 && !self.generator.use_skips {
            return Err(Error::Config(
                "n_scales >= 2 requires the skip/multi-scale variant (generator.use_skips = true)".into(),
            ));
        }
        if self.discriminator.in_channels != self.generator.out_channels {
            return Err(Error::Config("discriminator input channels must match generator output channels".into()));
        }
        Ok(())
    }

    /// Same architecture with a different conditioning dimension.
    pub fn with_p_dim(mut self, p_dim: usize) -> Self {
        self.generator.p_dim = p_dim;
        self.discriminator.p_dim = p_dim;
        self
    }
}

/// Check a (N, p_dim) conditioning batch against the expected dimension.
pub(crate) fn check_p<T: Element>(g: &Graph<T>, x: Var, p: Var, p_dim: usize) -> Result<()> {
    let n = g.shape(x)[0];
    if p_dim > 0 && g.shape(p) != [n, p_dim] {
        return Err(Error::Param(format!(
            "expected p of shape [{n}, {p_dim}], got {:?}",
            g.shape(p)
        )));
    }
    Ok(())
}

/// Evaluation-mode generator forward on concrete tensors.
pub fn run_translator<T: Element, N: Translator<T> + ?Sized>(net: &N, x: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let pv = g.constant(p.clone());
    let y = net.translate(&mut g, &bound, xv, pv)?;
    Ok(g.value(y).clone())
}

/// Evaluation-mode discriminator scores, one vector per scale.
pub fn run_critic<T: Element, N: Critic<T> + ?Sized>(net: &N, x: &Tensor<T>, p: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let pv = g.constant(p.clone());
    let scores = net.score(&mut g, &bound, xv, pv)?;
    Ok(scores.into_iter().map(|s| g.value(s).data().to_vec()).collect())
}

/// A (N, p_dim) batch holding the same vector in every row.
pub fn p_batch<T: Element>(p: &[f64], n: usize) -> Tensor<T> {
    let data = (0..n).flat_map(|_| p.iter().map(|&v| T::of(v))).collect();
    Tensor::from_vec(&[n, p.len()], data).expect("consistent p batch")
}
