use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam with bias correction. Moments are allocated for a fixed list of
/// parameter tensors, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameter shapes".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w = *w - lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
