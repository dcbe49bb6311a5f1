use rand::Rng;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// History of generated images, each kept with the `p` it was generated for.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool<T> {
    capacity: usize,
    items: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> ImagePool<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::new() }
    }

    pub fn items(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.items
    }

    pub fn restore(capacity: usize, items: Vec<(Tensor<T>, Tensor<T>)>) -> Self {
        Self { capacity, items }
    }

    /// While filling, every fake passes through; once full, each fake is
    /// swapped for a stored one with probability ½.
    pub fn query<R: Rng + ?Sized>(&mut self, fakes: &Tensor<T>, p: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = fakes.shape()[0];
        let mut out_x = Vec::with_capacity(n);
        let mut out_p = Vec::with_capacity(n);
        for i in 0..n {
            let (xi, pi) = (fakes.batch_item(i)?, p.batch_item(i)?);
            if self.items.len() < self.capacity {
                self.items.push((xi.clone(), pi.clone()));
                out_x.push(xi);
                out_p.push(pi);
            } else if rng.random_bool(0.5) {
                let k = rng.random_range(0..self.items.len());
                let (old_x, old_p) = std::mem::replace(&mut self.items[k], (xi, pi));
                out_x.push(old_x);
                out_p.push(old_p);
            } else {
                out_x.push(xi);
                out_p.push(pi);
            }
        }
        Ok((Tensor::stack(&out_x)?, Tensor::stack(&out_p)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_keeps_pairs_together() {
        let mut pool = ImagePool::<f32>::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..20 {
            let x = Tensor::full(&[1, 1, 2, 2], k as f32);
            let p = Tensor::full(&[1, 1], k as f32);
            let (ox, op) = pool.query(&x, &p, &mut rng).unwrap();
            assert_eq!(ox.data()[0], op.data()[0]);
            assert!(pool.items().len() <= 2);
        }
    }
}
