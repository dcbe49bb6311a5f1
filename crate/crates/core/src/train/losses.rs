use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Least-squares adversarial losses on concrete score vectors.
///
/// Returns `(loss_d, loss_g)` with
/// `loss_d = ½·mean((1 - d_real)²) + ½·mean(d_fake²)` and
/// `loss_g = ½·mean((1 - d_fake)²)`.
pub fn lsgan_loss(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Numeric("lsgan_loss needs non-empty score batches".into()));
    }
    if d_real.iter().chain(d_fake).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite discriminator score".into()));
    }
    let real = mean(d_real.iter().map(|r| (1.0 - r).powi(2)), d_real.len());
    let fake = mean(d_fake.iter().map(|f| f * f), d_fake.len());
    let gen = mean(d_fake.iter().map(|f| (1.0 - f).powi(2)), d_fake.len());
    Ok((0.5 * (real + fake), 0.5 * gen))
}

/// `½·(mean|x_rec - x| + mean|y_rec - y|)`.
pub fn cycle_loss<T: Element>(x: &Tensor<T>, x_rec: &Tensor<T>, y: &Tensor<T>, y_rec: &Tensor<T>) -> Result<f64> {
    let l1 = |a: &Tensor<T>, b: &Tensor<T>| -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("cycle_loss: {:?} vs {:?}", a.shape(), b.shape())));
        }
        if a.numel() == 0 {
            return Err(Error::Shape("cycle_loss: empty batch".into()));
        }
        Ok(mean(a.data().iter().zip(b.data()).map(|(u, v)| (u.as_f64() - v.as_f64()).abs()), a.numel()))
    };
    Ok(0.5 * (l1(x, x_rec)? + l1(y, y_rec)?))
}

fn mean_sq_from<T: Element>(g: &mut Graph<T>, scores: Var, target: f64) -> Result<Var> {
    let shifted = g.add_scalar(scores, -target);
    let sq = g.square(shifted);
    g.mean_all(sq)
}

fn average<T: Element>(g: &mut Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Shape("no discriminator scales".into()))?;
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64))
}

/// Discriminator objective on the graph, averaged over scales.
pub fn graph_lsgan_d<T: Element>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::Shape("real and fake score lists differ in scale count".into()));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let lr = mean_sq_from(g, r, 1.0)?;
        let lf = mean_sq_from(g, f, 0.0)?;
        let sum = g.add(lr, lf)?;
        terms.push(g.scale(sum, 0.5));
    }
    average(g, terms)
}

/// Generator-side least-squares term on the graph, averaged over scales.
pub fn graph_lsgan_g<T: Element>(g: &mut Graph<T>, fake: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fake.len());
    for &f in fake {
        let l = mean_sq_from(g, f, 1.0)?;
        terms.push(g.scale(l, 0.5));
    }
    average(g, terms)
}

pub fn graph_cycle_loss<T: Element>(g: &mut Graph<T>, x: Var, x_rec: Var, y: Var, y_rec: Var) -> Result<Var> {
    let dx = g.sub(x_rec, x)?;
    let dx = g.abs(dx);
    let lx = g.mean_all(dx)?;
    let dy = g.sub(y_rec, y)?;
    let dy = g.abs(dy);
    let ly = g.mean_all(dy)?;
    let sum = g.add(lx, ly)?;
    Ok(g.scale(sum, 0.5))
}
