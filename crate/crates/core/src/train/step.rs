use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{graph_cycle_loss, graph_lsgan_d, graph_lsgan_g};
use super::{Adam, ImagePool, LossReport, TrainConfig, TrainSetup};
use crate::error::{Error, Result};
use crate::model::{Critic, Discriminator, Generator, Translator};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Aligned source images, target images and the conditioning of the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub p: Tensor<T>,
}

/// Inputs of one iteration: `a` feeds the x-start half, `b` (drawn
/// independently) the y-start half.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput<T> {
    pub a: Batch<T>,
    pub b: Batch<T>,
}

/// Graph handles of both cycle halves.
#[derive(Clone, Copy, Debug)]
pub struct Halves {
    pub x_a: Var,
    pub y_a: Var,
    pub p_a: Var,
    pub x_b: Var,
    pub y_b: Var,
    pub p_b: Var,
    /// G(x_a, p_a)
    pub y_hat: Var,
    /// F(G(x_a, p_a), p_a)
    pub x_hat: Var,
    /// F(y_b, p_b)
    pub x_tilde: Var,
    /// G(F(y_b, p_b), p_b)
    pub y_tilde: Var,
}

pub fn translate_halves<T: Element, N: Translator<T>>(
    g: &mut Graph<T>,
    gen: &N,
    gen_params: &Bound,
    inv: &N,
    inv_params: &Bound,
    input: &StepInput<T>,
) -> Result<Halves> {
    let x_a = g.constant(input.a.x.clone());
    let y_a = g.constant(input.a.y.clone());
    let p_a = g.constant(input.a.p.clone());
    let x_b = g.constant(input.b.x.clone());
    let y_b = g.constant(input.b.y.clone());
    let p_b = g.constant(input.b.p.clone());
    let y_hat = gen.translate(g, gen_params, x_a, p_a)?;
    let x_hat = inv.translate(g, inv_params, y_hat, p_a)?;
    let x_tilde = inv.translate(g, inv_params, y_b, p_b)?;
    let y_tilde = gen.translate(g, gen_params, x_tilde, p_b)?;
    Ok(Halves { x_a, y_a, p_a, x_b, y_b, p_b, y_hat, x_hat, x_tilde, y_tilde })
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLosses {
    pub gen_xy: Var,
    pub gen_yx: Var,
    pub cyc: Var,
    pub total: Var,
}

/// Generator objective `gen_xy + gen_yx + λ·cyc` given the translated halves.
#[allow(clippy::too_many_arguments)]
pub fn generator_losses<T: Element, C: Critic<T>>(
    g: &mut Graph<T>,
    h: &Halves,
    dx: &C,
    dx_params: &Bound,
    dy: &C,
    dy_params: &Bound,
    lambda_cyc: f64,
) -> Result<GeneratorLosses> {
    let sy = dy.score(g, dy_params, h.y_hat, h.p_a)?;
    let gen_xy = graph_lsgan_g(g, &sy)?;
    let sx = dx.score(g, dx_params, h.x_tilde, h.p_b)?;
    let gen_yx = graph_lsgan_g(g, &sx)?;
    let cyc = graph_cycle_loss(g, h.x_a, h.x_hat, h.y_b, h.y_tilde)?;
    let adv = g.add(gen_xy, gen_yx)?;
    let weighted = g.scale(cyc, lambda_cyc);
    let total = g.add(adv, weighted)?;
    Ok(GeneratorLosses { gen_xy, gen_yx, cyc, total })
}

/// Full generator objective with G and F trainable and both critics frozen.
/// Returns the graph, the losses and the bound G and F parameters.
pub fn generator_objective<T: Element, N: Translator<T>, C: Critic<T>>(
    nets: (&N, &N, &C, &C),
    input: &StepInput<T>,
    lambda_cyc: f64,
) -> Result<(Graph<T>, GeneratorLosses, Bound, Bound)> {
    let (gen, inv, dx, dy) = nets;
    let mut g = Graph::new();
    let gb = gen.params().bind(&mut g, true);
    let fb = inv.params().bind(&mut g, true);
    let h = translate_halves(&mut g, gen, &gb, inv, &fb, input)?;
    let dxb = dx.params().bind(&mut g, false);
    let dyb = dy.params().bind(&mut g, false);
    let losses = generator_losses(&mut g, &h, dx, &dxb, dy, &dyb, lambda_cyc)?;
    Ok((g, losses, gb, fb))
}

/// Networks, optimizers and counters of a training run.
#[derive(Clone, Debug)]
pub struct TrainState<T, N, C> {
    pub g: N,
    pub f: N,
    pub dx: C,
    pub dy: C,
    pub opt_gf: Adam<T>,
    pub opt_dx: Adam<T>,
    pub opt_dy: Adam<T>,
    pub iteration: u64,
    pub lambda_cyc: f64,
    /// Fake-y history for D_Y and fake-x history for D_X.
    pub pools: Option<(ImagePool<T>, ImagePool<T>)>,
    pub pool_rng: ChaCha8Rng,
}

fn shapes<T: Element>(stores: &[&ParamStore<T>]) -> Vec<Vec<usize>> {
    stores.iter().flat_map(|s| s.iter().map(|(_, _, t)| t.shape().to_vec())).collect()
}

fn adam_for<T: Element>(stores: &[&ParamStore<T>], cfg: &TrainConfig) -> Adam<T> {
    let shapes = shapes(stores);
    Adam::new(shapes.iter().map(Vec::as_slice), cfg.lr, cfg.beta1, cfg.beta2)
}

/// Stream of the run seed that drives model initialization.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const DATA_STREAM: u64 = 1;
pub(crate) const POOL_STREAM: u64 = 2;

pub(crate) fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl TrainState<f32, Generator<f32>, Discriminator<f32>> {
    /// Freshly initialized networks for `setup`, seeded from `setup.train.seed`.
    pub fn build(setup: &TrainSetup) -> Result<Self> {
        setup.validate()?;
        let mut rng = stream(setup.train.seed, INIT_STREAM);
        let g = Generator::build(&setup.model.generator, &mut rng)?;
        let f = Generator::build(&setup.model.generator, &mut rng)?;
        let dx = Discriminator::build(&setup.model.discriminator, &mut rng)?;
        let dy = Discriminator::build(&setup.model.discriminator, &mut rng)?;
        Ok(Self::new(g, f, dx, dy, &setup.train))
    }
}

impl<T: Element, N: Translator<T>, C: Critic<T>> TrainState<T, N, C> {
    pub fn new(g: N, f: N, dx: C, dy: C, cfg: &TrainConfig) -> Self {
        let opt_gf = adam_for(&[g.params(), f.params()], cfg);
        let opt_dx = adam_for(&[dx.params()], cfg);
        let opt_dy = adam_for(&[dy.params()], cfg);
        let pools = cfg.use_history_buffer.then(|| (ImagePool::new(cfg.history_size), ImagePool::new(cfg.history_size)));
        Self {
            g,
            f,
            dx,
            dy,
            opt_gf,
            opt_dx,
            opt_dy,
            iteration: 0,
            lambda_cyc: cfg.lambda_cyc,
            pools,
            pool_rng: stream(cfg.seed, POOL_STREAM),
        }
    }

    fn check_input(&self, input: &StepInput<T>) -> Result<()> {
        let p_dim = self.g.p_dim();
        for batch in [&input.a, &input.b] {
            let n = batch.x.shape()[0];
            if batch.y.shape()[0] != n || batch.p.shape() != [n, p_dim] {
                return Err(Error::Param(format!(
                    "batch of {n} images needs p of shape [{n}, {p_dim}], got {:?} (y batch {})",
                    batch.p.shape(),
                    batch.y.shape()[0]
                )));
            }
        }
        Ok(())
    }

    /// One iteration: both cycle halves, critic updates, then the joint G/F update.
    pub fn step(&mut self, input: &StepInput<T>) -> Result<LossReport> {
        self.check_input(input)?;
        let mut graph = Graph::new();
        let gb = self.g.params().bind(&mut graph, true);
        let fb = self.f.params().bind(&mut graph, true);
        let h = translate_halves(&mut graph, &self.g, &gb, &self.f, &fb, input)?;
        let fake_y = graph.value(h.y_hat).clone();
        let fake_x = graph.value(h.x_tilde).clone();
        let (gan_xy, gan_yx) = self.discriminator_phase(input, fake_y, fake_x)?;
        let (gen_xy, gen_yx, cyc) = self.generator_phase(&mut graph, &h, &gb, &fb)?;
        self.iteration += 1;
        let mut report = LossReport::compose(self.iteration, gan_xy, gan_yx, cyc, self.lambda_cyc);
        report.gen_xy = gen_xy;
        report.gen_yx = gen_yx;
        if !report.is_finite() {
            return Err(self.diagnostic(&report));
        }
        Ok(report)
    }

    /// Update D_Y on (y_a, p_a) vs the fake y, and D_X on (x_b, p_b) vs the fake x.
    pub(crate) fn discriminator_phase(&mut self, input: &StepInput<T>, fake_y: Tensor<T>, fake_x: Tensor<T>) -> Result<(f64, f64)> {
        let ((fake_y, p_fy), (fake_x, p_fx)) = match &mut self.pools {
            Some((py, px)) => (
                py.query(&fake_y, &input.a.p, &mut self.pool_rng)?,
                px.query(&fake_x, &input.b.p, &mut self.pool_rng)?,
            ),
            None => ((fake_y, input.a.p.clone()), (fake_x, input.b.p.clone())),
        };
        let gan_xy = update_critic(&mut self.dy, &mut self.opt_dy, (&input.a.y, &input.a.p), (fake_y, p_fy))?;
        let gan_yx = update_critic(&mut self.dx, &mut self.opt_dx, (&input.b.x, &input.b.p), (fake_x, p_fx))?;
        Ok((gan_xy, gan_yx))
    }

    pub(crate) fn generator_phase(&mut self, graph: &mut Graph<T>, h: &Halves, gb: &Bound, fb: &Bound) -> Result<(f64, f64, f64)> {
        let dxb = self.dx.params().bind(graph, false);
        let dyb = self.dy.params().bind(graph, false);
        let l = generator_losses(graph, h, &self.dx, &dxb, &self.dy, &dyb, self.lambda_cyc)?;
        let scalar = |v: Var| graph.value(v).data()[0].as_f64();
        let (gen_xy, gen_yx, cyc, total) = (scalar(l.gen_xy), scalar(l.gen_yx), scalar(l.cyc), scalar(l.total));
        if !total.is_finite() {
            let mut r = LossReport::compose(self.iteration + 1, f64::NAN, f64::NAN, cyc, self.lambda_cyc);
            (r.gen_xy, r.gen_yx) = (gen_xy, gen_yx);
            return Err(self.diagnostic(&r));
        }
        let mut grads = graph.backward(l.total);
        let gs: Vec<_> = gb.vars().iter().chain(fb.vars()).map(|&v| grads.take(v)).collect();
        let params: Vec<_> = self.g.params_mut().tensors_mut().iter_mut().chain(self.f.params_mut().tensors_mut()).collect();
        self.opt_gf.step(params, gs)?;
        Ok((gen_xy, gen_yx, cyc))
    }

    fn diagnostic(&self, r: &LossReport) -> Error {
        let max = |s: &ParamStore<T>| s.iter().map(|(_, _, t)| t.max_abs().as_f64()).fold(0.0, f64::max);
        Error::Numeric(format!(
            "non-finite loss at iteration {}: gan_xy={} gan_yx={} cyc={} gen_xy={} gen_yx={}; max|param| G={} F={} D_X={} D_Y={}",
            r.iteration,
            r.gan_xy,
            r.gan_yx,
            r.cyc,
            r.gen_xy,
            r.gen_yx,
            max(self.g.params()),
            max(self.f.params()),
            max(self.dx.params()),
            max(self.dy.params()),
        ))
    }
}

fn update_critic<T: Element, C: Critic<T>>(
    d: &mut C,
    opt: &mut Adam<T>,
    real: (&Tensor<T>, &Tensor<T>),
    fake: (Tensor<T>, Tensor<T>),
) -> Result<f64> {
    let mut g = Graph::new();
    let b = d.params().bind(&mut g, true);
    let (rx, rp) = (g.constant(real.0.clone()), g.constant(real.1.clone()));
    let (fx, fp) = (g.constant(fake.0), g.constant(fake.1));
    let sr = d.score(&mut g, &b, rx, rp)?;
    let sf = d.score(&mut g, &b, fx, fp)?;
    let loss = graph_lsgan_d(&mut g, &sr, &sf)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite discriminator loss {value}")));
    }
    let mut grads = g.backward(loss);
    let gs: Vec<_> = b.vars().iter().map(|&v| grads.take(v)).collect();
    opt.step(d.params_mut().tensors_mut().iter_mut().collect(), gs)?;
    Ok(value)
}
