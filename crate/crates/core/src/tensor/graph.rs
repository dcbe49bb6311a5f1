use super::conv::{col2im, conv_backward, conv_forward, conv_out, im2col, Geometry};
use super::{matmul, Element, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Geometry, c_out: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: Geometry, c_in: usize },
    ReflectPad { x: Var, pad: usize },
    InstanceNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    MeanAll(Var),
    Concat(Vec<Var>),
    Tile(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    SpatialMean(Var),
    AvgPool2(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order; [`Graph::backward`] walks them in
/// reverse. A graph is built per step and dropped afterwards.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value as a new constant (gradient stops here).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-d convolution, zero padding. `w` is (C_out, C_in, k, k); `b` is (C_out).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (c_out, c_in, k, k2) = self.value(w).dims4()?;
        if c_in != c || k != k2 {
            return Err(shape_err(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let out_h = conv_out(h, k, stride, pad).ok_or_else(|| shape_err(format!("conv2d kernel {k} too large for {h}x{wd}")))?;
        let out_w = conv_out(wd, k, stride, pad).ok_or_else(|| shape_err(format!("conv2d kernel {k} too large for {h}x{wd}")))?;
        let geom = Geometry { channels: c, height: h, width: wd, kernel: k, stride, pad, out_h, out_w };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err(format!("conv2d bias {:?} for {c_out} channels", self.shape(b))));
            }
        }
        let mut out = Tensor::zeros(&[n, c_out, out_h, out_w]);
        let mut cols = vec![T::zero(); geom.rows() * geom.positions()];
        let in_stride = c * h * wd;
        let out_stride = c_out * geom.positions();
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let od = out.data_mut();
            for i in 0..n {
                conv_forward(
                    &xs[i * in_stride..(i + 1) * in_stride],
                    ws,
                    c_out,
                    &geom,
                    &mut cols,
                    &mut od[i * out_stride..(i + 1) * out_stride],
                );
            }
        }
        if let Some(b) = b {
            let bs = self.value(b).data().to_vec();
            add_channel_bias(out.data_mut(), &bs, geom.positions());
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, c_out }, needs))
    }

    /// Transposed convolution. `w` is (C_in, C_out, k, k).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (wc_in, c_out, k, k2) = self.value(w).dims4()?;
        if wc_in != c_in || k != k2 || output_pad >= stride.max(1) {
            return Err(shape_err(format!(
                "conv_transpose2d weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let out_h = ((h - 1) * stride + k + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d padding too large".into()))?;
        let out_w = ((wd - 1) * stride + k + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d padding too large".into()))?;
        // adjoint geometry: a convolution from the output image back to the input grid
        let geom = Geometry { channels: c_out, height: out_h, width: out_w, kernel: k, stride, pad, out_h: h, out_w: wd };
        if conv_out(out_h, k, stride, pad) != Some(h) || conv_out(out_w, k, stride, pad) != Some(wd) {
            return Err(shape_err("conv_transpose2d geometry is not invertible".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err(format!("conv_transpose2d bias {:?} for {c_out} channels", self.shape(b))));
            }
        }
        let mut out = Tensor::zeros(&[n, c_out, out_h, out_w]);
        let mut cols = vec![T::zero(); geom.rows() * geom.positions()];
        let in_stride = c_in * h * wd;
        let out_stride = c_out * out_h * out_w;
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let od = out.data_mut();
            for i in 0..n {
                matmul(
                    MatRef::new(ws, c_in, geom.rows()).t(),
                    MatRef::new(&xs[i * in_stride..(i + 1) * in_stride], c_in, h * wd),
                    &mut cols,
                    false,
                );
                col2im(&cols, &geom, &mut od[i * out_stride..(i + 1) * out_stride]);
            }
        }
        if let Some(b) = b {
            let bs = self.value(b).data().to_vec();
            add_channel_bias(out.data_mut(), &bs, out_h * out_w);
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom, c_in }, needs))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad == 0 {
            return Ok(x);
        }
        if pad >= h || pad >= w {
            return Err(shape_err(format!("reflect pad {pad} needs spatial size > pad, got {h}x{w}")));
        }
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let xs = self.value(x).data();
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &xs[plane * h * w..(plane + 1) * h * w];
                let dst = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
                for y in 0..ho {
                    let sy = reflect(y as isize - pad as isize, h);
                    for xx in 0..wo {
                        let sx = reflect(xx as isize - pad as isize, w);
                        dst[y * wo + xx] = src[sy * w + sx];
                    }
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(out, Op::ReflectPad { x, pad }, needs))
    }

    /// Per-sample, per-channel normalization over spatial positions with an
    /// optional affine transform.
    pub fn instance_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(shape_err(format!("instance norm affine {:?} for {c} channels", self.shape(p))));
            }
        }
        let hw = h * w;
        let eps = T::of(eps);
        let count = T::of(hw as f64);
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let xs = self.value(x).data();
            let gs = gamma.map(|g| self.value(g).data());
            let bs = beta.map(|b| self.value(b).data());
            let od = out.data_mut();
            for plane in 0..n * c {
                let ch = plane % c;
                let src = &xs[plane * hw..(plane + 1) * hw];
                let mean = src.iter().copied().sum::<T>() / count;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[plane] = inv;
                let g = gs.map_or(T::one(), |g| g[ch]);
                let b = bs.map_or(T::zero(), |b| b[ch]);
                for i in 0..hw {
                    let xh = (src[i] - mean) * inv;
                    xhat[plane * hw + i] = xh;
                    od[plane * hw + i] = g * xh + b;
                }
            }
        }
        let needs = self.ng(x) || gamma.is_some_and(|g| self.ng(g)) || beta.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.ng(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let needs = self.ng(x);
        self.push(out, Op::LeakyRelu(x, s), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let needs = self.ng(x);
        self.push(out, Op::Tanh(x), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::of(k);
        let out = self.value(x).map(|v| v * k);
        let needs = self.ng(x);
        self.push(out, Op::Scale(x, k), needs)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let k = T::of(k);
        let out = self.value(x).map(|v| v + k);
        let needs = self.ng(x);
        self.push(out, Op::AddScalar(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let needs = self.ng(x);
        self.push(out, Op::Square(x), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let needs = self.ng(x);
        self.push(out, Op::Abs(x), needs)
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(shape_err("mean of an empty tensor".into()));
        }
        let mean = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let needs = self.ng(x);
        Ok(self.push(Tensor::scalar(mean), Op::MeanAll(x), needs))
    }

    /// Concatenate along axis 1 (channels for 4-d, features for 2-d).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(shape_err(format!("concat needs rank >= 2, got {base:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err(format!("concat: {:?} incompatible with {:?}", s, base)));
            }
            channels += s[1];
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let mut shape = base.clone();
        shape[1] = channels;
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[i * block..(i + 1) * block]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    /// Replicate a (N, E) tensor over an h×w grid: (N, E, h, w).
    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, e) = self.value(x).dims2()?;
        let mut out = Tensor::zeros(&[n, e, h, w]);
        {
            let xs = self.value(x).data();
            for (plane, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
                chunk.iter_mut().for_each(|v| *v = xs[plane]);
            }
        }
        let needs = self.ng(x);
        Ok(self.push(out, Op::Tile(x), needs))
    }

    /// Dense layer. `x` is (N, in), `w` is (out, in), `b` is (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if win != fin {
            return Err(shape_err(format!("linear weight {:?} for input {:?}", self.shape(w), self.shape(x))));
        }
        let mut out = Tensor::zeros(&[n, fout]);
        matmul(
            MatRef::new(self.value(x).data(), n, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            out.data_mut(),
            false,
        );
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err(format!("linear bias {:?} for {fout} outputs", self.shape(b))));
            }
            let bs = self.value(b).data().to_vec();
            add_channel_bias(out.data_mut(), &bs, 1);
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// (N, C, H, W) → (N, C) by averaging spatial positions.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = T::of((h * w) as f64);
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::SpatialMean(x), needs))
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err(format!("avg_pool2 on {h}x{w}")));
        }
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let xs = self.value(x).data();
            let quarter = T::of(0.25);
            for (plane, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
                let src = &xs[plane * h * w..(plane + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        let s = src[2 * y * w + 2 * xx]
                            + src[2 * y * w + 2 * xx + 1]
                            + src[(2 * y + 1) * w + 2 * xx]
                            + src[(2 * y + 1) * w + 2 * xx + 1];
                        dst[y * wo + xx] = s * quarter;
                    }
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(out, Op::AvgPool2(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Reverse-mode sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, c_out } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let in_stride = geom.channels * geom.height * geom.width;
                let out_stride = c_out * geom.positions();
                let mut cols = vec![T::zero(); geom.rows() * geom.positions()];
                let mut dw = self.ng(*w).then(|| vec![T::zero(); wv.numel()]);
                let mut dx = self.ng(*x).then(|| vec![T::zero(); xv.numel()]);
                for i in 0..n {
                    conv_backward(
                        &xv.data()[i * in_stride..(i + 1) * in_stride],
                        wv.data(),
                        &go[i * out_stride..(i + 1) * out_stride],
                        *c_out,
                        geom,
                        &mut cols,
                        dw.as_deref_mut(),
                        dx.as_mut().map(|d| &mut d[i * in_stride..(i + 1) * in_stride]),
                    );
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    accumulate(grads, b, &[*c_out], channel_sums(go, *c_out, geom.positions()));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, c_in } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let hw = geom.out_h * geom.out_w;
                let in_stride = c_in * hw;
                let out_stride = geom.channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); geom.rows() * geom.positions()];
                let mut dw = self.ng(*w).then(|| vec![T::zero(); wv.numel()]);
                let mut dx = self.ng(*x).then(|| vec![T::zero(); xv.numel()]);
                for i in 0..n {
                    im2col(&go[i * out_stride..(i + 1) * out_stride], geom, &mut cols);
                    let dcols = MatRef::new(&cols[..], geom.rows(), hw);
                    if let Some(dx) = dx.as_mut() {
                        matmul(
                            MatRef::new(wv.data(), *c_in, geom.rows()),
                            dcols,
                            &mut dx[i * in_stride..(i + 1) * in_stride],
                            false,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        matmul(MatRef::new(&xv.data()[i * in_stride..(i + 1) * in_stride], *c_in, hw), dcols.t(), dw, true);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    accumulate(grads, b, &[geom.channels], channel_sums(go, geom.channels, geom.height * geom.width));
                }
            }
            Op::ReflectPad { x, pad } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4().expect("4-d");
                let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![T::zero(); xv.numel()];
                for (plane, src) in go.chunks(ho * wo).enumerate() {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ho {
                        let sy = reflect(y as isize - *pad as isize, h);
                        for xx in 0..wo {
                            let sx = reflect(xx as isize - *pad as isize, w);
                            dst[sy * w + sx] = dst[sy * w + sx] + src[y * wo + xx];
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let xv = self.value(*x);
                let (_, c, h, w) = xv.dims4().expect("4-d");
                let hw = h * w;
                let count = T::of(hw as f64);
                let gs = gamma.map(|g| self.value(g).data());
                if let Some(g) = gamma.filter(|g| self.ng(*g)) {
                    let mut dg = vec![T::zero(); c];
                    for (plane, chunk) in go.chunks(hw).enumerate() {
                        let xh = &xhat[plane * hw..(plane + 1) * hw];
                        dg[plane % c] = dg[plane % c] + chunk.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    accumulate(grads, g, &[c], dg);
                }
                if let Some(b) = beta.filter(|b| self.ng(*b)) {
                    accumulate(grads, b, &[c], channel_sums(go, c, hw));
                }
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); xv.numel()];
                    for (plane, chunk) in go.chunks(hw).enumerate() {
                        let g = gs.map_or(T::one(), |g| g[plane % c]);
                        let xh = &xhat[plane * hw..(plane + 1) * hw];
                        let sum_d = chunk.iter().copied().sum::<T>() * g;
                        let sum_dx = chunk.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * g;
                        let k = inv_std[plane] / count;
                        for i in 0..hw {
                            dx[plane * hw + i] = k * (count * chunk[i] * g - sum_d - xh[i] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(go).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::LeakyRelu(x, s) => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(go).map(|(&v, &g)| if v > T::zero() { g } else { g * *s }).collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(go).map(|(&t, &g)| g * (T::one() - t * t)).collect();
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        accumulate(grads, v, self.shape(v), go.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, self.shape(*a), go.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, self.shape(*b), go.iter().map(|&g| -g).collect());
                }
            }
            Op::Scale(x, k) => {
                accumulate(grads, *x, self.shape(*x), go.iter().map(|&g| g * *k).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(grads, *x, self.shape(*x), go.to_vec());
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::of(2.0);
                let dx = xv.data().iter().zip(go).map(|(&v, &g)| two * v * g).collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(go).map(|(&v, &g)| if v == T::zero() { T::zero() } else { g * v.signum() }).collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let g = go[0] / T::of(xv.numel() as f64);
                accumulate(grads, *x, xv.shape(), vec![g; xv.numel()]);
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let block = ps[1] * inner;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * block);
                        for i in 0..n {
                            d.extend_from_slice(&go[i * total + offset..i * total + offset + block]);
                        }
                        accumulate(grads, p, ps, d);
                    }
                    offset += block;
                }
            }
            Op::Tile(x) => {
                let s = node.value.shape();
                let hw = s[2] * s[3];
                let dx = go.chunks(hw).map(|c| c.iter().copied().sum::<T>()).collect();
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fin) = xv.dims2().expect("2-d");
                let fout = wv.shape()[0];
                let gm = MatRef::new(go, n, fout);
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    matmul(gm, MatRef::new(wv.data(), fout, fin), &mut dx, false);
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    matmul(gm.t(), MatRef::new(xv.data(), n, fin), &mut dw, false);
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    accumulate(grads, b, &[fout], channel_sums(go, fout, 1));
                }
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(go.len() * hw);
                for &g in go {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                accumulate(grads, *x, s, dx);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); s.iter().product()];
                for (plane, src) in go.chunks(ho * wo).enumerate() {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            let g = src[y * wo + xx] * quarter;
                            dst[2 * y * w + 2 * xx] = g;
                            dst[2 * y * w + 2 * xx + 1] = g;
                            dst[(2 * y + 1) * w + 2 * xx] = g;
                            dst[(2 * y + 1) * w + 2 * xx + 1] = g;
                        }
                    }
                }
                accumulate(grads, *x, s, dx);
            }
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn add_channel_bias<T: Element>(data: &mut [T], bias: &[T], inner: usize) {
    let c = bias.len();
    for (idx, chunk) in data.chunks_mut(inner).enumerate() {
        let b = bias[idx % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<T: Element>(go: &[T], c: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for (idx, chunk) in go.chunks(inner).enumerate() {
        out[idx % c] = out[idx % c] + chunk.iter().copied().sum::<T>();
    }
    out
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], d: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => g.data_mut().iter_mut().zip(d).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(Tensor { shape: shape.to_vec(), data: d }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs).
    fn check(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Graph<f64>, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            let val = match weights {
                Some(w) => g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
                None => 0.0,
            };
            (val, g, vars, out)
        };
        let (_, g0, _, out0) = eval(&inputs, None);
        let weights = random(g0.shape(out0), &mut rng);
        let (_, mut g, vars, out) = eval(&inputs, Some(&weights));
        let wv = g.constant(weights.clone());
        let prod = {
            // sum(w ⊙ out) via (out + w)² - out² - w² = 2 w⊙out
            let s = g.add(out, wv).unwrap();
            let s2 = g.square(s);
            let o2 = g.square(out);
            let w2 = g.square(wv);
            let d = g.sub(s2, o2).unwrap();
            let d = g.sub(d, w2).unwrap();
            let m = g.mean_all(d).unwrap();
            g.scale(m, weights.numel() as f64 / 2.0)
        };
        let grads = g.backward(prod);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("gradient");
            for i in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} element {i}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap());
    }

    #[test]
    fn conv_transpose_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 2, 3, 3], &mut rng);
        let w = random(&[2, 3, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv_transpose2d(xv, wv, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 6, 6]);
        check(vec![x, w, b], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap());
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x; w), y> == <x, conv_t(y; w)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 6, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let y = random(&[1, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let ty = g.conv_transpose2d(yv, wv, None, 2, 1, 1).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn norm_pad_and_pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        check(vec![x.clone(), gamma, beta], |g, v| {
            let p = g.reflect_pad(v[0], 2).unwrap();
            let n = g.instance_norm(p, Some(v[1]), Some(v[2]), 1e-5).unwrap();
            let a = g.leaky_relu(n, 0.2);
            let t = g.tanh(a);
            g.avg_pool2(t).unwrap()
        });
        check(vec![x], |g, v| {
            let r = g.relu(v[0]);
            let s = g.spatial_mean(r).unwrap();
            let s = g.add_scalar(s, 0.3);
            let a = g.abs(s);
            g.scale(a, -1.5)
        });
    }

    #[test]
    fn dense_tile_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random(&[2, 3], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let img = random(&[2, 2, 3, 3], &mut rng);
        check(vec![p, w, b, img], |g, v| {
            let e = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let t = g.tile(e, 3, 3).unwrap();
            let c = g.concat(&[v[3], t]).unwrap();
            let r = g.reshape(c, &[2, 54]).unwrap();
            g.square(r)
        });
    }

    #[test]
    fn reflect_padding_values() {
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        assert!(g.reflect_pad(xv, 1).is_err());
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let xv = g.constant(x);
        let p = g.reflect_pad(xv, 1).unwrap();
        assert_eq!(&g.value(p).data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let s = g.add(a, b).unwrap();
        let m = g.mean_all(s).unwrap();
        let grads = g.backward(m);
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, 0.5]);
        assert!(grads.get(b).is_none());
    }
}
