//! Tape-based reverse-mode differentiation over a fixed operation set.
//!
//! Model code records operations on a [`Graph`] while computing the forward
//! pass; [`Graph::backward`] then walks the tape in reverse. Parameters are
//! borrowed from a [`ParamSet`](super::ParamSet) for the lifetime of the
//! graph, so a forward pass never copies weights.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::flops;
use super::scalar::gemm;
use super::{RngStream, Scalar, Tensor};
use crate::error::{Error, Result};

/// Which stochastic layers are active during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Inference with dropout left on, for Monte Carlo sampling.
    McDropout,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::McDropout)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    Conv2d { stride: usize, pad: usize },
    Dense,
    Relu,
    MaxPool2 { argmax: Vec<u32> },
    Upsample2,
    Concat,
    Dropout { mask: Vec<T> },
    Softmax,
    LogSoftmax,
    CrossEntropy { labels: Vec<u32> },
    Mse,
    Pick { index: Vec<u32> },
    ClampMin(T),
    Add,
    Sub,
    Mul,
    MulConst(Vec<T>),
    Scale(T),
    Sum,
    Mean,
    Square,
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Cow<'a, Tensor<T>>,
}

/// Operation tape.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    mode: Mode,
    flops: u64,
}

/// Result of a backward pass.
pub struct Gradients<T: Scalar = f32> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded value (zero-filled if unreachable).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

/// Splits an `[N, C, rest...]` shape into `(N, C, prod(rest))`.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let s = shape.iter().skip(2).product();
    (n, c, s)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
    col: &mut [T],
) {
    let (kh, kw) = k;
    let (ho, wo) = out;
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * hw..][..hw];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
    dx: &mut [T],
) {
    let (kh, kw) = k;
    let (ho, wo) = out;
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, flops: 0 }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Flops executed so far, under the crate-wide counting convention.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, inputs, value: Cow::Owned(value) });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn input_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value: Cow::Borrowed(t) });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Param(name.to_string()), inputs: vec![], value: Cow::Borrowed(t) });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution. `x: [N, Cin, H, W]`, `w: [Cout, Cin, Kh, Kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || bs != [ws[0]] || stride == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", format!("kernel larger than input {xs:?}"))),
        };
        let hw = ho * wo;
        let ckk = cin * kh * kw;
        let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
        let mut out = vec![T::zero(); n * cout * hw];
        {
            let xv = self.val(x).data();
            let wv = self.val(w).data();
            let bv = self.val(b).data();
            for i in 0..n {
                let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                let oi = &mut out[i * cout * hw..(i + 1) * cout * hw];
                for (co, row) in oi.chunks_mut(hw).enumerate() {
                    row.fill(bv[co]);
                }
                let src: &[T] = if direct {
                    xi
                } else {
                    im2col(xi, cin, h, wd, (kh, kw), stride, pad, (ho, wo), &mut col);
                    &col
                };
                gemm(cout, ckk, hw, wv, false, src, false, oi, true);
            }
        }
        self.flops += flops::conv2d(n, cin, cout, kh, kw, ho, wo);
        let t = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x.0, w.0, b.0], t))
    }

    /// Fully connected layer. `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.val(b).data());
        }
        gemm(n, fin, fout, self.val(x).data(), false, self.val(w).data(), true, &mut out, true);
        self.flops += flops::dense(n, fin, fout);
        let t = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(Op::Dense, vec![x.0, w.0, b.0], t))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.val(x).map(f);
        self.flops += flops::elementwise(t.len());
        self.push(op, vec![x.0], t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square, |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(x, Op::Scale(c), |v| v * c)
    }

    /// Elementwise `max(x, c)`; the gradient is blocked where the clamp binds.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(x, Op::ClampMin(c), |v| if v > c { v } else { c })
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("needs even [N,C,H,W], got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.val(x).data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.flops += flops::resample(out.len());
        let t = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x.0], t))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2", format!("needs [N,C,H,W], got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.val(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.flops += flops::resample(out.len());
        let t = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], out)?;
        Ok(self.push(Op::Upsample2, vec![x.0], t))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.val(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?);
        let fs = first.shape().to_vec();
        let mut channels = 0;
        for p in parts {
            let s = self.val(*p).shape();
            if s.len() != fs.len() || s[0] != fs[0] || s[2..] != fs[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {fs:?}")));
            }
            channels += s[1];
        }
        let (n, _, sp) = ncs(&fs);
        let mut out = Vec::with_capacity(n * channels * sp);
        for i in 0..n {
            for p in parts {
                let (_, c, _) = ncs(self.val(*p).shape());
                out.extend_from_slice(&self.val(*p).data()[i * c * sp..(i + 1) * c * sp]);
            }
        }
        let mut shape = fs.clone();
        shape[1] = channels;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat, parts.iter().map(|v| v.0).collect(), t))
    }

    /// Inverted dropout; identity unless the graph mode enables it.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.mode.dropout_active() || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.val(x).len();
        let mask: Vec<T> = (0..n).map(|_| if rng.uniform() < rate { T::zero() } else { scale }).collect();
        let xv = self.val(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.flops += flops::elementwise(n);
        Ok(self.push(Op::Dropout { mask }, vec![x.0], t))
    }

    fn softmax_impl(x: &Tensor<T>, log: bool) -> Result<Tensor<T>> {
        if x.shape().len() < 2 {
            return Err(Error::shape("softmax", format!("needs [N, C, ...], got {:?}", x.shape())));
        }
        let (n, c, s) = ncs(x.shape());
        let xv = x.data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for j in 0..s {
                let at = |k: usize| (i * c + k) * s + j;
                let mut mx = xv[at(0)];
                for k in 1..c {
                    mx = mx.max(xv[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (xv[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                let lz = z.ln();
                for k in 0..c {
                    out[at(k)] = if log { xv[at(k)] - mx - lz } else { out[at(k)] / z };
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Softmax over the channel axis (axis 1).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = Self::softmax_impl(self.val(x), false)?;
        self.flops += flops::elementwise(t.len());
        Ok(self.push(Op::Softmax, vec![x.0], t))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = Self::softmax_impl(self.val(x), true)?;
        self.flops += flops::elementwise(t.len());
        Ok(self.push(Op::LogSoftmax, vec![x.0], t))
    }

    /// Mean per-position cross-entropy of channel-axis logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let ls = Self::softmax_impl(self.val(logits), true)?;
        let (n, c, s) = ncs(ls.shape());
        if labels.len() != n * s {
            return Err(Error::shape("cross_entropy", format!("{} labels for logits {:?}", labels.len(), ls.shape())));
        }
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..s {
                let y = labels[i * s + j] as usize;
                if y >= c {
                    return Err(Error::invalid(format!("label {y} >= {c} classes")));
                }
                total -= ls.data()[(i * c + y) * s + j];
            }
        }
        self.flops += flops::elementwise(ls.len());
        let t = Tensor::scalar(total / T::from_usize(n * s).unwrap());
        Ok(self.push(Op::CrossEntropy { labels: labels.to_vec() }, vec![logits.0], t))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let sum: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let n = av.len();
        self.flops += flops::elementwise(2 * n);
        let t = Tensor::scalar(sum / T::from_usize(n).unwrap());
        Ok(self.push(Op::Mse, vec![a.0, b.0], t))
    }

    /// Selects one channel per position: `out[n, s] = x[n, index[n, s], s]`.
    pub fn pick(&mut self, x: Var, index: &[u32]) -> Result<Var> {
        let xv = self.val(x);
        if xv.shape().len() < 2 {
            return Err(Error::shape("pick", format!("needs [N, C, ...], got {:?}", xv.shape())));
        }
        let (n, c, s) = ncs(xv.shape());
        if index.len() != n * s || index.iter().any(|&k| k as usize >= c) {
            return Err(Error::shape("pick", format!("index of len {} for {:?}", index.len(), xv.shape())));
        }
        let data = (0..n * s).map(|p| xv.data()[((p / s) * c + index[p] as usize) * s + p % s]).collect();
        let mut shape = vec![n];
        shape.extend_from_slice(&xv.shape()[2..]);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Op::Pick { index: index.to_vec() }, vec![x.0], t))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("elementwise", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.flops += flops::elementwise(t.len());
        Ok(self.push(op, vec![a.0, b.0], t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let xv = self.val(x);
        if xv.len() != c.len() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", xv.shape(), c.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.flops += flops::elementwise(t.len());
        Ok(self.push(Op::MulConst(c.data().to_vec()), vec![x.0], t))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.val(x).data().iter().copied().sum();
        self.flops += flops::elementwise(self.val(x).len());
        self.push(Op::Sum, vec![x.0], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).len();
        let s: T = self.val(x).data().iter().copied().sum();
        self.flops += flops::elementwise(n);
        self.push(Op::Mean, vec![x.0], Tensor::scalar(s / T::from_usize(n).unwrap()))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward on a graph that has not evaluated this value"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contributions = self.local_grads(node, &g)?;
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    accumulate(&mut grads[*input], c);
                }
            }
            grads[id] = Some(g);
        }
        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[id].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(name) {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
        }
        if params.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients { by_node: grads, params })
    }

    /// Gradient contribution of `node`'s output gradient `g` to each input.
    fn local_grads(&self, node: &Node<'a, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let input = |i: usize| -> &Tensor<T> { &self.nodes[node.inputs[i]].value };
        let out = &node.value;
        let like = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data);
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { stride, pad } => {
                let (x, w) = (input(0), input(1));
                let (xs, ws) = (x.shape(), w.shape());
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let hw = ho * wo;
                let ckk = cin * kh * kw;
                let direct = kh == 1 && kw == 1 && *stride == 1 && *pad == 0;
                let mut dx = vec![T::zero(); x.len()];
                let mut dw = vec![T::zero(); w.len()];
                let mut db = vec![T::zero(); cout];
                let mut col = vec![T::zero(); ckk * hw];
                let mut dcol = vec![T::zero(); if direct { 0 } else { ckk * hw }];
                for i in 0..n {
                    let xi = &x.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
                    let gi = &gd[i * cout * hw..(i + 1) * cout * hw];
                    for (co, row) in gi.chunks(hw).enumerate() {
                        db[co] += row.iter().copied().sum::<T>();
                    }
                    let src: &[T] = if direct {
                        xi
                    } else {
                        im2col(xi, cin, h, wd, (kh, kw), *stride, *pad, (ho, wo), &mut col);
                        &col
                    };
                    gemm(cout, hw, ckk, gi, false, src, true, &mut dw, true);
                    let dxi = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
                    if direct {
                        gemm(ckk, cout, hw, w.data(), true, gi, false, dxi, true);
                    } else {
                        gemm(ckk, cout, hw, w.data(), true, gi, false, &mut dcol, false);
                        col2im(&dcol, cin, h, wd, (kh, kw), *stride, *pad, (ho, wo), dxi);
                    }
                }
                vec![Some(like(x, dx)?), Some(like(w, dw)?), Some(Tensor::new(vec![cout], db)?)]
            }
            Op::Dense => {
                let (x, w) = (input(0), input(1));
                let (n, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let mut dx = vec![T::zero(); n * fin];
                gemm(n, fout, fin, gd, false, w.data(), false, &mut dx, false);
                let mut dw = vec![T::zero(); fout * fin];
                gemm(fout, n, fin, gd, true, x.data(), false, &mut dw, false);
                let mut db = vec![T::zero(); fout];
                for row in gd.chunks(fout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![Some(like(x, dx)?), Some(like(w, dw)?), Some(Tensor::new(vec![fout], db)?)]
            }
            Op::Relu => {
                let x = input(0);
                let d = x.data().iter().zip(gd).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                vec![Some(like(x, d)?)]
            }
            Op::ClampMin(c) => {
                let x = input(0);
                let d = x.data().iter().zip(gd).map(|(&v, &gv)| if v > *c { gv } else { T::zero() }).collect();
                vec![Some(like(x, d)?)]
            }
            Op::Square => {
                let x = input(0);
                let two = T::from_f64_lossy(2.0);
                let d = x.data().iter().zip(gd).map(|(&v, &gv)| two * v * gv).collect();
                vec![Some(like(x, d)?)]
            }
            Op::Scale(c) => vec![Some(like(g, gd.iter().map(|&v| v * *c).collect())?)],
            Op::MaxPool2 { argmax } => {
                let x = input(0);
                let mut d = vec![T::zero(); x.len()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    d[idx as usize] += gv;
                }
                vec![Some(like(x, d)?)]
            }
            Op::Upsample2 => {
                let x = input(0);
                let xs = x.shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut d = vec![T::zero(); x.len()];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[p * h * w + (y / 2) * w + xx / 2] += gd[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                vec![Some(like(x, d)?)]
            }
            Op::Concat => {
                let (n, total_c, sp) = ncs(out.shape());
                let mut res = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for i in 0..node.inputs.len() {
                    let part = input(i);
                    let c = part.shape()[1];
                    let mut d = Vec::with_capacity(part.len());
                    for b in 0..n {
                        let start = (b * total_c + offset) * sp;
                        d.extend_from_slice(&gd[start..start + c * sp]);
                    }
                    offset += c;
                    res.push(Some(like(part, d)?));
                }
                res
            }
            Op::Dropout { mask } => {
                vec![Some(like(g, gd.iter().zip(mask).map(|(&a, &m)| a * m).collect())?)]
            }
            Op::Softmax => {
                let (n, c, s) = ncs(out.shape());
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for i in 0..n {
                    for j in 0..s {
                        let at = |k: usize| (i * c + k) * s + j;
                        let dot: T = (0..c).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..c {
                            d[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![Some(like(out, d)?)]
            }
            Op::LogSoftmax => {
                let (n, c, s) = ncs(out.shape());
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for i in 0..n {
                    for j in 0..s {
                        let at = |k: usize| (i * c + k) * s + j;
                        let gsum: T = (0..c).map(|k| gd[at(k)]).sum();
                        for k in 0..c {
                            d[at(k)] = gd[at(k)] - y[at(k)].exp() * gsum;
                        }
                    }
                }
                vec![Some(like(out, d)?)]
            }
            Op::CrossEntropy { labels } => {
                let x = input(0);
                let p = Self::softmax_impl(x, false)?;
                let (n, c, s) = ncs(x.shape());
                let scale = gd[0] / T::from_usize(n * s).unwrap();
                let mut d: Vec<T> = p.data().iter().map(|&v| v * scale).collect();
                for i in 0..n {
                    for j in 0..s {
                        d[(i * c + labels[i * s + j] as usize) * s + j] -= scale;
                    }
                }
                vec![Some(like(x, d)?)]
            }
            Op::Mse => {
                let (a, b) = (input(0), input(1));
                let k = T::from_f64_lossy(2.0) * gd[0] / T::from_usize(a.len()).unwrap();
                let da: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| k * (x - y)).collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                vec![Some(like(a, da)?), Some(like(b, db)?)]
            }
            Op::Pick { index } => {
                let x = input(0);
                let (n, c, s) = ncs(x.shape());
                let mut d = vec![T::zero(); x.len()];
                for p in 0..n * s {
                    d[((p / s) * c + index[p] as usize) * s + p % s] += gd[p];
                }
                vec![Some(like(x, d)?)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let da = gd.iter().zip(b.data()).map(|(&gv, &v)| gv * v).collect();
                let db = gd.iter().zip(a.data()).map(|(&gv, &v)| gv * v).collect();
                vec![Some(like(a, da)?), Some(like(b, db)?)]
            }
            Op::MulConst(c) => {
                vec![Some(like(g, gd.iter().zip(c).map(|(&a, &b)| a * b).collect())?)]
            }
            Op::Sum => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), gd[0]))]
            }
            Op::Mean => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), gd[0] / T::from_usize(x.len()).unwrap()))]
            }
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(contrib),
    }
}
