//! Define-by-run reverse-mode differentiation over dense `ndarray` tensors.
//!
//! Every forward pass builds a fresh [`Graph`]; parameters enter as leaves and
//! [`Graph::backward`] returns gradients for the leaves that asked for them.
//! Images and feature maps are laid out NCHW.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use crate::scalar::{c, Scalar};

pub type Tensor<S> = ArrayD<S>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `x[N, C, ...] + b[C]`
    BiasAdd(Var, Var),
    LeakyRelu(Var, S),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    /// `[N, C] -> [C]`
    MeanRows(Var),
    Reshape(Var),
    /// `[1, ...] -> [n, ...]`
    RepeatBatch(Var),
    Conv2d {
        x: Var,
        w: Var,
        pad: usize,
        cols: Vec<Array2<S>>,
    },
    /// `x[N, C, H, W] * s[N, C]`
    ScaleChannels(Var, Var),
    Upsample2(Var),
    AvgPool2(Var),
    LogSoftmax(Var),
    Softmax(Var),
    /// KL of the normalised entries of `x` against the uniform distribution.
    KlUniform(Var),
    /// Masked entries come from a constant, so they carry no gradient to `x`.
    Replace {
        x: Var,
        mask: Vec<bool>,
    },
    /// Per-channel standardisation over every axis but 1.
    BatchNorm {
        x: Var,
        inv_std: Vec<S>,
    },
    /// `x[N, C, ...] * a[C] + b[C]`
    ChannelAffine(Var, Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn as2<S: Scalar>(t: &Tensor<S>) -> ArrayView2<'_, S> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("operand must be two-dimensional")
}

fn standard<S: Scalar>(t: Tensor<S>) -> Tensor<S> {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected an NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Unfolds one `C×H×W` sample into a `(C·k·k) × (H·W)` patch matrix
/// (stride 1, zero padding `pad`, same output size when `k = 2·pad + 1`).
fn im2col<S: Scalar>(x: &[S], ch: usize, h: usize, w: usize, k: usize, pad: usize) -> Array2<S> {
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let mut cols = Array2::<S>::zeros((ch * k * k, oh * ow));
    let out = cols.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..ch {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<S: Scalar>(cols: &Array2<S>, dx: &mut [S], ch: usize, h: usize, w: usize, k: usize, pad: usize) {
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    for ci in 0..ch {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let s = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += s[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a zero-dimensional (or single-element) node.
    pub fn scalar(&self, v: Var) -> S {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "node is not a scalar");
        *t.iter().next().expect("one element")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a) + s;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x);
        let bs = self.value(b);
        assert_eq!(bs.ndim(), 1, "bias must be a vector");
        assert_eq!(xs.shape()[1], bs.len(), "bias length must match axis 1");
        let mut out = xs.clone();
        for (ci, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let bv = bs[ci];
            lane.mapv_inplace(|e| e + bv);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::BiasAdd(x, b), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let v = self.value(x).mapv(|e| if e > S::zero() { e } else { e * slope });
        let ng = self.ng(x);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, S::zero())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.tanh());
        let ng = self.ng(x);
        self.push(v, Op::Tanh(x), ng)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(S::zero()) + (-e.abs()).exp().ln_1p());
        let ng = self.ng(x);
        self.push(v, Op::Softplus(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.abs());
        let ng = self.ng(x);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e * e);
        let ng = self.ng(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.ln());
        let ng = self.ng(x);
        self.push(v, Op::Log(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n: S = c(t.len() as f64);
        let s: S = t.iter().copied().sum::<S>() / n;
        let ng = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Mean(x), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = as2(self.value(x))
            .mean_axis(Axis(0))
            .expect("at least one row")
            .into_dyn();
        let ng = self.ng(x);
        self.push(m, Op::MeanRows(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Tiles a batch-of-one tensor `n` times along axis 0.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape()[0], 1, "repeat_batch expects a leading axis of 1");
        let views: Vec<_> = (0..n).map(|_| t.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("same shapes");
        let ng = self.ng(x);
        self.push(v, Op::RepeatBatch(x), ng)
    }

    /// Stride-1 convolution of `x[N, C, H, W]` with `w[O, C, k, k]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let (n, ch, h, wd) = dims4(self.shape(x));
        let (o, wc, k, k2) = dims4(self.shape(w));
        assert_eq!(ch, wc, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let xs = self.value(x).as_slice().expect("standard layout");
        let wmat = self
            .value(w)
            .view()
            .into_shape_with_order((o, ch * k * k))
            .expect("contiguous kernel");
        let keep_cols = self.ng(w);
        let mut out = Vec::with_capacity(n * o * oh * ow);
        let mut saved = Vec::new();
        for i in 0..n {
            let cols = im2col(&xs[i * ch * h * wd..(i + 1) * ch * h * wd], ch, h, wd, k, pad);
            let y = wmat.dot(&cols);
            out.extend(y.iter().copied());
            if keep_cols {
                saved.push(cols);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, o, oh, ow]), out).expect("conv output shape");
        let ng = self.ng(x) || self.ng(w);
        self.push(v, Op::Conv2d { x, w, pad, cols: saved }, ng)
    }

    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (n, ch, h, w) = dims4(self.shape(x));
        assert_eq!(self.shape(s), &[n, ch], "channel scales must be [N, C]");
        let sv = self.value(s).clone();
        let mut out = self.value(x).clone();
        {
            let o = out.as_slice_mut().expect("standard layout");
            for i in 0..n {
                for ci in 0..ch {
                    let f = sv[[i, ci]];
                    for e in &mut o[(i * ch + ci) * h * w..(i * ch + ci + 1) * h * w] {
                        *e *= f;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleChannels(x, s), ng)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, ch, h, w) = dims4(self.shape(x));
        let xs = self.value(x).as_slice().expect("standard layout");
        let mut out = vec![S::zero(); n * ch * 4 * h * w];
        for p in 0..n * ch {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, ch, 2 * h, 2 * w]), out).expect("shape");
        let ng = self.ng(x);
        self.push(v, Op::Upsample2(x), ng)
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, ch, h, w) = dims4(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).as_slice().expect("standard layout");
        let quarter: S = c(0.25);
        let mut out = vec![S::zero(); n * ch * oh * ow];
        for p in 0..n * ch {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let a = src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1];
                    let b = src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * ow + xx] = (a + b) * quarter;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, ch, oh, ow]), out).expect("shape");
        let ng = self.ng(x);
        self.push(v, Op::AvgPool2(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = as2(self.value(x)).to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&e| (e - m).exp()).sum::<S>().ln() + m;
            row.mapv_inplace(|e| e - lse);
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::LogSoftmax(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(as2(self.value(x)));
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::Softmax(x), ng)
    }

    /// `KL(x / Σx ‖ uniform)` over all entries of a non-negative `x`.
    ///
    /// Logs are taken relative to the first positive entry, so bitwise-equal
    /// entries give exactly zero.
    pub fn kl_uniform(&mut self, x: Var) -> Var {
        let v = kl_uniform_terms(self.value(x)).0;
        let ng = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::KlUniform(x), ng)
    }

    /// Copies `x`, overwriting entries where `mask` is set with the matching
    /// entries of `replacement`.
    pub fn replace(&mut self, x: Var, mask: Vec<bool>, replacement: &Tensor<S>) -> Var {
        let xs = self.value(x);
        assert_eq!(xs.shape(), replacement.shape(), "replacement shape");
        assert_eq!(mask.len(), xs.len(), "mask length");
        let mut out = xs.clone();
        for ((o, &m), &r) in out.iter_mut().zip(&mask).zip(replacement.iter()) {
            if m {
                *o = r;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Replace { x, mask }, ng)
    }

    /// Standardises each channel (axis 1) with the statistics of this batch.
    pub fn batch_norm(&mut self, x: Var, eps: S) -> Var {
        let mut out = self.value(x).clone();
        let (n, ch, inner) = channel_dims(out.shape());
        let m: S = c((n * inner) as f64);
        let mut inv_std = Vec::with_capacity(ch);
        {
            let o = out.as_slice_mut().expect("standard layout");
            for ci in 0..ch {
                let lane = |i: usize| (i * ch + ci) * inner..(i * ch + ci + 1) * inner;
                let mean = (0..n).flat_map(|i| o[lane(i)].iter().copied()).sum::<S>() / m;
                let var = (0..n)
                    .flat_map(|i| o[lane(i)].iter().map(move |&e| (e - mean) * (e - mean)))
                    .sum::<S>()
                    / m;
                let is = S::one() / (var + eps).sqrt();
                for i in 0..n {
                    for e in &mut o[lane(i)] {
                        *e = (*e - mean) * is;
                    }
                }
                inv_std.push(is);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::BatchNorm { x, inv_std }, ng)
    }

    pub fn channel_affine(&mut self, x: Var, a: Var, b: Var) -> Var {
        let mut out = self.value(x).clone();
        let (n, ch, inner) = channel_dims(out.shape());
        assert_eq!(self.shape(a), &[ch], "channel scale must be [C]");
        assert_eq!(self.shape(b), &[ch], "channel shift must be [C]");
        let (av, bv) = (self.value(a), self.value(b));
        {
            let o = out.as_slice_mut().expect("standard layout");
            for i in 0..n {
                for ci in 0..ch {
                    for e in &mut o[(i * ch + ci) * inner..(i * ch + ci + 1) * inner] {
                        *e = *e * av[ci] + bv[ci];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(a) || self.ng(b);
        self.push(out, Op::ChannelAffine(x, a, b), ng)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<S> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), S::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.zip_mut_with(&g, |a, &b| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, gy * self.value(*b));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gy * self.value(*a));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy * *s),
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::MatMul(a, b) => {
                let g2 = as2(gy);
                if self.ng(*a) {
                    let ga = g2.dot(&as2(self.value(*b)).t());
                    self.accumulate(grads, *a, ga.into_dyn());
                }
                if self.ng(*b) {
                    let gb = as2(self.value(*a)).t().dot(&g2);
                    self.accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                if self.ng(*b) {
                    let gb: Vec<S> = gy.axis_iter(Axis(1)).map(|lane| lane.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, ArrayD::from_shape_vec(IxDyn(&[gb.len()]), gb).expect("bias"));
                }
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let mut g = gy.clone();
                for (ge, &xe) in g.iter_mut().zip(self.value(*x).iter()) {
                    if xe <= S::zero() {
                        *ge *= slope;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let mut g = gy.clone();
                for (ge, &ye) in g.iter_mut().zip(node.value.iter()) {
                    *ge *= S::one() - ye * ye;
                }
                self.accumulate(grads, *x, g);
            }
            Op::Softplus(x) => {
                let mut g = gy.clone();
                for (ge, &xe) in g.iter_mut().zip(self.value(*x).iter()) {
                    *ge = *ge / (S::one() + (-xe).exp());
                }
                self.accumulate(grads, *x, g);
            }
            Op::Abs(x) => {
                let mut g = gy.clone();
                for (ge, &xe) in g.iter_mut().zip(self.value(*x).iter()) {
                    *ge = if xe > S::zero() {
                        *ge
                    } else if xe < S::zero() {
                        -*ge
                    } else {
                        S::zero()
                    };
                }
                self.accumulate(grads, *x, g);
            }
            Op::Square(x) => {
                let two: S = c(2.0);
                let g = gy * &self.value(*x).mapv(|e| e * two);
                self.accumulate(grads, *x, g);
            }
            Op::Log(x) => {
                let g = gy / self.value(*x);
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let s = gy.iter().next().copied().expect("scalar");
                self.accumulate(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), s));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let s = gy.iter().next().copied().expect("scalar") / c::<S>(t.len() as f64);
                self.accumulate(grads, *x, ArrayD::from_elem(t.raw_dim(), s));
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let rows = t.shape()[0];
                let inv: S = c(1.0 / rows as f64);
                let g1 = gy.mapv(|e| e * inv);
                let mut g = ArrayD::zeros(t.raw_dim());
                for mut row in g.axis_iter_mut(Axis(0)) {
                    row.assign(&g1);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => {
                let g = gy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .expect("reshape back");
                self.accumulate(grads, *x, g);
            }
            Op::RepeatBatch(x) => {
                let g = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *x, g);
            }
            Op::Conv2d { x, w, pad, cols } => {
                let (n, ch, h, wd) = dims4(self.shape(*x));
                let (o, _, k, _) = dims4(self.shape(*w));
                let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
                let gys = gy.as_slice().expect("standard layout");
                let wmat = self
                    .value(*w)
                    .view()
                    .into_shape_with_order((o, ch * k * k))
                    .expect("contiguous kernel");
                if self.ng(*w) {
                    let mut gw = Array2::<S>::zeros((o, ch * k * k));
                    for (i, col) in cols.iter().enumerate() {
                        let gyi = ArrayView2::from_shape((o, oh * ow), &gys[i * o * oh * ow..(i + 1) * o * oh * ow])
                            .expect("grad slice");
                        ndarray::linalg::general_mat_mul(S::one(), &gyi, &col.t(), S::one(), &mut gw);
                    }
                    let gw = gw.into_shape_with_order(IxDyn(&[o, ch, k, k])).expect("kernel shape");
                    self.accumulate(grads, *w, gw);
                }
                if self.ng(*x) {
                    let mut gx = vec![S::zero(); n * ch * h * wd];
                    for i in 0..n {
                        let gyi = ArrayView2::from_shape((o, oh * ow), &gys[i * o * oh * ow..(i + 1) * o * oh * ow])
                            .expect("grad slice");
                        let gcols = wmat.t().dot(&gyi);
                        col2im_add(
                            &gcols,
                            &mut gx[i * ch * h * wd..(i + 1) * ch * h * wd],
                            ch,
                            h,
                            wd,
                            k,
                            *pad,
                        );
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(&[n, ch, h, wd]), gx).expect("shape");
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ScaleChannels(x, s) => {
                let (n, ch, h, w) = dims4(self.shape(*x));
                let gys = gy.as_slice().expect("standard layout");
                if self.ng(*x) {
                    let sv = self.value(*s);
                    let mut g = gy.clone();
                    let gs = g.as_slice_mut().expect("standard layout");
                    for i in 0..n {
                        for ci in 0..ch {
                            let f = sv[[i, ci]];
                            for e in &mut gs[(i * ch + ci) * h * w..(i * ch + ci + 1) * h * w] {
                                *e *= f;
                            }
                        }
                    }
                    self.accumulate(grads, *x, g);
                }
                if self.ng(*s) {
                    let xs = self.value(*x).as_slice().expect("standard layout");
                    let mut g = ArrayD::<S>::zeros(IxDyn(&[n, ch]));
                    for i in 0..n {
                        for ci in 0..ch {
                            let r = (i * ch + ci) * h * w..(i * ch + ci + 1) * h * w;
                            g[[i, ci]] = gys[r.clone()].iter().zip(&xs[r]).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *s, g);
                }
            }
            Op::Upsample2(x) => {
                let (n, ch, h, w) = dims4(self.shape(*x));
                let gys = gy.as_slice().expect("standard layout");
                let mut g = vec![S::zero(); n * ch * h * w];
                for p in 0..n * ch {
                    let src = &gys[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                let g = ArrayD::from_shape_vec(IxDyn(&[n, ch, h, w]), g).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::AvgPool2(x) => {
                let (n, ch, h, w) = dims4(self.shape(*x));
                let (oh, ow) = (h / 2, w / 2);
                let gys = gy.as_slice().expect("standard layout");
                let quarter: S = c(0.25);
                let mut g = vec![S::zero(); n * ch * h * w];
                for p in 0..n * ch {
                    let src = &gys[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
                let g = ArrayD::from_shape_vec(IxDyn(&[n, ch, h, w]), g).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::LogSoftmax(x) => {
                let y = as2(&node.value);
                let mut g = as2(gy).to_owned();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let total: S = grow.iter().copied().sum();
                    for (ge, &ye) in grow.iter_mut().zip(yrow.iter()) {
                        *ge -= ye.exp() * total;
                    }
                }
                self.accumulate(grads, *x, g.into_dyn());
            }
            Op::Softmax(x) => {
                let y = as2(&node.value);
                let mut g = as2(gy).to_owned();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot: S = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
                    for (ge, &ye) in grow.iter_mut().zip(yrow.iter()) {
                        *ge = ye * (*ge - dot);
                    }
                }
                self.accumulate(grads, *x, g.into_dyn());
            }
            Op::KlUniform(x) => {
                let t = self.value(*x);
                let (kl, log_cu, total) = kl_uniform_terms(t);
                let scale = gy.iter().next().copied().expect("scalar") / total;
                let g = log_cu.mapv(|l| scale * (l - kl));
                self.accumulate(grads, *x, g);
            }
            Op::Replace { x, mask } => {
                let mut g = gy.clone();
                for (ge, &m) in g.iter_mut().zip(mask) {
                    if m {
                        *ge = S::zero();
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::BatchNorm { x, inv_std } => {
                let (n, ch, inner) = channel_dims(gy.shape());
                let m: S = c((n * inner) as f64);
                let gys = gy.as_slice().expect("standard layout");
                let xh = node.value.as_slice().expect("standard layout");
                let mut g = vec![S::zero(); gys.len()];
                for (ci, &is) in inv_std.iter().enumerate() {
                    let lanes = || (0..n).flat_map(move |i| (i * ch + ci) * inner..(i * ch + ci + 1) * inner);
                    let sum_g = lanes().map(|j| gys[j]).sum::<S>();
                    let sum_gx = lanes().map(|j| gys[j] * xh[j]).sum::<S>();
                    for j in lanes() {
                        g[j] = is * (gys[j] - (sum_g + xh[j] * sum_gx) / m);
                    }
                }
                let g = ArrayD::from_shape_vec(gy.raw_dim(), g).expect("shape");
                self.accumulate(grads, *x, g);
            }
            Op::ChannelAffine(x, a, b) => {
                let (n, ch, inner) = channel_dims(gy.shape());
                let gys = gy.as_slice().expect("standard layout");
                if self.ng(*x) {
                    let av = self.value(*a);
                    let mut g = gy.clone();
                    let gs = g.as_slice_mut().expect("standard layout");
                    for i in 0..n {
                        for ci in 0..ch {
                            for e in &mut gs[(i * ch + ci) * inner..(i * ch + ci + 1) * inner] {
                                *e *= av[ci];
                            }
                        }
                    }
                    self.accumulate(grads, *x, g);
                }
                let xs = self.value(*x).as_slice().expect("standard layout");
                let mut ga = vec![S::zero(); ch];
                let mut gb = vec![S::zero(); ch];
                for i in 0..n {
                    for ci in 0..ch {
                        for j in (i * ch + ci) * inner..(i * ch + ci + 1) * inner {
                            ga[ci] += gys[j] * xs[j];
                            gb[ci] += gys[j];
                        }
                    }
                }
                if self.ng(*a) {
                    self.accumulate(grads, *a, ArrayD::from_shape_vec(IxDyn(&[ch]), ga).expect("shape"));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, ArrayD::from_shape_vec(IxDyn(&[ch]), gb).expect("shape"));
                }
            }
        }
    }
}

/// `(N, C, product of trailing dims)` of an `[N, C, ...]` tensor.
fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [N, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Returns `(KL, ln(C·u), Σx)` where `u = x / Σx`. Zero entries contribute
/// nothing to the value; their log term is floored for the gradient.
fn kl_uniform_terms<S: Scalar>(x: &Tensor<S>) -> (S, Tensor<S>, S) {
    let n = x.len();
    let total: S = x.iter().copied().sum();
    let reference = x.iter().copied().find(|&v| v > S::zero()).unwrap_or(S::one()).ln();
    let rel = x.mapv(|v| {
        if v > S::zero() {
            v.ln() - reference
        } else {
            S::neg_infinity()
        }
    });
    let lse = rel.iter().map(|&r| r.exp()).sum::<S>().ln() - c::<S>(n as f64).ln();
    let floor: S = c(-60.0);
    let log_cu = rel.mapv(|r| (r - lse).max(floor));
    let kl = x
        .iter()
        .zip(log_cu.iter())
        .filter(|(&v, _)| v > S::zero())
        .map(|(&v, &l)| v / total * l)
        .sum();
    (kl, log_cu, total)
}

/// Row-wise softmax outside any graph.
pub fn softmax_rows<S: Scalar>(x: ArrayView2<'_, S>) -> Array2<S> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|e| (e - m).exp());
        let z: S = row.iter().copied().sum();
        row.mapv_inplace(|e| e / z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn reshape_accepts_column_major_tensors() {
        let a = ndarray::array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
            .reversed_axes()
            .into_dyn();
        let w = ndarray::array![[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]].into_dyn();
        let mut g = Graph::new();
        let x = g.param(a.clone());
        let r = g.reshape(x, &[6]);
        assert_eq!(g.value(r).as_slice().unwrap(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = g.reshape(r, &[3, 2]);
        let wc = g.constant(w.clone());
        let m = g.mul(back, wc);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &w);
    }

    /// Central differences against the tape for every entry of every input.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars);
        let grads = g.backward(root);
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], t);
            for idx in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.as_slice_mut().unwrap()[idx] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let r = f(&mut g, &vars);
                    g.scalar(r)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-5 + 1e-4 * numeric.abs(),
                    "input {k} entry {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], 1);
            let y = g.bias_add(y, v[2]);
            let y = g.leaky_relu(y, 0.2);
            let y = g.avg_pool2(y);
            let y = g.upsample2(y);
            let y = g.square(y);
            g.mean(y)
        });
    }

    #[test]
    fn modulation_and_tanh_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 3, 2, 2]);
        let s = rand_tensor(&mut rng, &[2, 3]);
        let w = rand_tensor(&mut rng, &[2, 3, 1, 1]);
        check(vec![x, s, w], |g, v| {
            let x = g.repeat_batch(v[0], 2);
            let y = g.scale_channels(x, v[1]);
            let y = g.conv2d(y, v[2], 0);
            let y = g.tanh(y);
            let y = g.abs(y);
            g.sum(y)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let q = rand_tensor(&mut rng, &[4, 3]);
        check(vec![x, w, q], |g, v| {
            let logits = g.matmul(v[0], v[1]);
            let p = g.softmax(logits);
            let lp = g.log_softmax(logits);
            let a = g.mul(p, v[2]);
            let m = g.mean_rows(p);
            let lm = g.log(m);
            let kl = g.mul(m, lm);
            let s1 = g.sum(a);
            let s2 = g.sum(kl);
            let s3 = g.mean(lp);
            let t = g.add(s1, s2);
            let t = g.sub(t, s3);
            let sp = g.softplus(t);
            g.scale(sp, 0.5)
        });
    }

    #[test]
    fn batch_norm_and_affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x4 = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let x2 = rand_tensor(&mut rng, &[5, 3]);
        let a = rand_tensor(&mut rng, &[2]);
        let b = rand_tensor(&mut rng, &[2]);
        let q4 = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let q2 = rand_tensor(&mut rng, &[5, 3]);
        check(vec![x4, a, b, q4], |g, v| {
            let h = g.batch_norm(v[0], 1e-5);
            let h = g.channel_affine(h, v[1], v[2]);
            let h = g.tanh(h);
            let m = g.mul(h, v[3]);
            g.sum(m)
        });
        check(vec![x2, q2], |g, v| {
            let h = g.batch_norm(v[0], 1e-5);
            let h = g.square(h);
            let m = g.mul(h, v[1]);
            g.sum(m)
        });
    }

    #[test]
    fn batch_norm_standardises_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[4, 2]), vec![1.0, 10.0, 2.0, 10.0, 3.0, 10.0, 4.0, 10.0]).unwrap(),
        );
        let y = g.batch_norm(x, 0.0);
        let v = g.value(y);
        let col0: Vec<f64> = (0..4).map(|i| v[[i, 0]]).collect();
        assert!(col0.iter().sum::<f64>().abs() < 1e-12);
        assert!((col0.iter().map(|e| e * e).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        let y = g.batch_norm(x, 1e-5);
        assert!((0..4).all(|i| g.value(y)[[i, 1]] == 0.0));
    }

    #[test]
    fn kl_uniform_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(ArrayD::from_elem(IxDyn(&[1, 3]), 0.1));
        let k = g.kl_uniform(u);
        assert_eq!(g.scalar(k), 0.0);
        let oh = g.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap());
        let k = g.kl_uniform(oh);
        assert!((g.scalar(k) - 2f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[5, 3]);
        check(vec![x], |g, v| {
            let p = g.softmax(v[0]);
            let m = g.mean_rows(p);
            g.kl_uniform(m)
        });
    }

    #[test]
    fn replace_blocks_gradient_on_masked_entries() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let repl = ArrayD::from_shape_vec(IxDyn(&[4]), vec![9.0; 4]).unwrap();
        let y = g.replace(x, vec![true, false, true, false], &repl);
        assert_eq!(g.value(y).as_slice().unwrap(), &[9.0, 2.0, 9.0, 4.0]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let b = g.param(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let m = g.matmul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
