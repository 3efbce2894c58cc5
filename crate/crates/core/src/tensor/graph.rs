//! Reverse-mode automatic differentiation over dense fp64 tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is pushed, and [`Graph::backward`] walks the node list in reverse,
//! accumulating adjoints into every node that transitively depends on a
//! gradient-requiring leaf. Only the handful of ops the toy UNet needs are
//! provided. Shape mismatches are programming errors and panic.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Silu(Var),
    Gelu(Var),
    Linear(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Option<Array2<f64>>,
    },
    Upsample2x(Var),
    AvgPool {
        x: Var,
        kh: usize,
        kw: usize,
    },
    ToTokens(Var),
    FromTokens {
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    Mse {
        x: Var,
        target: Arc<Tensor>,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let out = self.value(a) + self.value(b);
        let ng = self.any_grad(&[a, b]);
        self.push(Arc::new(out), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let out = self.value(a) - self.value(b);
        let ng = self.any_grad(&[a, b]);
        self.push(Arc::new(out), Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        let ng = self.any_grad(&[a]);
        self.push(Arc::new(out), Op::Scale(a, factor), ng)
    }

    /// Broadcast add. `bias` is either `[C]`, added along axis 1 of `x`, or
    /// `[B, C]`, added over the spatial axes of a rank-4 `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut out = xv.clone();
        match bv.ndim() {
            1 => {
                assert_eq!(xv.shape()[1], bv.len(), "bias channels");
                for (mut lane, &b) in out.axis_iter_mut(Axis(1)).zip(bv.iter()) {
                    lane += b;
                }
            }
            2 => {
                assert_eq!(xv.ndim(), 4, "per-sample bias needs a rank-4 input");
                assert_eq!(&xv.shape()[..2], bv.shape(), "per-sample bias shape");
                let (nb, nc) = (bv.shape()[0], bv.shape()[1]);
                for bi in 0..nb {
                    for c in 0..nc {
                        let b = bv[[bi, c]];
                        out.slice_mut(s![bi, c, .., ..]).mapv_inplace(|v| v + b);
                    }
                }
            }
            _ => panic!("unsupported bias rank {}", bv.ndim()),
        }
        let ng = self.any_grad(&[x, bias]);
        self.push(Arc::new(out), Op::AddBias(x, bias), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(out), Op::Silu(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(out), Op::Gelu(x), ng)
    }

    /// `x · wᵀ` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xv = as2(self.value(x));
        let wv = as2(self.value(w));
        assert_eq!(xv.ncols(), wv.ncols(), "linear inner dimension");
        let out = xv.dot(&wv.t()).into_dyn();
        let ng = self.any_grad(&[x, w]);
        self.push(Arc::new(out), Op::Linear(x, w), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension");
        let out = av.dot(&bv).into_dyn();
        let ng = self.any_grad(&[a, b]);
        self.push(Arc::new(out), Op::MatMul(a, b), ng)
    }

    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4, "conv2d input rank");
        assert_eq!(wv.ndim(), 4, "conv2d weight rank");
        let (b, ci, h, wd) = dims4(xv);
        let (co, wci, k, k2) = dims4(wv);
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert_eq!(k, k2, "square kernels only");
        let geo = ConvGeometry::new(b, ci, h, wd, k, stride, pad);
        let cols = im2col(xv, &geo);
        let w2 = wv
            .as_standard_layout()
            .into_shape_with_order((co, ci * k * k))
            .expect("weight matrix");
        let y2 = w2.dot(&cols);
        let out = cols_to_nchw(&y2, b, co, geo.ho, geo.wo);
        let ng = self.any_grad(&[x, w]);
        let cols = if self.nodes[w.0].needs_grad {
            Some(cols)
        } else {
            None
        };
        self.push(
            Arc::new(out),
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            ng,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out[[bi, ci, i, j]] = xv[[bi, ci, i / 2, j / 2]];
                    }
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(out), Op::Upsample2x(x), ng)
    }

    pub fn avg_pool(&mut self, x: Var, kh: usize, kw: usize) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv);
        assert!(h % kh == 0 && w % kw == 0, "avg_pool window must tile input");
        let (oh, ow) = (h / kh, w / kw);
        let norm = 1.0 / (kh * kw) as f64;
        let mut out = ArrayD::zeros(IxDyn(&[b, c, oh, ow]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let cell = xv.slice(s![bi, ci, i * kh..(i + 1) * kh, j * kw..(j + 1) * kw]);
                        out[[bi, ci, i, j]] = cell.sum() * norm;
                    }
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(out), Op::AvgPool { x, kh, kw }, ng)
    }

    /// `[B, C, H, W]` → `[B·H·W, C]`, row-major over (b, h, w).
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv);
        let out = xv
            .view()
            .permuted_axes(IxDyn(&[0, 2, 3, 1]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[b * h * w, c]))
            .expect("standard layout");
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(out), Op::ToTokens(x), ng)
    }

    pub fn from_tokens(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Var {
        let out = tokens_to_nchw(self.value(x), batch, h, w);
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(out), Op::FromTokens { x, batch, h, w }, ng)
    }

    /// Multi-head scaled dot-product attention. Every query row of
    /// `q: [Nq, C]` attends over the shared `k, v: [L, C]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (out, probs) = attention_forward(
            &as2(self.value(q)),
            &as2(self.value(k)),
            &as2(self.value(v)),
            heads,
        );
        let ng = self.any_grad(&[q, k, v]);
        self.push(
            Arc::new(out.into_dyn()),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Per-head attention probabilities `[Nq, L]` recorded by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean squared error against a constant target; produces a scalar.
    pub fn mse(&mut self, x: Var, target: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape");
        let n = xv.len() as f64;
        let loss = xv
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.any_grad(&[x]);
        self.push(
            Arc::new(ArrayD::from_elem(IxDyn(&[]), loss)),
            Op::Mse { x, target },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.any_grad(&[x]);
        self.push(
            Arc::new(ArrayD::from_elem(IxDyn(&[]), total)),
            Op::Sum(x),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(out), Op::Reshape(x), ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    accumulate(grads, *a, g * *f);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if wants(*bias) {
                    let bv = self.value(*bias);
                    let gb = match bv.ndim() {
                        1 => {
                            let mut acc = ArrayD::zeros(bv.raw_dim());
                            for (c, lane) in g.axis_iter(Axis(1)).enumerate() {
                                acc[[c]] = lane.sum();
                            }
                            acc
                        }
                        _ => {
                            let (nb, nc) = (bv.shape()[0], bv.shape()[1]);
                            let mut acc = ArrayD::zeros(bv.raw_dim());
                            for bi in 0..nb {
                                for c in 0..nc {
                                    acc[[bi, c]] = g.slice(s![bi, c, .., ..]).sum();
                                }
                            }
                            acc
                        }
                    };
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Silu(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    gx.zip_mut_with(xv, |gi, &xi| {
                        let sg = sigmoid(xi);
                        *gi *= sg * (1.0 + xi * (1.0 - sg));
                    });
                    accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(*x), |gi, &xi| *gi *= gelu_grad(xi));
                    accumulate(grads, *x, gx);
                }
            }
            Op::Linear(x, w) => {
                let g2 = as2(g);
                if wants(*x) {
                    let wv = as2(self.value(*w));
                    accumulate(grads, *x, g2.dot(&wv).into_dyn());
                }
                if wants(*w) {
                    let xv = as2(self.value(*x));
                    accumulate(grads, *w, g2.t().dot(&xv).into_dyn());
                }
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                if wants(*a) {
                    let bv = as2(self.value(*b));
                    accumulate(grads, *a, g2.dot(&bv.t()).into_dyn());
                }
                if wants(*b) {
                    let av = as2(self.value(*a));
                    accumulate(grads, *b, av.t().dot(&g2).into_dyn());
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (b, ci, h, wd) = dims4(xv);
                let (co, _, k, _) = dims4(wv);
                let geo = ConvGeometry::new(b, ci, h, wd, k, *stride, *pad);
                let gy2 = nchw_to_cols(g, co);
                if wants(*w) {
                    let recomputed;
                    let cols = match cols {
                        Some(c) => c,
                        None => {
                            recomputed = im2col(xv, &geo);
                            &recomputed
                        }
                    };
                    let gw = standard(gy2.dot(&cols.t()))
                        .into_shape_with_order(IxDyn(&[co, ci, k, k]))
                        .expect("weight gradient shape");
                    accumulate(grads, *w, gw);
                }
                if wants(*x) {
                    let w2 = wv
                        .as_standard_layout()
                        .into_shape_with_order((co, ci * k * k))
                        .expect("weight matrix");
                    let gcols = w2.t().dot(&gy2);
                    accumulate(grads, *x, col2im(&gcols, &geo));
                }
            }
            Op::Upsample2x(x) => {
                if wants(*x) {
                    let (b, c, h, w) = dims4(self.value(*x));
                    let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..2 * h {
                                for j in 0..2 * w {
                                    gx[[bi, ci, i / 2, j / 2]] += g[[bi, ci, i, j]];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::AvgPool { x, kh, kw } => {
                if wants(*x) {
                    let (b, c, h, w) = dims4(self.value(*x));
                    let norm = 1.0 / (kh * kw) as f64;
                    let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    gx[[bi, ci, i, j]] = g[[bi, ci, i / kh, j / kw]] * norm;
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::ToTokens(x) => {
                if wants(*x) {
                    let (b, _, h, w) = dims4(self.value(*x));
                    accumulate(grads, *x, tokens_to_nchw(g, b, h, w));
                }
            }
            Op::FromTokens { x, batch, h, w } => {
                if wants(*x) {
                    let c = g.shape()[1];
                    let gx = g
                        .view()
                        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&[batch * h * w, c]))
                        .expect("standard layout");
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    &as2(self.value(*q)),
                    &as2(self.value(*k)),
                    &as2(self.value(*v)),
                    &as2(g),
                    *heads,
                    probs,
                );
                if wants(*q) {
                    accumulate(grads, *q, gq.into_dyn());
                }
                if wants(*k) {
                    accumulate(grads, *k, gk.into_dyn());
                }
                if wants(*v) {
                    accumulate(grads, *v, gv.into_dyn());
                }
            }
            Op::Mse { x, target } => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let scale = 2.0 * g.iter().next().copied().unwrap_or(0.0) / xv.len() as f64;
                    let mut gx = xv - target.as_ref();
                    gx *= scale;
                    accumulate(grads, *x, gx);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gs = g.iter().next().copied().unwrap_or(0.0);
                    accumulate(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), gs));
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let gx = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(self.value(*x).raw_dim())
                        .expect("reshape gradient");
                    accumulate(grads, *x, gx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "rank-4 tensor expected, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

struct ConvGeometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(b: usize, ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            b,
            ci,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn ncols(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Input coordinate for output index `o` and kernel tap `tap`, if inside.
    #[inline]
    fn src(&self, o: usize, tap: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + tap) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

fn im2col(x: &Tensor, geo: &ConvGeometry) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let ncol = geo.ncols();
    let k = geo.k;
    let mut cols = vec![0.0; geo.ci * k * k * ncol];
    for c in 0..geo.ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for bi in 0..geo.b {
                    let plane = (bi * geo.ci + c) * geo.h * geo.w;
                    for oh in 0..geo.ho {
                        let Some(ih) = geo.src(oh, ki, geo.h) else {
                            continue;
                        };
                        let base = (bi * geo.ho + oh) * geo.wo;
                        for ow in 0..geo.wo {
                            if let Some(iw) = geo.src(ow, kj, geo.w) {
                                dst[base + ow] = xs[plane + ih * geo.w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((geo.ci * k * k, ncol), cols).expect("im2col shape")
}

fn col2im(cols: &Array2<f64>, geo: &ConvGeometry) -> Tensor {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let ncol = geo.ncols();
    let k = geo.k;
    let mut out = vec![0.0; geo.b * geo.ci * geo.h * geo.w];
    for c in 0..geo.ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cs[row * ncol..(row + 1) * ncol];
                for bi in 0..geo.b {
                    let plane = (bi * geo.ci + c) * geo.h * geo.w;
                    for oh in 0..geo.ho {
                        let Some(ih) = geo.src(oh, ki, geo.h) else {
                            continue;
                        };
                        let base = (bi * geo.ho + oh) * geo.wo;
                        for ow in 0..geo.wo {
                            if let Some(iw) = geo.src(ow, kj, geo.w) {
                                out[plane + ih * geo.w + iw] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[geo.b, geo.ci, geo.h, geo.w]), out).expect("col2im shape")
}

/// `a` in row-major order; copies only when it is not already.
fn standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// `[Cout, B·Ho·Wo]` → `[B, Cout, Ho, Wo]`.
fn cols_to_nchw(y2: &Array2<f64>, b: usize, co: usize, ho: usize, wo: usize) -> Tensor {
    y2.as_standard_layout()
        .into_shape_with_order((co, b, ho * wo))
        .expect("conv output")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[b, co, ho, wo]))
        .expect("conv output shape")
}

fn nchw_to_cols(g: &Tensor, co: usize) -> Array2<f64> {
    let (b, c, ho, wo) = dims4(g);
    assert_eq!(c, co);
    let g = g.as_standard_layout();
    g.view()
        .into_shape_with_order((b, co, ho * wo))
        .expect("contiguous gradient")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, b * ho * wo))
        .expect("cols shape")
}

fn tokens_to_nchw(t: &Tensor, b: usize, h: usize, w: usize) -> Tensor {
    let c = t.shape()[1];
    assert_eq!(t.shape()[0], b * h * w, "token count");
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[b, h, w, c]))
        .expect("token reshape")
        .permuted_axes(IxDyn(&[0, 3, 1, 2]))
        .as_standard_layout()
        .into_owned()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Forward pass shared with the standalone helpers in `vcm`.
pub(crate) fn attention_forward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (nq, c) = q.dim();
    assert_eq!(k.ncols(), c, "key width");
    assert_eq!(v.ncols(), c, "value width");
    assert_eq!(k.nrows(), v.nrows(), "key/value length");
    assert!(heads > 0 && c % heads == 0, "heads must divide width");
    let dh = c / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((nq, c));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= inv;
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

fn attention_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    g: &ArrayView2<f64>,
    heads: usize,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let c = q.ncols();
    let dh = c / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut gq = Array2::zeros(q.raw_dim());
    let mut gk = Array2::zeros(k.raw_dim());
    let mut gv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let go = g.slice(cols);
        gv.slice_mut(cols).assign(&p.t().dot(&go));
        let gp = go.dot(&v.slice(cols).t());
        // softmax Jacobian, row by row
        let mut gs = &gp * p;
        let row_dot = gs.sum_axis(Axis(1));
        for (mut row, (prow, &d)) in gs
            .axis_iter_mut(Axis(0))
            .zip(p.axis_iter(Axis(0)).zip(row_dot.iter()))
        {
            row.zip_mut_with(&prow, |x, &pi| *x -= pi * d);
        }
        gs *= inv;
        gq.slice_mut(cols).assign(&gs.dot(&k.slice(cols)));
        gk.slice_mut(cols).assign(&gs.t().dot(&q.slice(cols)));
    }
    (gq, gk, gv)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}
