//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node. Leaves are either trainable
//! parameters (`param`) or constants (`constant`/`detach`); only nodes that
//! transitively depend on a parameter carry gradient. Constants are the
//! stop-gradient mechanism: a detached value is a fresh leaf with no history.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    Mean {
        x: Var,
        axes: [bool; 4],
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
    GaussianValid {
        x: Var,
        kernel: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, or `None` when no gradient reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant leaf carrying the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Broadcast::new(av.shape(), bv.shape());
        let mut out = vec![0.0; bc.len()];
        let (ad, bd) = (av.data(), bv.data());
        bc.for_each(|o, i, j| out[o] = f(ad[i], bd[j]));
        let value = Tensor::new(bc.out_shape.clone(), out).expect("broadcast shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.mean();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    /// Mean of an NCHW tensor over the flagged axes, keeping reduced axes as size 1.
    pub fn mean_axes(&mut self, x: Var, axes: [bool; 4]) -> Var {
        let xv = &self.nodes[x.0].value;
        let out_shape = reduced_shape(xv.shape(), axes);
        let count = reduced_count(xv.shape(), axes) as f64;
        let bc = Broadcast::new(xv.shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let xd = xv.data();
        bc.for_each(|_, i, o| out[o] += xd[i]);
        out.iter_mut().for_each(|v| *v /= count);
        let value = Tensor::new(out_shape, out).expect("reduced shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean { x, axes }, rg)
    }

    /// Max of an NCHW tensor over the flagged axes (keepdim). Ties resolve to the first element.
    pub fn max_axes(&mut self, x: Var, axes: [bool; 4]) -> Var {
        let xv = &self.nodes[x.0].value;
        let out_shape = reduced_shape(xv.shape(), axes);
        let bc = Broadcast::new(xv.shape(), &out_shape);
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![f64::NEG_INFINITY; n_out];
        let mut argmax = vec![usize::MAX; n_out];
        let xd = xv.data();
        bc.for_each(|_, i, o| {
            if argmax[o] == usize::MAX || xd[i] > out[o] {
                out[o] = xd[i];
                argmax[o] = i;
            }
        });
        let value = Tensor::new(out_shape, out).expect("reduced shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Max { x, argmax }, rg)
    }

    /// Stride-1 2-D convolution with symmetric zero padding. `w` is `cout × cin × kh × kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let value = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            pad,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Conv2d { x, w, b, pad }, rg)
    }

    /// 2×2 stride-2 transposed convolution. `w` is `cin × cout × 2 × 2`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = conv_transpose2_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::ConvTranspose2 { x, w, b }, rg)
    }

    /// 2×2 stride-2 max pooling; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "max_pool2 needs even dims, got {h}x{w}"
        );
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out).expect("pool shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.nodes[parts[0].0].value.dims4();
        let mut c_total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.nodes[p.0].value.dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shape mismatch");
            c_total += pc;
        }
        let mut out = Vec::with_capacity(n * c_total * h * w);
        for ni in 0..n {
            for p in parts {
                let pv = &self.nodes[p.0].value;
                let len = pv.shape()[1] * h * w;
                out.extend_from_slice(&pv.data()[ni * len..(ni + 1) * len]);
            }
        }
        let value = Tensor::new(vec![n, c_total, h, w], out).expect("concat shape");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatChannels(parts.to_vec()), rg)
    }

    /// Per-plane separable filtering with `kernel ⊗ kernel`, "valid" extent.
    pub fn gaussian_valid(&mut self, x: Var, kernel: &[f64]) -> Var {
        let value = separable_valid(&self.nodes[x.0].value, kernel);
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::GaussianValid {
                x,
                kernel: kernel.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar (or any-shaped, seeded with ones) output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        grads[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (av, bv) = (self.value(*a), self.value(*b));
                let bc = Broadcast::new(av.shape(), bv.shape());
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    let gad = ga.data_mut();
                    bc.for_each(|o, i, _| gad[i] += gd[o]);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    let gbd = gb.data_mut();
                    bc.for_each(|o, _, j| gbd[j] += sign * gd[o]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ad, bd) = (av.data(), bv.data());
                let bc = Broadcast::new(av.shape(), bv.shape());
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    let gad = ga.data_mut();
                    bc.for_each(|o, i, j| gad[i] += gd[o] * bd[j]);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    let gbd = gb.data_mut();
                    bc.for_each(|o, i, j| gbd[j] += gd[o] * ad[i]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ad, bd) = (av.data(), bv.data());
                let bc = Broadcast::new(av.shape(), bv.shape());
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    let gad = ga.data_mut();
                    bc.for_each(|o, i, j| gad[i] += gd[o] / bd[j]);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    let gbd = gb.data_mut();
                    bc.for_each(|o, i, j| gbd[j] -= gd[o] * ad[i] / (bd[j] * bd[j]));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::Square(x) => {
                let gx = g
                    .zip_map(self.value(*x), |g, v| 2.0 * v * g)
                    .expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                // Subgradient 0 at the origin keeps zero-variance groups finite.
                let gx = g
                    .zip_map(&node.value, |g, s| if s > 0.0 { 0.5 * g / s } else { 0.0 })
                    .expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = g
                    .zip_map(self.value(*x), |g, v| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })
                    .expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let gx = g
                    .zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { slope * g })
                    .expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .zip_map(&node.value, |g, s| g * s * (1.0 - s))
                    .expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let gx = Tensor::full(xv.shape(), g.item() / xv.len() as f64);
                self.accumulate(grads, *x, gx);
            }
            Op::Mean { x, axes } => {
                let xv = self.value(*x);
                let count = reduced_count(xv.shape(), *axes) as f64;
                let bc = Broadcast::new(xv.shape(), node.value.shape());
                let mut gx = Tensor::zeros(xv.shape());
                let gxd = gx.data_mut();
                bc.for_each(|_, i, o| gxd[i] = gd[o] / count);
                self.accumulate(grads, *x, gx);
            }
            Op::Max { x, argmax } | Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let gxd = gx.data_mut();
                for (o, &i) in argmax.iter().enumerate() {
                    gxd[i] += gd[o];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gx, gw) = conv2d_backward(xv, wv, g, *pad, self.wants(*x), self.wants(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, bias_grad(g));
                    }
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gx, gw) = conv_transpose2_backward(xv, wv, g, self.wants(*x), self.wants(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, bias_grad(g));
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, c_total, h, w) = g.dims4();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).shape()[1];
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(n * pc * h * w);
                        for ni in 0..n {
                            let start = (ni * c_total + offset) * h * w;
                            gp.extend_from_slice(&gd[start..start + pc * h * w]);
                        }
                        let gp = Tensor::new(vec![n, pc, h, w], gp).expect("concat grad");
                        self.accumulate(grads, *p, gp);
                    }
                    offset += pc;
                }
            }
            Op::GaussianValid { x, kernel } => {
                let gx = separable_valid_transpose(g, kernel, self.value(*x).shape());
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn reduced_shape(shape: &[usize], axes: [bool; 4]) -> Vec<usize> {
    assert_eq!(shape.len(), 4, "axis reductions expect NCHW, got {shape:?}");
    shape
        .iter()
        .zip(axes)
        .map(|(&d, r)| if r { 1 } else { d })
        .collect()
}

fn reduced_count(shape: &[usize], axes: [bool; 4]) -> usize {
    shape
        .iter()
        .zip(axes)
        .filter(|(_, r)| *r)
        .map(|(&d, _)| d)
        .product()
}

/// Numpy-style broadcasting of two shapes (ranks right-aligned).
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Self {
        if a == b {
            return Self {
                out_shape: a.to_vec(),
                a_strides: Vec::new(),
                b_strides: Vec::new(),
                same: true,
            };
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let out_shape: Vec<usize> = pa
            .iter()
            .zip(&pb)
            .map(|(&x, &y)| {
                assert!(
                    x == y || x == 1 || y == 1,
                    "shapes {a:?} and {b:?} do not broadcast"
                );
                x.max(y)
            })
            .collect();
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        Self {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out_shape,
            same: false,
        }
    }

    fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.len();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        if n == 0 {
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ai, mut bi) = (0usize, 0usize);
        for o in 0..n {
            f(o, ai, bi);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ai += self.a_strides[d];
                bi += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ai -= self.a_strides[d] * idx[d];
                bi -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Output columns `ox` whose input column `ox + k - pad` is inside `[0, width)`.
fn valid_span(k: usize, pad: usize, width: usize, out_width: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (width + pad).saturating_sub(k).min(out_width);
    (lo, hi.max(lo))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let (oh, ow) = (h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
    let mut out = vec![0.0; n * cout * oh * ow];
    let (xd, wdat) = (x.data(), w.data());
    for ni in 0..n {
        for co in 0..cout {
            let oplane = &mut out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            if let Some(b) = b {
                oplane.fill(b.data()[co]);
            }
            for ci in 0..cin {
                let iplane = &xd[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_span(ky, pad, h, oh);
                    for kx in 0..kw {
                        let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = valid_span(kx, pad, wd, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - pad;
                        let span = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let orow = &mut oplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            let irow = &iplane[iy * wd + ix_lo..iy * wd + ix_lo + span];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).expect("conv shape")
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let (_, _, oh, ow) = g.dims4();
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for ni in 0..n {
        for co in 0..cout {
            let gplane = &gd[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * wd;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_span(ky, pad, h, oh);
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let (ox_lo, ox_hi) = valid_span(kx, pad, wd, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - pad;
                        let span = ox_hi - ox_lo;
                        let wv = wdat[widx];
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            let istart = ibase + iy * wd + ix_lo;
                            if let Some(gx) = gx.as_mut() {
                                for (d, gv) in gx[istart..istart + span].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                            if want_w {
                                let irow = &xd[istart..istart + span];
                                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
        gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("shape")),
    )
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4();
    let mut out = vec![0.0; c];
    for (p, plane) in g.data().chunks(h * w).enumerate() {
        out[p % c] += plane.iter().sum::<f64>();
    }
    debug_assert_eq!(g.len(), n * c * h * w);
    Tensor::new(vec![c], out).expect("bias shape")
}

fn conv_transpose2_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, kh, kw) = w.dims4();
    assert_eq!((wcin, kh, kw), (cin, 2, 2), "conv_transpose2 weight shape");
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; n * cout * oh * ow];
    let (xd, wdat) = (x.data(), w.data());
    for ni in 0..n {
        for co in 0..cout {
            let oplane = &mut out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            if let Some(b) = b {
                oplane.fill(b.data()[co]);
            }
            for ci in 0..cin {
                let iplane = &xd[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                let k = &wdat[(ci * cout + co) * 4..(ci * cout + co) * 4 + 4];
                for y in 0..h {
                    for xx in 0..wd {
                        let v = iplane[y * wd + xx];
                        let o = 2 * y * ow + 2 * xx;
                        oplane[o] += k[0] * v;
                        oplane[o + 1] += k[1] * v;
                        oplane[o + ow] += k[2] * v;
                        oplane[o + ow + 1] += k[3] * v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).expect("deconv shape")
}

fn conv_transpose2_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[1];
    let ow = 2 * wd;
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for ni in 0..n {
        for co in 0..cout {
            let gplane = &gd[(ni * cout + co) * 4 * h * wd..(ni * cout + co + 1) * 4 * h * wd];
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * wd;
                let kbase = (ci * cout + co) * 4;
                let k = &wdat[kbase..kbase + 4];
                let mut acc = [0.0; 4];
                for y in 0..h {
                    for xx in 0..wd {
                        let o = 2 * y * ow + 2 * xx;
                        let gs = [gplane[o], gplane[o + 1], gplane[o + ow], gplane[o + ow + 1]];
                        let i = ibase + y * wd + xx;
                        if let Some(gx) = gx.as_mut() {
                            gx[i] += k[0] * gs[0] + k[1] * gs[1] + k[2] * gs[2] + k[3] * gs[3];
                        }
                        if want_w {
                            let v = xd[i];
                            for (a, gv) in acc.iter_mut().zip(gs) {
                                *a += v * gv;
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for (t, a) in acc.iter().enumerate() {
                        gw[kbase + t] += a;
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
        gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("shape")),
    )
}

fn separable_valid(x: &Tensor, k: &[f64]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let kl = k.len();
    let (oh, ow) = (h + 1 - kl, w + 1 - kl);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for ox in 0..ow {
                let row = &plane[y * w + ox..y * w + ox + kl];
                tmp[y * ow + ox] = row.iter().zip(k).map(|(a, b)| a * b).sum();
            }
        }
        let oplane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
            for (ky, kv) in k.iter().enumerate() {
                let trow = &tmp[(oy + ky) * ow..(oy + ky + 1) * ow];
                for (o, t) in orow.iter_mut().zip(trow) {
                    *o += kv * t;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("filter shape")
}

fn separable_valid_transpose(g: &Tensor, k: &[f64], in_shape: &[usize]) -> Tensor {
    let (_, _, oh, ow) = g.dims4();
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut gx = Tensor::zeros(in_shape);
    let mut tmp = vec![0.0; h * ow];
    for (gplane, xplane) in g
        .data()
        .chunks(oh * ow)
        .zip(gx.data_mut().chunks_mut(h * w))
    {
        tmp.fill(0.0);
        for oy in 0..oh {
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            for (ky, kv) in k.iter().enumerate() {
                let trow = &mut tmp[(oy + ky) * ow..(oy + ky + 1) * ow];
                for (t, gv) in trow.iter_mut().zip(grow) {
                    *t += kv * gv;
                }
            }
        }
        for y in 0..h {
            for ox in 0..ow {
                let t = tmp[y * ow + ox];
                for (kx, kv) in k.iter().enumerate() {
                    xplane[y * w + ox + kx] += kv * t;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(out ⊙ probe))/d(input) for a single-input op.
    fn check_op(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = rand_tensor(shape, seed);
        let scalar = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = build(&mut g, xv);
            let probe = rand_tensor(g.value(out).shape(), seed + 1);
            g.value(out).zip_map(&probe, |a, b| a * b).unwrap().sum()
        };
        let mut g = Graph::new();
        let xv = g.param(x0.clone());
        let out = build(&mut g, xv);
        let probe = g.constant(rand_tensor(g.value(out).shape(), seed + 1));
        let prod = g.mul(out, probe);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let numeric = (scalar(&xp) - scalar(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / scale < 1e-5,
                "element {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn broadcast_mul_grad() {
        let b = rand_tensor(&[2, 3, 1, 1], 9);
        check_op(&[2, 3, 4, 5], 1, move |g, x| {
            let bv = g.constant(b.clone());
            g.mul(x, bv)
        });
        let a = rand_tensor(&[2, 3, 4, 5], 10);
        check_op(&[2, 1, 4, 5], 2, move |g, x| {
            let av = g.constant(a.clone());
            let d = g_shift(g, x);
            g.div(av, d)
        });
    }

    fn g_shift(g: &mut Graph, x: Var) -> Var {
        let s = g.square(x);
        g.add_scalar(s, 1.5)
    }

    #[test]
    fn reduction_grads() {
        check_op(&[2, 3, 4, 5], 3, |g, x| {
            g.mean_axes(x, [false, false, true, true])
        });
        check_op(&[2, 3, 4, 5], 4, |g, x| {
            g.mean_axes(x, [false, true, false, false])
        });
        check_op(&[2, 3, 4, 5], 5, |g, x| {
            g.max_axes(x, [false, true, false, false])
        });
        check_op(&[2, 3, 4, 4], 6, |g, x| g.max_pool2(x));
    }

    #[test]
    fn conv_grads() {
        let w = rand_tensor(&[4, 3, 3, 3], 11);
        let b = rand_tensor(&[4], 12);
        check_op(&[2, 3, 5, 6], 7, move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            g.conv2d(x, wv, Some(bv), 1)
        });
        let x = rand_tensor(&[2, 3, 5, 6], 13);
        check_op(&[4, 3, 3, 3], 8, move |g, w| {
            let xv = g.constant(x.clone());
            g.conv2d(xv, w, None, 1)
        });
        let wt = rand_tensor(&[3, 2, 2, 2], 14);
        check_op(&[2, 3, 3, 4], 15, move |g, x| {
            let wv = g.constant(wt.clone());
            g.conv_transpose2(x, wv, None)
        });
        let xt = rand_tensor(&[2, 3, 3, 4], 16);
        check_op(&[3, 2, 2, 2], 17, move |g, w| {
            let xv = g.constant(xt.clone());
            g.conv_transpose2(xv, w, None)
        });
    }

    #[test]
    fn elementwise_and_filter_grads() {
        check_op(&[1, 2, 3, 3], 20, |g, x| g.sigmoid(x));
        check_op(&[1, 2, 3, 3], 24, |g, x| g.leaky_relu(x, 0.2));
        check_op(&[1, 2, 3, 3], 21, |g, x| {
            let s = g.square(x);
            let s = g.add_scalar(s, 0.1);
            g.sqrt(s)
        });
        check_op(&[1, 2, 9, 8], 22, |g, x| {
            g.gaussian_valid(x, &[0.2, 0.5, 0.3])
        });
        check_op(&[1, 2, 3, 3], 23, |g, x| {
            let y = g.mul_scalar(x, 2.0);
            g.concat_channels(&[x, y])
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor(&[1, 2, 4, 5], 30);
        let w = rand_tensor(&[3, 2, 3, 3], 31);
        let out = conv2d_forward(&x, &w, None, 1);
        for co in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky - 1, ox as isize + kx - 1);
                                if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                    continue;
                                }
                                s += w.at4(co, ci, ky as usize, kx as usize)
                                    * x.at4(0, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    assert!((out.at4(0, co, oy, ox) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2], 1.0));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let d = g.detach(p);
        let m = g.mul(p, c);
        let m2 = g.mul(m, d);
        let l = g.sum_all(m2);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }
}
