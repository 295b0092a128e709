//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and whatever it needs for the backward pass. [`Graph::backward`] walks the
//! tape in reverse and returns the gradient of a scalar node with respect to
//! every node that requires one. Nodes built only from constants never get a
//! gradient buffer, so data inputs cost nothing on the way back.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use crate::exec::{self, Execution};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1;
        let ow = (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1;
        (oh, ow)
    }
}

/// Batch statistics recorded by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAxis(Var, usize),
    SoftmaxLast(Var),
    CrossEntropy { logits: Var, probs: Array2<f64>, labels: Vec<usize>, weights: Vec<f64> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Array2<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    Mmd { x: Var, y: Var, sigmas: Vec<f64> },
    CovPenalty { a: Var, b: Var, a_c: Array2<f64>, b_c: Array2<f64>, cov: Array2<f64>, norm: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    stats: Option<BatchStats>,
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Execution,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), exec: Execution::default() }
    }

    pub fn with_execution(exec: Execution) -> Self {
        Graph { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, stats: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (parameters, or inputs under a gradient check).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a tensor of shape {:?}", t.shape());
        t.iter().copied().next().unwrap_or(0.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        self.nodes[v.0].stats.as_ref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Adds `b` (shape `[C]`) along axis 1 of `x` (shape `[N, C, ...]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.ndim(), 1);
        assert_eq!(xv.shape()[1], bv.len(), "bias length");
        let mut out = xv.clone();
        for (c, &bc) in bv.iter().enumerate() {
            out.index_axis_mut(Axis(1), c).mapv_inplace(|e| e + bc);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `x @ w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Batched matrix product `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let m = bv.shape()[2];
        assert_eq!(bv.shape()[0], bs);
        assert_eq!(bv.shape()[1], k);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, n, m]));
        for i in 0..bs {
            let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi).into_dyn());
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Bmm(a, b), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|e| e.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|e| if e > 0.0 { e } else { slope * e });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), shape.iter().product::<usize>(), "reshape size");
        let v = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(a);
        self.push(v, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        let rg = self.rg(x);
        self.push(v, Op::Slice { x, axis, start }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Mean over one axis; the axis is removed.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).mean_axis(Axis(axis)).expect("non-empty axis");
        let rg = self.rg(a);
        self.push(v, Op::MeanAxis(a, axis), rg)
    }

    /// Mean over all trailing axes after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let rest: usize = shape[2..].iter().product();
        let flat = self.reshape(a, &[n, c, rest]);
        self.mean_axis(flat, 2)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_last(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxLast(a), rg)
    }

    /// Weighted cross-entropy `sum_i w_i * -log softmax(logits_i)[y_i]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Var {
        let lv = as2(self.value(logits)).to_owned();
        assert_eq!(lv.nrows(), labels.len());
        assert_eq!(labels.len(), weights.len());
        let probs = softmax_last(&lv.clone().into_dyn()).into_dimensionality::<Ix2>().unwrap();
        let mut loss = 0.0;
        for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[y]);
        }
        let rg = self.rg(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CrossEntropy { logits, probs, labels: labels.to_vec(), weights: weights.to_vec() },
            rg,
        )
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, kh, kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape()[1], c, "conv input channels");
        assert_eq!((wv.shape()[2], wv.shape()[3]), geom.kernel, "conv kernel");
        let (oh, ow) = geom.output_hw(h, wd);
        let cols = im2col(self.exec, xv, geom, oh, ow);
        let wmat = wv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, c * geom.kernel.0 * geom.kernel.1))
            .unwrap();
        let out_mat = wmat.dot(&cols); // [O, N*P]
        let p = oh * ow;
        let out = out_mat
            .into_shape_with_order((o, n, p))
            .unwrap()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[n, o, oh, ow]))
            .unwrap();
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv2d { x, w, geom, cols }, rg)
    }

    /// 1-D convolution of `x: [N, C, L]` with `w: [O, C, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]]);
        let w4 = self.reshape(w, &[ws[0], ws[1], 1, ws[2]]);
        let geom = ConvGeom { kernel: (1, kernel), stride: (1, stride), pad: (0, pad) };
        let y = self.conv2d(x4, w4, geom);
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// Batch normalisation over all axes except axis 1. In training mode the
    /// batch statistics are used and recorded on the node; otherwise the
    /// supplied running statistics are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (mean, var, train) = match running {
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let lane = xv.index_axis(Axis(1), ch);
                    let m = lane.mean().unwrap_or(0.0);
                    let v = lane.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / lane.len() as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var, true)
            }
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (gv[[ch]], bv[[ch]]);
            xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|e| (e - m) * is);
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|e| (e - m) * is * g + b);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg);
        if train {
            self.nodes[id.0].stats = Some(BatchStats { mean, var });
        }
        id
    }

    /// Biased multi-bandwidth Gaussian-kernel MMD between the rows of `x` and `y`.
    pub fn mmd(&mut self, x: Var, y: Var, sigmas: &[f64]) -> Var {
        let v = mmd_biased(as2(self.value(x)), as2(self.value(y)), sigmas);
        let rg = self.rg(x) || self.rg(y);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), v),
            Op::Mmd { x, y, sigmas: sigmas.to_vec() },
            rg,
        )
    }

    /// Frobenius norm of the cross-covariance between the rows of `a` and `b`.
    pub fn cov_penalty(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.nrows(), bv.nrows(), "paired row counts");
        let a_c = center_columns(av);
        let b_c = center_columns(bv);
        let n = av.nrows() as f64;
        let cov = a_c.t().dot(&b_c) / (n - 1.0);
        let norm = cov.iter().map(|e| e * e).sum::<f64>().sqrt();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), norm),
            Op::CovPenalty { a, b, a_c, b_c, cov, norm },
            rg,
        )
    }

    /// Gradient of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if self.rg(to) {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.send(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g * *c),
            Op::AddBias(x, b) => {
                self.send(grads, *x, g.clone());
                if self.rg(*b) {
                    let c = g.shape()[1];
                    let gb: Array1<f64> =
                        (0..c).map(|ch| g.index_axis(Axis(1), ch).sum()).collect();
                    self.send(grads, *b, gb.into_dyn());
                }
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                if self.rg(*a) {
                    let ga = g2.dot(&as2(self.value(*b)).t());
                    self.send(grads, *a, ga.into_dyn());
                }
                if self.rg(*b) {
                    let gb = as2(self.value(*a)).t().dot(&g2);
                    self.send(grads, *b, gb.into_dyn());
                }
            }
            Op::Bmm(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let bs = av.shape()[0];
                let mut ga = ArrayD::<f64>::zeros(av.raw_dim());
                let mut gb = ArrayD::<f64>::zeros(bv.raw_dim());
                for i in 0..bs {
                    let gi = g.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()).into_dyn());
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi).into_dyn());
                }
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0
                    }
                });
                self.send(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gi, &x| {
                    if x <= 0.0 {
                        *gi *= slope
                    }
                });
                self.send(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                let ga = g.as_standard_layout().into_owned().into_shape_with_order(shape).unwrap();
                self.send(grads, *a, ga);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let ga = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
                self.send(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    if self.rg(*p) {
                        let gp = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        self.send(grads, *p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let mut gx = ArrayD::<f64>::zeros(self.value(*x).raw_dim());
                let len = g.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                    .assign(g);
                self.send(grads, *x, gx);
            }
            Op::SumAll(a) => {
                let s = g.iter().copied().next().unwrap_or(0.0);
                self.send(grads, *a, ArrayD::from_elem(self.value(*a).raw_dim(), s));
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.value(*a).raw_dim();
                let n = shape[*axis] as f64;
                let ga = (g / n).insert_axis(Axis(*axis)).broadcast(shape).unwrap().to_owned();
                self.send(grads, *a, ga);
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let last = Axis(y.ndim() - 1);
                let gy = g * y;
                let dot = gy.sum_axis(last).insert_axis(last);
                let ga = &gy - &(y * &dot);
                self.send(grads, *a, ga);
            }
            Op::CrossEntropy { logits, probs, labels, weights } => {
                let s = g.iter().copied().next().unwrap_or(0.0);
                let mut gl = probs.clone();
                for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    gl[[i, y]] -= 1.0;
                    gl.row_mut(i).mapv_inplace(|e| e * w * s);
                }
                self.send(grads, *logits, gl.into_dyn());
            }
            Op::Conv2d { x, w, geom, cols } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, o) = (g.shape()[0], g.shape()[1]);
                let p = g.shape()[2] * g.shape()[3];
                let gmat = g
                    .view()
                    .into_shape_with_order((n, o, p))
                    .unwrap()
                    .permuted_axes([1, 0, 2])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((o, n * p))
                    .unwrap();
                if self.rg(*w) {
                    let gw = gmat.dot(&cols.t());
                    let gw = gw.into_shape_with_order(wv.raw_dim()).unwrap();
                    self.send(grads, *w, gw);
                }
                if self.rg(*x) {
                    let k = wv.shape()[1] * wv.shape()[2] * wv.shape()[3];
                    let wmat = wv.as_standard_layout().into_owned().into_shape_with_order((o, k)).unwrap();
                    let gcols = wmat.t().dot(&gmat);
                    let gx = col2im(self.exec, &gcols, xv.shape(), *geom, g.shape()[2], g.shape()[3]);
                    self.send(grads, *x, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = g.shape()[1];
                let gv = self.value(*gamma);
                if self.rg(*gamma) {
                    let gg: Array1<f64> = (0..c)
                        .map(|ch| {
                            (&g.index_axis(Axis(1), ch) * &xhat.index_axis(Axis(1), ch)).sum()
                        })
                        .collect();
                    self.send(grads, *gamma, gg.into_dyn());
                }
                if self.rg(*beta) {
                    let gb: Array1<f64> = (0..c).map(|ch| g.index_axis(Axis(1), ch).sum()).collect();
                    self.send(grads, *beta, gb.into_dyn());
                }
                if self.rg(*x) {
                    let mut gx = ArrayD::<f64>::zeros(g.raw_dim());
                    for ch in 0..c {
                        let gch = g.index_axis(Axis(1), ch);
                        let xh = xhat.index_axis(Axis(1), ch);
                        let scale = gv[[ch]] * inv_std[ch];
                        let mut out = gx.index_axis_mut(Axis(1), ch);
                        if *train {
                            let m = gch.len() as f64;
                            let sum_g = gch.sum();
                            let sum_gx = (&gch * &xh).sum();
                            ndarray::Zip::from(&mut out).and(&gch).and(&xh).for_each(|o, &gi, &xi| {
                                *o = scale * (gi - sum_g / m - xi * sum_gx / m);
                            });
                        } else {
                            ndarray::Zip::from(&mut out).and(&gch).for_each(|o, &gi| *o = scale * gi);
                        }
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::Mmd { x, y, sigmas } => {
                let s = g.iter().copied().next().unwrap_or(0.0);
                let (gx, gy) = mmd_biased_grad(as2(self.value(*x)), as2(self.value(*y)), sigmas);
                if self.rg(*x) {
                    self.send(grads, *x, (gx * s).into_dyn());
                }
                if self.rg(*y) {
                    self.send(grads, *y, (gy * s).into_dyn());
                }
            }
            Op::CovPenalty { a, b, a_c, b_c, cov, norm } => {
                if *norm == 0.0 {
                    return;
                }
                let s = g.iter().copied().next().unwrap_or(0.0);
                let n = a_c.nrows() as f64;
                // d||C||/dC = C/||C||; C = Ac^T Bc / (n-1). Centering is absorbed
                // because the partner factor already has zero column means.
                let gc = cov * (s / (*norm * (n - 1.0)));
                if self.rg(*a) {
                    self.send(grads, *a, b_c.dot(&gc.t()).into_dyn());
                }
                if self.rg(*b) {
                    self.send(grads, *b, a_c.dot(&gc).into_dyn());
                }
            }
        }
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let last = Axis(x.ndim() - 1);
    for mut lane in out.lanes_mut(last) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|e| (e - max).exp());
        let z = lane.sum();
        lane.mapv_inplace(|e| e / z);
    }
    out
}

/// Column-wise mean removal. The mean is accumulated relative to the first
/// row so that a constant column centres to exact zeros.
pub fn center_columns(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut out = x.to_owned();
    if n == 0 {
        return out;
    }
    for mut col in out.columns_mut() {
        let x0 = col[0];
        let shift = col.iter().map(|e| e - x0).sum::<f64>() / n as f64;
        col.mapv_inplace(|e| (e - x0) - shift);
    }
    out
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn kernel_mean(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigmas: &[f64]) -> f64 {
    let mut total = 0.0;
    for xi in x.rows() {
        for yj in y.rows() {
            let d2 = sq_dist(xi, yj);
            total += sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>();
        }
    }
    total / (x.nrows() * y.nrows()) as f64
}

/// Biased V-statistic MMD with a sum of Gaussian kernels `exp(-|a-b|^2 / (2 s^2))`.
pub fn mmd_biased(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigmas: &[f64]) -> f64 {
    kernel_mean(x, x, sigmas) + kernel_mean(y, y, sigmas) - 2.0 * kernel_mean(x, y, sigmas)
}

fn mmd_biased_grad(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    sigmas: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    let (n, m) = (x.nrows() as f64, y.nrows() as f64);
    // dk(a,b)/da = -sum_s k_s(a,b) (a-b) / s^2
    let kprime = |a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>| -> f64 {
        let d2 = sq_dist(a, b);
        sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s)).sum::<f64>()
    };
    let mut gx = Array2::<f64>::zeros(x.raw_dim());
    let mut gy = Array2::<f64>::zeros(y.raw_dim());
    for i in 0..x.nrows() {
        let xi = x.row(i);
        let mut acc = ndarray::Array1::<f64>::zeros(x.ncols());
        for j in 0..x.nrows() {
            let w = kprime(xi, x.row(j)) * 2.0 / (n * n);
            acc.scaled_add(-w, &(&xi - &x.row(j)));
        }
        for j in 0..y.nrows() {
            let w = kprime(xi, y.row(j)) * 2.0 / (n * m);
            acc.scaled_add(w, &(&xi - &y.row(j)));
        }
        gx.row_mut(i).assign(&acc);
    }
    for i in 0..y.nrows() {
        let yi = y.row(i);
        let mut acc = ndarray::Array1::<f64>::zeros(y.ncols());
        for j in 0..y.nrows() {
            let w = kprime(yi, y.row(j)) * 2.0 / (m * m);
            acc.scaled_add(-w, &(&yi - &y.row(j)));
        }
        for j in 0..x.nrows() {
            let w = kprime(yi, x.row(j)) * 2.0 / (n * m);
            acc.scaled_add(w, &(&yi - &x.row(j)));
        }
        gy.row_mut(i).assign(&acc);
    }
    (gx, gy)
}

fn im2col(exec: Execution, x: &Tensor, geom: ConvGeom, oh: usize, ow: usize) -> Array2<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let p = oh * ow;
    let row_len = n * p;
    let rows = c * kh * kw;
    let xs = x.as_standard_layout();
    let xd = xs.as_slice().expect("contiguous");
    let mut buf = vec![0.0f64; rows * row_len];
    exec::for_each_chunk_mut(exec, &mut buf, row_len, |r, row| {
        let ch = r / (kh * kw);
        let ki = (r / kw) % kh;
        let kj = r % kw;
        for s in 0..n {
            let base = (s * c + ch) * h * w;
            let dst = &mut row[s * p..(s + 1) * p];
            for oi in 0..oh {
                let ii = (oi * sh + ki) as isize - ph as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let src_row = base + ii as usize * w;
                for oj in 0..ow {
                    let jj = (oj * sw + kj) as isize - pw as isize;
                    if jj >= 0 && jj < w as isize {
                        dst[oi * ow + oj] = xd[src_row + jj as usize];
                    }
                }
            }
        }
    });
    Array2::from_shape_vec((rows, row_len), buf).unwrap()
}

fn col2im(
    exec: Execution,
    cols: &Array2<f64>,
    xshape: &[usize],
    geom: ConvGeom,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let p = oh * ow;
    let cs = cols.as_standard_layout();
    let cd = cs.as_slice().expect("contiguous");
    let row_len = n * p;
    let mut out = vec![0.0f64; n * c * h * w];
    exec::for_each_chunk_mut(exec, &mut out, c * h * w, |s, dst| {
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (ch * kh + ki) * kw + kj;
                    let src = &cd[r * row_len + s * p..r * row_len + (s + 1) * p];
                    for oi in 0..oh {
                        let ii = (oi * sh + ki) as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let drow = ch * h * w + ii as usize * w;
                        for oj in 0..ow {
                            let jj = (oj * sw + kj) as isize - pw as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[drow + jj as usize] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    });
    ArrayD::from_shape_vec(IxDyn(xshape), out).unwrap()
}
