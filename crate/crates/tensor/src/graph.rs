//! Append-only computation graph. Every forward op pushes one node whose
//! inputs are earlier nodes, so insertion order is a topological order and
//! `backward` is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Layer kinds dispatched by [`Graph::eval_layer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    MaxPool2,
    Upsample2Nearest,
    ConcatChannels,
    /// Inputs `[x: [B,in], weight: [out,in], bias: [out]]`.
    Dense,
    GlobalAvgPool,
    Relu,
    Sigmoid,
    /// Normalizes over the last axis.
    Softmax,
    Tanh,
    /// Inverted dropout; identity when `train` is false.
    Dropout { rate: f64, train: bool },
    ResidualAdd,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d(ConvGeom),
    Depthwise(ConvGeom),
    MaxPool2 { argmax: Vec<usize> },
    Upsample2 { bc: usize, h: usize, w: usize },
    Concat { channels: Vec<usize>, batch: usize, hw: usize },
    Dense { batch: usize, fan_in: usize, fan_out: usize },
    GlobalAvgPool { hw: usize },
    Relu,
    Sigmoid,
    Tanh,
    Softmax { cols: usize },
    Dropout { mask: Vec<f64> },
    Add,
    Sub,
    Mul,
    Affine { scale: f64 },
    Square,
    LnClamped { lo: f64, hi: f64 },
    LogSigmoid { eps: f64 },
    MulConst(Vec<f64>),
    Dot(Vec<f64>),
    Sum,
    Reshape,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Reverse-mode tape.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    tracking: bool,
    nodes: Vec<Node>,
    /// Accumulated gradients of leaf and parameter nodes.
    leaf_grads: Vec<Option<Vec<f64>>>,
    rng: ChaCha8Rng,
    macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph with gradient tracking on and dropout seed 0.
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            tracking: true,
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            macs: 0,
        }
    }

    /// Forward-only graph: values are computed with the same kernels but no
    /// backward information is kept.
    pub fn no_grad(seed: u64) -> Self {
        Self {
            tracking: false,
            ..Self::with_seed(seed)
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by conv and dense ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf or parameter node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        self.leaf_grads.get(v.index).and_then(|g| g.as_deref())
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, vec![], t)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let mut t = params.get(id).clone();
        t.clear_grad();
        self.push_raw(Op::Param(id), vec![], t)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let op = match op {
            Op::Param(_) | Op::Leaf => op,
            _ if !self.tracking => Op::Leaf,
            other => other,
        };
        self.nodes.push(Node { op, inputs, value });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, op: Op, inputs: &[usize], shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_raw(op, inputs.to_vec(), t))
    }

    // ---- convolutions -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, ki, bi) = (self.check(x)?, self.check(kernel)?, self.check(bias)?);
        let xs = self.nodes[xi].value.shape();
        let ks = self.nodes[ki].value.shape();
        let bs = self.nodes[bi].value.shape();
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err("conv2d", format!("expected rank-4 input and kernel, got {xs:?} and {ks:?}"));
        }
        if xs[1] != ks[1] {
            return shape_err(
                "conv2d",
                format!("input has {} channels but kernel {ks:?} expects {}", xs[1], ks[1]),
            );
        }
        if bs != [ks[0]] {
            return shape_err("conv2d", format!("bias {bs:?} does not match {} output channels", ks[0]));
        }
        if stride == 0 {
            return arg_err("conv2d", "stride must be >= 1");
        }
        if ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding {
            return shape_err("conv2d", format!("kernel {ks:?} larger than padded input {xs:?}"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[bi].value.data(),
        );
        let (oh, ow) = (geom.out_h(), geom.out_w());
        self.macs += (geom.batch * geom.cout * oh * ow * geom.cin * geom.kh * geom.kw) as u64;
        self.push(Op::Conv2d(geom), &[xi, ki, bi], &[geom.batch, geom.cout, oh, ow], out)
    }

    /// Per-channel spatial convolution with kernel `[C,1,Kh,Kw]`, no bias.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, ki) = (self.check(x)?, self.check(kernel)?);
        let xs = self.nodes[xi].value.shape();
        let ks = self.nodes[ki].value.shape();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != 1 || ks[0] != xs[1] {
            return shape_err(
                "depthwise_conv2d",
                format!("kernel {ks:?} must be [C,1,Kh,Kw] with C = input channels of {xs:?}"),
            );
        }
        if stride == 0 {
            return arg_err("depthwise_conv2d", "stride must be >= 1");
        }
        if ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding {
            return shape_err("depthwise_conv2d", format!("kernel {ks:?} larger than padded input {xs:?}"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: xs[1],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
        };
        let out = kernels::depthwise_forward(&geom, self.nodes[xi].value.data(), self.nodes[ki].value.data());
        let (oh, ow) = (geom.out_h(), geom.out_w());
        self.macs += (geom.batch * geom.cin * oh * ow * geom.kh * geom.kw) as u64;
        self.push(Op::Depthwise(geom), &[xi, ki], &[geom.batch, geom.cin, oh, ow], out)
    }

    /// Depthwise `[Cin,1,K,K]` spatial filter ("same" padding, stride 1)
    /// followed by a pointwise `[Cout,Cin,1,1]` convolution with bias.
    pub fn depthwise_separable_conv2d(
        &mut self,
        x: Var,
        depthwise_kernel: Var,
        pointwise_kernel: Var,
        bias: Var,
    ) -> Result<Var> {
        let ds = self.value(depthwise_kernel).shape().to_vec();
        let ps = self.value(pointwise_kernel).shape().to_vec();
        let cin = self.value(x).shape().get(1).copied().unwrap_or(0);
        if ds.len() != 4 || ds[0] != cin || ds[1] != 1 {
            return shape_err(
                "depthwise_separable_conv2d",
                format!("depthwise kernel {ds:?} needs one filter per input channel ({cin})"),
            );
        }
        if ps.len() != 4 || ps[1] != cin || ps[2] != 1 || ps[3] != 1 {
            return shape_err(
                "depthwise_separable_conv2d",
                format!("pointwise kernel {ps:?} must be [Cout,{cin},1,1]"),
            );
        }
        if ds[2] % 2 == 0 || ds[3] % 2 == 0 {
            return arg_err("depthwise_separable_conv2d", "same padding needs odd kernel sizes");
        }
        if ds[2] != ds[3] {
            return arg_err("depthwise_separable_conv2d", "kernel must be square");
        }
        let spatial = self.depthwise_conv2d(x, depthwise_kernel, 1, ds[2] / 2)?;
        self.conv2d(spatial, pointwise_kernel, bias, 1, 0)
    }

    // ---- layers ---------------------------------------------------------------

    pub fn eval_layer(&mut self, kind: LayerKind, inputs: &[Var]) -> Result<Var> {
        let unary = |name: &'static str| -> Result<Var> {
            match inputs {
                [x] => Ok(*x),
                _ => arg_err(name, format!("expects one input, got {}", inputs.len())),
            }
        };
        match kind {
            LayerKind::MaxPool2 => self.maxpool2(unary("maxpool2")?),
            LayerKind::Upsample2Nearest => self.upsample2(unary("upsample2_nearest")?),
            LayerKind::ConcatChannels => self.concat_channels(inputs),
            LayerKind::Dense => match inputs {
                [x, w, b] => self.dense(*x, *w, *b),
                _ => arg_err("dense", "expects [x, weight, bias]"),
            },
            LayerKind::GlobalAvgPool => self.global_avg_pool(unary("global_avg_pool")?),
            LayerKind::Relu => self.relu(unary("relu")?),
            LayerKind::Sigmoid => self.sigmoid(unary("sigmoid")?),
            LayerKind::Softmax => self.softmax(unary("softmax")?),
            LayerKind::Tanh => self.tanh(unary("tanh")?),
            LayerKind::Dropout { rate, train } => self.dropout(unary("dropout")?, rate, train),
            LayerKind::ResidualAdd => match inputs {
                [a, b] => self.add(*a, *b),
                _ => arg_err("residual_add", "expects two inputs"),
            },
        }
    }

    fn rank4(&self, op: &'static str, x: usize) -> Result<[usize; 4]> {
        match self.nodes[x].value.shape() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => shape_err(op, format!("expected [B,C,H,W], got {s:?}")),
        }
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let [b, c, h, w] = self.rank4("maxpool2", xi)?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("maxpool2", format!("spatial dims {h}x{w} must be even"));
        }
        let (out, argmax) = kernels::maxpool2_forward(b * c, h, w, self.nodes[xi].value.data());
        self.push(Op::MaxPool2 { argmax }, &[xi], &[b, c, h / 2, w / 2], out)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let [b, c, h, w] = self.rank4("upsample2_nearest", xi)?;
        let out = kernels::upsample2_forward(b * c, h, w, self.nodes[xi].value.data());
        self.push(Op::Upsample2 { bc: b * c, h, w }, &[xi], &[b, c, 2 * h, 2 * w], out)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return arg_err("concat_channels", "no inputs");
        }
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let [b, _, h, w] = self.rank4("concat_channels", idx[0])?;
        let mut channels = Vec::with_capacity(idx.len());
        for &i in &idx {
            let [bi, ci, hi, wi] = self.rank4("concat_channels", i)?;
            if (bi, hi, wi) != (b, h, w) {
                return shape_err(
                    "concat_channels",
                    format!("B,H,W must agree: {:?} vs {:?}", [bi, hi, wi], [b, h, w]),
                );
            }
            channels.push(ci);
        }
        let hw = h * w;
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(b * total * hw);
        for bb in 0..b {
            for (&i, &c) in idx.iter().zip(&channels) {
                out.extend_from_slice(&self.nodes[i].value.data()[bb * c * hw..][..c * hw]);
            }
        }
        self.push(Op::Concat { channels, batch: b, hw }, &idx, &[b, total, h, w], out)
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(weight)?, self.check(bias)?);
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        let bs = self.nodes[bi].value.shape();
        let (batch, fan_in, fan_out) = match (xs, ws) {
            (&[b, i], &[o, i2]) if i == i2 && bs == [o] => (b, i, o),
            _ => {
                return shape_err(
                    "dense",
                    format!("x {xs:?}, weight {ws:?}, bias {bs:?} (want [B,in], [out,in], [out])"),
                )
            }
        };
        let (xv, wv, bv) = (
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
        );
        let mut out = Vec::with_capacity(batch * fan_out);
        for b in 0..batch {
            let row = &xv[b * fan_in..][..fan_in];
            for o in 0..fan_out {
                let wrow = &wv[o * fan_in..][..fan_in];
                out.push(bv[o] + row.iter().zip(wrow).map(|(a, c)| a * c).sum::<f64>());
            }
        }
        self.macs += (batch * fan_in * fan_out) as u64;
        self.push(Op::Dense { batch, fan_in, fan_out }, &[xi, wi, bi], &[batch, fan_out], out)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let [b, c, h, w] = self.rank4("global_avg_pool", xi)?;
        let hw = h * w;
        let out = self.nodes[xi]
            .value
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Op::GlobalAvgPool { hw }, &[xi], &[b, c], out)
    }

    fn unary_map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.map(f);
        Ok(self.push_raw(op, vec![xi], t))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Relu, |v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Tanh, f64::tanh)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        let cols = *shape.last().expect("rank >= 1");
        let mut out = Vec::with_capacity(self.nodes[xi].value.len());
        for row in self.nodes[xi].value.data().chunks_exact(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        self.push(Op::Softmax { cols }, &[xi], &shape, out)
    }

    pub fn dropout(&mut self, x: Var, rate: f64, train: bool) -> Result<Var> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return arg_err("dropout", format!("rate {rate} outside [0,1)"));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[xi].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let shape = self.nodes[xi].value.shape().to_vec();
        let out = self.nodes[xi].value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(Op::Dropout { mask }, &[xi], &shape, out)
    }

    // ---- elementwise arithmetic ---------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let shape = av.shape().to_vec();
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, &[ai, bi], &shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary_map(x, Op::Affine { scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Square, |v| v * v)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo > 0.0 && lo <= hi) {
            return arg_err("ln_clamped", format!("need 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        self.unary_map(x, Op::LnClamped { lo, hi }, |v| v.clamp(lo, hi).ln())
    }

    /// ln(clamp(sigmoid(x), eps, 1 - eps)), evaluated as -softplus(-x) so
    /// saturated inputs keep full precision. ln(1 - sigmoid(x)) is
    /// `log_sigmoid` of the negated input.
    pub fn log_sigmoid(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0 && eps < 0.5) {
            return arg_err("log_sigmoid", format!("need 0 < eps < 0.5, got {eps}"));
        }
        let (lo, hi) = (eps.ln(), (-eps).ln_1p());
        self.unary_map(x, Op::LogSigmoid { eps }, |v| log_sigmoid(v).clamp(lo, hi))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape() != c.shape() {
            return shape_err("mul_const", format!("{:?} vs {:?}", xv.shape(), c.shape()));
        }
        let shape = xv.shape().to_vec();
        let out = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        self.push(Op::MulConst(c.data().to_vec()), &[xi], &shape, out)
    }

    /// Scalar `sum_i c_i * x_i` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape() != c.shape() {
            return shape_err("dot_const", format!("{:?} vs {:?}", xv.shape(), c.shape()));
        }
        let s = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        self.push(Op::Dot(c.data().to_vec()), &[xi], &[1], vec![s])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.nodes[xi].value.data().iter().sum();
        self.push(Op::Sum, &[xi], &[1], vec![s])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.reshape(shape)?;
        Ok(self.push_raw(Op::Reshape, vec![xi], t))
    }

    // ---- backward -------------------------------------------------------------

    /// Propagate d(loss)/d(node) to every leaf and parameter node reachable
    /// from `loss`. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if !self.tracking {
            return Err(TensorError::TrackingDisabled);
        }
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let inp = &node.inputs;
            let val = |k: usize| self.nodes[inp[k]].value.data();
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    accumulate(&mut self.leaf_grads, i, g);
                }
                Op::Conv2d(geom) => {
                    let (gx, gk, gb) = kernels::conv2d_backward(geom, val(0), val(1), &g);
                    accumulate(&mut grads, inp[0], gx);
                    accumulate(&mut grads, inp[1], gk);
                    accumulate(&mut grads, inp[2], gb);
                }
                Op::Depthwise(geom) => {
                    let (gx, gk) = kernels::depthwise_backward(geom, val(0), val(1), &g);
                    accumulate(&mut grads, inp[0], gx);
                    accumulate(&mut grads, inp[1], gk);
                }
                Op::MaxPool2 { argmax } => {
                    let mut gx = vec![0.0; self.nodes[inp[0]].value.len()];
                    for (gi, &a) in g.iter().zip(argmax) {
                        gx[a] += gi;
                    }
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Upsample2 { bc, h, w } => {
                    let gx = kernels::upsample2_backward(*bc, *h, *w, &g);
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Concat { channels, batch, hw } => {
                    let total: usize = channels.iter().sum();
                    let mut offset = 0;
                    for (k, &c) in channels.iter().enumerate() {
                        let mut gx = Vec::with_capacity(batch * c * hw);
                        for b in 0..*batch {
                            gx.extend_from_slice(&g[(b * total + offset) * hw..][..c * hw]);
                        }
                        offset += c;
                        accumulate(&mut grads, inp[k], gx);
                    }
                }
                Op::Dense { batch, fan_in, fan_out } => {
                    let (x, w) = (val(0), val(1));
                    let (b_n, i_n, o_n) = (*batch, *fan_in, *fan_out);
                    let mut gx = vec![0.0; b_n * i_n];
                    let mut gw = vec![0.0; o_n * i_n];
                    let mut gb = vec![0.0; o_n];
                    for b in 0..b_n {
                        for o in 0..o_n {
                            let go = g[b * o_n + o];
                            gb[o] += go;
                            for k in 0..i_n {
                                gx[b * i_n + k] += go * w[o * i_n + k];
                                gw[o * i_n + k] += go * x[b * i_n + k];
                            }
                        }
                    }
                    accumulate(&mut grads, inp[0], gx);
                    accumulate(&mut grads, inp[1], gw);
                    accumulate(&mut grads, inp[2], gb);
                }
                Op::GlobalAvgPool { hw } => {
                    let hw = *hw;
                    let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Relu => {
                    let gx = g.iter().zip(val(0)).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Sigmoid => {
                    let y = node.value.data();
                    let gx = g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Tanh => {
                    let y = node.value.data();
                    let gx = g.iter().zip(y).map(|(gi, t)| gi * (1.0 - t * t)).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Softmax { cols } => {
                    let y = node.value.data();
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(a, b)| a * (b - dot)));
                    }
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Dropout { mask } => {
                    let gx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Add => {
                    accumulate(&mut grads, inp[1], g.clone());
                    accumulate(&mut grads, inp[0], g);
                }
                Op::Sub => {
                    accumulate(&mut grads, inp[1], g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, inp[0], g);
                }
                Op::Mul => {
                    let (a, b) = (val(0), val(1));
                    let ga = g.iter().zip(b).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(a).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, inp[0], ga);
                    accumulate(&mut grads, inp[1], gb);
                }
                Op::Affine { scale } => {
                    let gx = g.iter().map(|v| v * scale).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Square => {
                    let gx = g.iter().zip(val(0)).map(|(gi, x)| 2.0 * x * gi).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::LnClamped { lo, hi } => {
                    let gx = g
                        .iter()
                        .zip(val(0))
                        .map(|(gi, &x)| if x >= *lo && x <= *hi { gi / x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::LogSigmoid { eps } => {
                    let (lo, hi) = (eps.ln(), (-eps).ln_1p());
                    let gx = g
                        .iter()
                        .zip(val(0))
                        .map(|(gi, &x)| {
                            let y = log_sigmoid(x);
                            if y >= lo && y <= hi {
                                gi * sigmoid(-x)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::MulConst(c) => {
                    let gx = g.iter().zip(c).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Dot(c) => {
                    let gx = c.iter().map(|v| v * g[0]).collect();
                    accumulate(&mut grads, inp[0], gx);
                }
                Op::Sum => {
                    let n = self.nodes[inp[0]].value.len();
                    accumulate(&mut grads, inp[0], vec![g[0]; n]);
                }
                Op::Reshape => {
                    accumulate(&mut grads, inp[0], g);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients of parameter nodes, keyed by parameter id. The same parameter
    /// may appear more than once if it was inserted into the graph repeatedly.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => self
                .leaf_grads
                .get(i)
                .and_then(|g| g.as_deref())
                .map(|g| (id, g)),
            _ => None,
        })
    }

    /// Add parameter-node gradients into the owning tensors' grad buffers.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for (id, g) in self.param_grads() {
            let buf = params.get_mut(id).grad_mut();
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// ln(sigmoid(v)) without cancellation for large |v|.
pub fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
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
