//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in insertion order, which is also
//! a valid topological order. [`Graph::backward`] walks the records once
//! in reverse and accumulates gradients into each node that requires one.

mod kernels;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics measured by a batch-normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
    },
    WeightNorm {
        v: Var,
        s: Var,
        norms: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    RowSum {
        x: Var,
    },
    AppendColumn {
        x: Var,
        col: Var,
    },
    Log {
        x: Var,
        floor: f64,
    },
    XLogX {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        c: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation kinds exposed by the graph, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    LeakyRelu,
    MaxPool2x2,
    Dropout,
    GlobalAvgPool,
    Dense,
    Softmax,
    WeightNorm,
    Add,
    Mul,
    Scale,
    AddScalar,
    MulConst,
    Clamp,
    RowSum,
    AppendColumn,
    Log,
    XLogX,
    Sum,
    Dot,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Deterministic dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`, when `v`
    /// is on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2x2,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::WeightNorm { .. } => OpKind::WeightNorm,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::RowSum { .. } => OpKind::RowSum,
            Op::AppendColumn { .. } => OpKind::AppendColumn,
            Op::Log { .. } => OpKind::Log,
            Op::XLogX { .. } => OpKind::XLogX,
            Op::Sum { .. } => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
        }
    }

    /// 2-D convolution, stride 1. `x: [N, C, H, W]`, `w: [O, C, k, k]`,
    /// `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ws[0],
            kernel: ws[2],
            padding,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![xs[0], ws[0], geom.out_height(), geom.out_width()];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
        let n = shape[0];
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        (n, c, inner)
    }

    /// Batch normalization over axis 1 of `[N, C]` or `[N, C, H, W]`.
    ///
    /// With `running = None` the minibatch statistics are used and
    /// returned; otherwise the supplied (mean, std) are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&ChannelStats>,
        eps: f64,
    ) -> Result<(Var, ChannelStats)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let (n, c, inner) = Self::channel_layout(&xs);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let count = (n * inner) as f64;
        let (mean, std) = match running {
            Some(stats) => {
                if stats.mean.len() != c || stats.std.len() != c {
                    return Err(shape_err("batch_norm", &xs, &[stats.mean.len()]));
                }
                (stats.mean.clone(), stats.std.clone())
            }
            None => {
                let mut mean = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        mean[ch] += xv[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        var[ch] += xv[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                let std = var.iter().map(|v| (v / count + eps).sqrt()).collect();
                (mean, std)
            }
        };
        let inv_std: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for k in base..base + inner {
                    xhat[k] = (xv[k] - mean[ch]) * inv_std[ch];
                    out[k] = g[ch] * xhat[k] + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            rg,
        );
        Ok((v, ChannelStats { mean, std }))
    }

    /// Leaky ReLU; the derivative at exactly zero is the negative slope.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(shape_err("max_pool2x2", &xs, &[2, 2]));
        }
        let (out, argmax) = kernels::max_pool2x2(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3]);
        let shape = vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2];
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Inverted dropout with a mask drawn from `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("rate", format!("dropout rate {rate} not in [0, 1)")));
        }
        let mask = dropout_mask(self.value(x).len(), rate, seed);
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", &xs, &[0, 0, 0, 0]));
        }
        let inner = xs[2] * xs[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], out)?, Op::GlobalAvgPool { x }, rg))
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` gives `[N, O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("dense", &ws, self.shape(b)));
            }
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o_dim];
        for s in 0..n {
            let xr = &xv[s * i_dim..(s + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &wv[o * i_dim..(o + 1) * i_dim];
                out[s * o_dim + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for o in 0..o_dim {
                    out[s * o_dim + o] += bv[o];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, o_dim], out)?, Op::Dense { x, w, b }, rg))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().unwrap_or(&1);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax { x }, rg))
    }

    /// Weight normalization `w = s * v / ||v||` per output filter (axis 0).
    pub fn weight_norm(&mut self, v: Var, s: Var) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        if self.shape(s) != [vs[0]] {
            return Err(shape_err("weight_norm", &vs, self.shape(s)));
        }
        let rows = vs[0];
        let vv = self.value(v).data();
        let sv = self.value(s).data();
        let step = vv.len() / rows;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vv.len());
        for (o, r) in vv.chunks(step).enumerate() {
            let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            norms.push(n);
            out.extend(r.iter().map(|a| sv[o] * a / n));
        }
        let rg = self.rg(v) || self.rg(s);
        Ok(self.push(Tensor::new(vs, out)?, Op::WeightNorm { v, s, norms }, rg))
    }

    fn binary_same(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar { x }, rg)
    }

    /// Element-wise product with a constant array of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("mul_const", self.shape(x), &[c.len()]));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst { x, c }, rg))
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// `[N, K] -> [N]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("row_sum", &xs, &[0, 0]));
        }
        let out: Vec<f64> = self.value(x).rows().map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0]], out)?, Op::RowSum { x }, rg))
    }

    /// `[N, K]` and `[N]` give `[N, K + 1]`.
    pub fn append_column(&mut self, x: Var, col: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(col).to_vec();
        if xs.len() != 2 || cs != [xs[0]] {
            return Err(shape_err("append_column", &xs, &cs));
        }
        let k = xs[1];
        let mut out = Vec::with_capacity(xs[0] * (k + 1));
        let cv = self.value(col).data();
        for (i, r) in self.value(x).rows().enumerate() {
            out.extend_from_slice(r);
            out.push(cv[i]);
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(Tensor::new(vec![xs[0], k + 1], out)?, Op::AppendColumn { x, col }, rg))
    }

    /// Natural log of `max(x, floor)`.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(out, Op::Log { x, floor }, rg)
    }

    /// `x ln x` with `0 ln 0 := 0` (and 0 for negative round-off).
    pub fn xlogx(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v * v.ln() } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::XLogX { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Scalar `sum_i x_i c_i` against constant coefficients.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("dot_const", self.shape(x), &[c.len()]));
        }
        let s = self.value(x).data().iter().zip(&c).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, c }, rg))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = match terms.first() {
            Some(&t) => t,
            None => return Ok(self.constant(Tensor::scalar(0.0))),
        };
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Hash of every branch decision taken by piecewise operations
    /// (leaky-ReLU signs, pooling winners, clamp and log-floor activity).
    /// Finite differences are only meaningful between two evaluations with
    /// the same signature.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::Clamp { x, lo, hi } => {
                    for v in self.value(*x).data() {
                        (*v < *lo, *v > *hi).hash(&mut h);
                    }
                }
                Op::Log { x, floor } => {
                    for v in self.value(*x).data() {
                        (*v > *floor).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `root`. Gradients of earlier sweeps are
    /// discarded. Nodes feeding several consumers accumulate the sum.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root).to_vec();
        if rs != [1] {
            return Err(Error::NonScalarRoot(rs));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &gy, &mut grads);
            let shape = self.nodes[id].value.shape().to_vec();
            self.nodes[id].grad = Some(Tensor::new(shape, gy)?);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    geom,
                    self.rg(*x),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, cg.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, cg.db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = Self::channel_layout(node.value.shape());
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += gy[k] * xhat[k];
                            dbeta[ch] += gy[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    let m = (n * inner) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            for k in base..base + inner {
                                dx[k] = if *batch_stats {
                                    g[ch] * inv_std[ch] / m
                                        * (m * gy[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * gy[k]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(gy) {
                    dx[src] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = gy.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let inner = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &g in gy {
                    dx.extend(std::iter::repeat_n(g / inner as f64, inner));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, i_dim) = (xs[0], xs[1]);
                let o_dim = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * i_dim];
                    for s in 0..n {
                        for o in 0..o_dim {
                            let g = gy[s * o_dim + o];
                            let wr = &wv[o * i_dim..(o + 1) * i_dim];
                            for (d, &wv) in dx[s * i_dim..(s + 1) * i_dim].iter_mut().zip(wr) {
                                *d += g * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; o_dim * i_dim];
                    for s in 0..n {
                        let xr = &xv[s * i_dim..(s + 1) * i_dim];
                        for o in 0..o_dim {
                            let g = gy[s * o_dim + o];
                            for (d, &xv) in dw[o * i_dim..(o + 1) * i_dim].iter_mut().zip(xr) {
                                *d += g * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o_dim];
                    for s in 0..n {
                        for o in 0..o_dim {
                            db[o] += gy[s * o_dim + o];
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Softmax { x } => {
                let k = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(gy.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        dr[i] = yr[i] * (gr[i] - dotp);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightNorm { v, s, norms } => {
                let vv = self.value(*v).data();
                let sv = self.value(*s).data();
                let step = vv.len() / norms.len();
                let mut dv = vec![0.0; vv.len()];
                let mut ds = vec![0.0; norms.len()];
                for o in 0..norms.len() {
                    let vr = &vv[o * step..(o + 1) * step];
                    let gr = &gy[o * step..(o + 1) * step];
                    let n = norms[o];
                    let proj: f64 = vr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    ds[o] = proj;
                    for k in 0..step {
                        dv[o * step + k] = sv[o] / n * (gr[k] - vr[k] / n * proj);
                    }
                }
                self.accumulate(grads, *v, dv);
                self.accumulate(grads, *s, ds);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, gy.iter().zip(bv).map(|(g, b)| g * b).collect());
                self.accumulate(grads, *b, gy.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, gy.iter().map(|g| g * c).collect());
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, gy.to_vec()),
            Op::MulConst { x, c } => {
                self.accumulate(grads, *x, gy.iter().zip(c).map(|(g, c)| g * c).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::RowSum { x } => {
                let k = self.shape(*x)[1];
                let mut dx = Vec::with_capacity(gy.len() * k);
                for &g in gy {
                    dx.extend(std::iter::repeat_n(g, k));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AppendColumn { x, col } => {
                let k = self.shape(*x)[1];
                let mut dx = Vec::with_capacity(gy.len());
                let mut dc = Vec::with_capacity(gy.len() / (k + 1));
                for r in gy.chunks(k + 1) {
                    dx.extend_from_slice(&r[..k]);
                    dc.push(r[k]);
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *col, dc);
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > *floor { g / v } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::XLogX { x } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > 0.0 { g * (v.ln() + 1.0) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gy[0]; n]);
            }
            Op::Dot { x, c } => {
                self.accumulate(grads, *x, c.iter().map(|c| c * gy[0]).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests;
