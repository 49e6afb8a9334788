//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are created in
//! topological order, so `backward` walks the tape once in reverse and each
//! node is visited exactly once. Leaf gradients accumulate over consumers.

use crate::dct;
use crate::error::{Error, Result};
use crate::kernels::{self, WindowSpec};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelScale {
        x: Var,
        scale: Var,
    },
    Concat(Vec<Var>),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    WindowAttention {
        qkv: Var,
        spec: WindowSpec,
        probs: Vec<f64>,
    },
    ColorMatrix {
        x: Var,
        matrix: [[f64; 3]; 3],
    },
    BlockDctPack(Var),
    Sum(Var),
    Dot {
        x: Var,
        weights: Tensor,
    },
    L1 {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics recorded by a training-mode batchnorm, for updating
/// running estimates after the forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub enum BatchNormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` if the loss does
    /// not depend on it or it does not require gradients.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like `get`, with zeros for leaves the loss does not reach.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).ensure_same_shape(self.value(b), what)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &parents,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i]);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i]);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Multiplies each channel of `[..., C]` by the matching entry of a
    /// `C`-element tensor (any shape with `C` values).
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xs = self.value(x);
        let s = self.value(scale);
        let c = *xs.shape().last().unwrap_or(&0);
        if s.numel() != c {
            return Err(Error::Dimension(format!(
                "channel scale of {} values for {} channels",
                s.numel(),
                c
            )));
        }
        let value = Tensor::from_fn(xs.shape(), |i| xs.data()[i] * s.data()[i % c]);
        Ok(self.push(value, Op::ChannelScale { x, scale }, &[x, scale]))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::Dimension(format!(
                    "concat: leading dims {:?} vs {:?}",
                    &s[..s.len() - 1],
                    lead
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension(format!(
                "gather index {bad} out of range {}",
                src.len()
            )));
        }
        let value = Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Selects channels of an `[H, W, C]` map in the given order.
    pub fn gather_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let k = channels.len();
        let mut index = Vec::with_capacity(h * w * k);
        for p in 0..h * w {
            index.extend(channels.iter().map(|&ch| p * c + ch));
        }
        self.gather(x, index, &[h, w, k])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().last().unwrap_or(&0);
        if c == 0 || xs.numel() == 0 {
            return Err(Error::Dimension("layernorm over an empty group".into()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c {
            return Err(Error::Dimension("layernorm affine size".into()));
        }
        let rows = xs.numel() / c;
        let mut xhat = vec![0.0; xs.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.numel()];
        for r in 0..rows {
            let row = &xs.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let n = (row[k] - mean) * is;
                xhat[r * c + k] = n;
                out[r * c + k] = g[k] * n + b[k];
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-channel normalization over all positions of `[..., C]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.value(x);
        let c = *xs.shape().last().unwrap_or(&0);
        if c == 0 || xs.numel() == 0 {
            return Err(Error::Dimension("batchnorm over an empty group".into()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c {
            return Err(Error::Dimension("batchnorm affine size".into()));
        }
        let n = xs.numel() / c;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                for row in xs.data().chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xs.data().chunks_exact(c) {
                    for k in 0..c {
                        let d = row[k] - mean[k];
                        var[k] += d * d;
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension("batchnorm running stats size".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xs.numel()];
        let mut out = vec![0.0; xs.numel()];
        for (p, row) in xs.data().chunks_exact(c).enumerate() {
            for k in 0..c {
                let nv = (row[k] - mean[k]) * inv_std[k];
                xhat[p * c + k] = nv;
                out[p * c + k] = g[k] * nv + b[k];
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        let batch_stats = stats.is_some();
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { alpha * v });
        self.push(value, Op::LeakyRelu(x, alpha), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = kernels::softmax_last(self.value(x));
        self.push(value, Op::Softmax(x), &[x])
    }

    /// `[H, W, C] -> [1, 1, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if h * w == 0 {
            return Err(Error::Dimension("global pooling over an empty map".into()));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= (h * w) as f64);
        let value = Tensor::new(vec![1, 1, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn window_attention(&mut self, qkv: Var, heads: usize, window: usize) -> Result<Var> {
        let spec = WindowSpec::new(self.value(qkv), heads, window)?;
        let (value, probs) = kernels::window_attention(self.value(qkv), &spec);
        Ok(self.push(value, Op::WindowAttention { qkv, spec, probs }, &[qkv]))
    }

    /// Per-pixel linear colour map `y = M x + offset` over `[H, W, 3]`.
    pub fn color_matrix(&mut self, x: Var, matrix: [[f64; 3]; 3], offset: [f64; 3]) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if c != 3 {
            return Err(Error::Dimension(format!(
                "colour map needs 3 channels, got {c}"
            )));
        }
        let mut out = vec![0.0; h * w * 3];
        for (o, px) in out
            .chunks_exact_mut(3)
            .zip(self.value(x).data().chunks_exact(3))
        {
            for r in 0..3 {
                o[r] =
                    matrix[r][0] * px[0] + matrix[r][1] * px[1] + matrix[r][2] * px[2] + offset[r];
            }
        }
        let value = Tensor::new(vec![h, w, 3], out)?;
        Ok(self.push(value, Op::ColorMatrix { x, matrix }, &[x]))
    }

    /// Block DCT of every 8x8 patch of each plane, packed into
    /// `[H/8, W/8, 64 * planes]` band channels.
    pub fn block_dct_pack(&mut self, x: Var) -> Result<Var> {
        let value = dct::pack_planes(self.value(x))?;
        Ok(self.push(value, Op::BlockDctPack(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// `sum(x * weights)` with constant weights.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.value(x).ensure_same_shape(&weights, "dot")?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x]))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.value(pred).ensure_same_shape(target, "l1 loss")?;
        let p = self.value(pred);
        let n = p.numel().max(1) as f64;
        let s = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(s),
            Op::L1 {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }

    /// Hash of every piecewise decision taken in the forward pass: ReLU
    /// sides, L1 signs and gather permutations. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::L1 { pred, target } => {
                    for (p, t) in self.value(*pred).data().iter().zip(target.data()) {
                        p.partial_cmp(t).hash(&mut h);
                    }
                }
                Op::Gather { index, .. } => index.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage(
                "backward on a value that does not depend on any gradient-tracked leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                    self.wants(*input),
                )?;
                if let Some(dx) = cg.input {
                    accumulate(&mut grads[input.0], dx);
                }
                if self.wants(*weight) {
                    accumulate(&mut grads[weight.0], cg.weight);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], cg.bias);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(
                        &mut grads[a.0],
                        g.iter().zip(bv).map(|(g, y)| g * y).collect(),
                    );
                }
                if self.wants(*b) {
                    accumulate(
                        &mut grads[b.0],
                        g.iter().zip(av).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::Scale(x, f) => {
                accumulate(&mut grads[x.0], g.iter().map(|v| v * f).collect());
            }
            Op::ChannelScale { x, scale } => {
                let xs = self.value(*x).data();
                let s = self.value(*scale).data();
                let c = s.len();
                if self.wants(*x) {
                    accumulate(
                        &mut grads[x.0],
                        g.iter().enumerate().map(|(i, gv)| gv * s[i % c]).collect(),
                    );
                }
                if self.wants(*scale) {
                    let mut ds = vec![0.0; c];
                    for (i, (gv, xv)) in g.iter().zip(xs).enumerate() {
                        ds[i % c] += gv * xv;
                    }
                    accumulate(&mut grads[scale.0], ds);
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.value(*p).shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    offset += w;
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, &i) in g.iter().zip(index) {
                    dx[i] += gv;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let c = gm.len();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        dg[i % c] += gv * xhat[i];
                        db[i % c] += gv;
                    }
                    if self.wants(*gamma) {
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if self.wants(*beta) {
                        accumulate(&mut grads[beta.0], db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * c..(r + 1) * c];
                        let rx = &xhat[r * c..(r + 1) * c];
                        let dxhat: Vec<f64> = rg.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(rx).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for k in 0..c {
                            dx[r * c + k] = is * (dxhat[k] - mean_d - rx[k] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
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
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let n = g.len() / c;
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    dg[i % c] += gv * xhat[i];
                    db[i % c] += gv;
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, gv) in g.iter().enumerate() {
                        let k = i % c;
                        dx[i] = if *batch_stats {
                            gm[k] * inv_std[k] / n as f64
                                * (n as f64 * gv - db[k] - xhat[i] * dg[k])
                        } else {
                            gm[k] * inv_std[k] * gv
                        };
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], db);
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                accumulate(
                    &mut grads[x.0],
                    g.iter()
                        .zip(xs)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::LeakyRelu(x, alpha) => {
                let xs = self.value(*x).data();
                accumulate(
                    &mut grads[x.0],
                    g.iter()
                        .zip(xs)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { alpha * gv })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                accumulate(
                    &mut grads[x.0],
                    g.iter().zip(ys).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                );
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                accumulate(
                    &mut grads[x.0],
                    g.iter()
                        .zip(xs)
                        .map(|(gv, v)| gv * kernels::gelu_grad(*v))
                        .collect(),
                );
            }
            Op::Softmax(x) => {
                let ys = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((d, gr), yr) in dx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(ys.chunks_exact(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        d[k] = yr[k] * (gr[k] - dot);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::GlobalAvgPool(x) => {
                let (h, w, c) = self.value(*x).hwc()?;
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; h * w * c];
                for row in dx.chunks_exact_mut(c) {
                    for (d, gv) in row.iter_mut().zip(g) {
                        *d = gv * inv;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::WindowAttention { qkv, spec, probs } => {
                let d = kernels::window_attention_backward(self.value(*qkv), probs, g, spec);
                accumulate(&mut grads[qkv.0], d);
            }
            Op::ColorMatrix { x, matrix } => {
                let mut dx = vec![0.0; g.len()];
                for (d, gp) in dx.chunks_exact_mut(3).zip(g.chunks_exact(3)) {
                    for col in 0..3 {
                        d[col] = matrix[0][col] * gp[0]
                            + matrix[1][col] * gp[1]
                            + matrix[2][col] * gp[2];
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::BlockDctPack(x) => {
                // orthonormal transform and a permutation: the adjoint is the inverse
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let dx = dct::unpack_planes(&gt)?;
                accumulate(&mut grads[x.0], dx.into_data());
            }
            Op::Sum(x) => {
                accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).numel()]);
            }
            Op::Dot { x, weights } => {
                accumulate(
                    &mut grads[x.0],
                    weights.data().iter().map(|w| w * g[0]).collect(),
                );
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len().max(1) as f64;
                accumulate(
                    &mut grads[pred.0],
                    p.iter()
                        .zip(target.data())
                        .map(|(a, b)| {
                            let d = a - b;
                            let s = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            g[0] * s / n
                        })
                        .collect(),
                );
            }
        }
        Ok(())
    }
}
