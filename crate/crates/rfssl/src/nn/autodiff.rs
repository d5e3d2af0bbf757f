//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A `Tape` owns every intermediate tensor of one training step. Nodes
//! are appended in evaluation order, so the reverse of insertion order
//! is a valid backward schedule. Parameters enter as leaves; when the
//! same leaf feeds several branches (two augmented views, shared
//! weights), backward accumulates, which is exactly weight sharing.
//!
//! The op set is the minimum the models need: convolution, batch norm
//! (batch or given statistics), linear, ReLU, add, scale, global average
//! pool, plus `CustomOp` for fused loss heads.

use crate::error::{Error, Result};
use crate::nn::conv::{conv_backward, conv_forward, ConvDims};
use crate::nn::tensor::{matmul_ab, matmul_abt, matmul_atb, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// A differentiable operation with user-defined forward and backward.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients w.r.t. each input given the upstream gradient; `None`
    /// for inputs that need no gradient.
    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Relu,
    Add,
    Scale {
        factor: f64,
    },
    Conv2d {
        dims: ConvDims,
    },
    BatchNorm {
        channels: usize,
        spatial: usize,
        batch_stats: bool,
        saved_mean: Vec<f64>,
        saved_var: Vec<f64>,
        saved_inv_std: Vec<f64>,
    },
    Linear,
    GlobalAvgPool {
        spatial: usize,
    },
    Custom(Box<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<NodeId>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<NodeId>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Gradient of the last `backward` root w.r.t. `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = {
            let xv = &self.nodes[x.0].value;
            let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::new(xv.shape().to_vec(), data).expect("same shape")
        };
        self.push(value, Op::Relu, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            if av.shape() != bv.shape() {
                return Err(Error::Shape(format!(
                    "add shape mismatch: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Add, vec![a, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = {
            let xv = &self.nodes[x.0].value;
            let data = xv.data().iter().map(|&v| v * factor).collect();
            Tensor::new(xv.shape().to_vec(), data).expect("same shape")
        };
        self.push(value, Op::Scale { factor }, vec![x])
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (value, dims) = {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[weight.0].value;
            let dims = ConvDims::infer(xv.shape(), wv.shape(), stride, pad)?;
            let out = conv_forward(xv.data(), wv.data(), &dims);
            (
                Tensor::new(vec![dims.n, dims.cout, dims.hout, dims.wout], out)?,
                dims,
            )
        };
        Ok(self.push(value, Op::Conv2d { dims }, vec![x, weight]))
    }

    /// Batch normalization over `[n, c]` or `[n, c, h, w]` input.
    ///
    /// With `given_stats` the supplied per-channel mean/variance are used
    /// (inference on running statistics); otherwise biased batch
    /// statistics are computed and saved, retrievable through
    /// [`Tape::bn_batch_stats`] for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        given_stats: Option<(Vec<f64>, Vec<f64>)>,
        eps: f64,
    ) -> Result<NodeId> {
        let (value, op) = {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            let (n, c, s) = match xv.shape() {
                [n, c] => (*n, *c, 1usize),
                [n, c, h, w] => (*n, *c, h * w),
                other => {
                    return Err(Error::Shape(format!(
                        "batch_norm wants [n,c] or [n,c,h,w], got {other:?}"
                    )))
                }
            };
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm scale/offset must have shape [{c}], got {:?} and {:?}",
                    gv.shape(),
                    bv.shape()
                )));
            }
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "batch_norm eps must be positive, got {eps}"
                )));
            }
            let m = (n * s) as f64;
            let (mean, var, batch_stats) = match given_stats {
                Some((mean, var)) => {
                    if mean.len() != c || var.len() != c {
                        return Err(Error::Shape(format!(
                            "given stats must have {c} channels, got {} and {}",
                            mean.len(),
                            var.len()
                        )));
                    }
                    (mean, var, false)
                }
                None => {
                    let mut mean = vec![0.0f64; c];
                    let mut var = vec![0.0f64; c];
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for img in 0..n {
                            let base = (img * c + ch) * s;
                            for sp in 0..s {
                                sum += xv.data()[base + sp];
                            }
                        }
                        mean[ch] = sum / m;
                        let mut sq = 0.0;
                        for img in 0..n {
                            let base = (img * c + ch) * s;
                            for sp in 0..s {
                                let d = xv.data()[base + sp] - mean[ch];
                                sq += d * d;
                            }
                        }
                        var[ch] = sq / m;
                    }
                    (mean, var, true)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = vec![0.0f64; xv.numel()];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * s;
                    let g = gv.data()[ch];
                    let b = bv.data()[ch];
                    let mu = mean[ch];
                    let istd = inv_std[ch];
                    for sp in 0..s {
                        out[base + sp] = g * (xv.data()[base + sp] - mu) * istd + b;
                    }
                }
            }
            (
                Tensor::new(xv.shape().to_vec(), out)?,
                Op::BatchNorm {
                    channels: c,
                    spatial: s,
                    batch_stats,
                    saved_mean: mean,
                    saved_var: var,
                    saved_inv_std: inv_std,
                },
            )
        };
        Ok(self.push(value, op, vec![x, gamma, beta]))
    }

    /// Batch statistics computed by a batch-stats `batch_norm` node:
    /// per-channel `(mean, biased variance)`.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                batch_stats: true,
                saved_mean,
                saved_var,
                ..
            } => Some((saved_mean, saved_var)),
            _ => None,
        }
    }

    /// Hash of the active/inactive pattern across every ReLU node on the
    /// tape. Two evaluations with equal signatures lie on the same
    /// smooth piece of the network function, which is the premise a
    /// finite-difference window must satisfy.
    pub fn relu_mask_signature(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut mix = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for node in &self.nodes {
            if matches!(node.op, Op::Relu) {
                let mut acc = 0u8;
                let mut filled = 0u8;
                for &v in node.value.data() {
                    acc = (acc << 1) | u8::from(v > 0.0);
                    filled += 1;
                    if filled == 8 {
                        mix(acc);
                        acc = 0;
                        filled = 0;
                    }
                }
                if filled > 0 {
                    mix(acc);
                }
                mix(0xFF);
            }
        }
        h
    }

    /// Smallest per-channel batch variance seen by any batch-stats
    /// normalization node on this tape. A floor near the normalization
    /// epsilon means near-dead channels: gradients there are ill
    /// conditioned, finite differencing is unreliable, and training is
    /// likely starved.
    pub fn bn_variance_floor(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BatchNorm {
                    batch_stats: true,
                    saved_var,
                    ..
                } => saved_var.iter().cloned().reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Affine layer: `y = x W^T + b` with `x` `[n, f]`, `w` `[o, f]`, `b` `[o]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[weight.0].value;
            let bv = &self.nodes[bias.0].value;
            let (n, f) = match xv.shape() {
                [n, f] => (*n, *f),
                other => return Err(Error::Shape(format!("linear input must be [n,f], got {other:?}"))),
            };
            let (o, wf) = match wv.shape() {
                [o, wf] => (*o, *wf),
                other => return Err(Error::Shape(format!("linear weight must be [o,f], got {other:?}"))),
            };
            if wf != f || bv.shape() != [o] {
                return Err(Error::Shape(format!(
                    "linear shapes inconsistent: x {:?}, w {:?}, b {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                )));
            }
            let mut out = matmul_abt(xv.data(), n, f, wv.data(), o);
            for row in out.chunks_exact_mut(o) {
                for (slot, &b) in row.iter_mut().zip(bv.data()) {
                    *slot += b;
                }
            }
            Tensor::new(vec![n, o], out)?
        };
        Ok(self.push(value, Op::Linear, vec![x, weight, bias]))
    }

    /// Mean over the spatial grid: `[n, c, h, w]` to `[n, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, spatial) = {
            let xv = &self.nodes[x.0].value;
            let (n, c, s) = match xv.shape() {
                [n, c, h, w] => (*n, *c, h * w),
                other => {
                    return Err(Error::Shape(format!(
                        "global_avg_pool wants [n,c,h,w], got {other:?}"
                    )))
                }
            };
            let mut out = vec![0.0f64; n * c];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * s;
                    let mut sum = 0.0;
                    for sp in 0..s {
                        sum += xv.data()[base + sp];
                    }
                    out[img * c + ch] = sum / s as f64;
                }
            }
            (Tensor::new(vec![n, c], out)?, s)
        };
        Ok(self.push(value, Op::GlobalAvgPool { spatial }, vec![x]))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, parents: &[NodeId]) -> Result<NodeId> {
        let value = {
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            op.forward(&inputs)?
        };
        Ok(self.push(value, Op::Custom(op), parents.to_vec()))
    }

    /// Reverse pass from a scalar root; leaf gradients are then available
    /// through [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_value = self.nodes[root.0].value.scalar_value()?;
        if !root_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "backward root is not finite: {root_value}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                // Terminal: the stored gradient is the result.
                continue;
            }
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = grads[i].take().expect("checked above");
            let node = &self.nodes[i];
            let parent_grads = self.op_backward(node, &g)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if self.nodes[parent.0].needs_grad {
                        match &mut grads[parent.0] {
                            slot @ None => *slot = Some(pg),
                            Some(existing) => existing.accumulate(&pg)?,
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn op_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let parent_value = |k: usize| -> &Tensor { &self.nodes[node.parents[k].0].value };
        match &node.op {
            Op::Leaf => Ok(Vec::new()),
            Op::Relu => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gy)| if y > 0.0 { gy } else { 0.0 })
                    .collect();
                Ok(vec![Some(Tensor::new(node.value.shape().to_vec(), data)?)])
            }
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Scale { factor } => {
                let data = g.data().iter().map(|&v| v * factor).collect();
                Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
            }
            Op::Conv2d { dims } => {
                let x = parent_value(0);
                let w = parent_value(1);
                let (gx, gw) = conv_backward(x.data(), w.data(), g.data(), dims);
                Ok(vec![
                    Some(Tensor::new(x.shape().to_vec(), gx)?),
                    Some(Tensor::new(w.shape().to_vec(), gw)?),
                ])
            }
            Op::BatchNorm {
                channels,
                spatial,
                batch_stats,
                saved_mean,
                saved_inv_std,
                ..
            } => {
                let x = parent_value(0);
                let gamma = parent_value(1);
                let c = *channels;
                let s = *spatial;
                let n = x.numel() / (c * s);
                let m = (n * s) as f64;
                let mut gx = vec![0.0f64; x.numel()];
                let mut ggamma = vec![0.0f64; c];
                let mut gbeta = vec![0.0f64; c];
                for ch in 0..c {
                    let mu = saved_mean[ch];
                    let istd = saved_inv_std[ch];
                    let gam = gamma.data()[ch];
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for img in 0..n {
                        let base = (img * c + ch) * s;
                        for sp in 0..s {
                            let gy = g.data()[base + sp];
                            let xhat = (x.data()[base + sp] - mu) * istd;
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                    }
                    ggamma[ch] = sum_gy_xhat;
                    gbeta[ch] = sum_gy;
                    if *batch_stats {
                        for img in 0..n {
                            let base = (img * c + ch) * s;
                            for sp in 0..s {
                                let gy = g.data()[base + sp];
                                let xhat = (x.data()[base + sp] - mu) * istd;
                                gx[base + sp] =
                                    gam * istd * (gy - sum_gy / m - xhat * sum_gy_xhat / m);
                            }
                        }
                    } else {
                        for img in 0..n {
                            let base = (img * c + ch) * s;
                            for sp in 0..s {
                                gx[base + sp] = gam * istd * g.data()[base + sp];
                            }
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(x.shape().to_vec(), gx)?),
                    Some(Tensor::new(vec![c], ggamma)?),
                    Some(Tensor::new(vec![c], gbeta)?),
                ])
            }
            Op::Linear => {
                let x = parent_value(0);
                let w = parent_value(1);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                let gx = matmul_ab(g.data(), n, o, w.data(), f);
                let gw = matmul_atb(g.data(), n, o, x.data(), f);
                let mut gb = vec![0.0f64; o];
                for row in g.data().chunks_exact(o) {
                    for (slot, &v) in gb.iter_mut().zip(row) {
                        *slot += v;
                    }
                }
                Ok(vec![
                    Some(Tensor::new(vec![n, f], gx)?),
                    Some(Tensor::new(vec![o, f], gw)?),
                    Some(Tensor::new(vec![o], gb)?),
                ])
            }
            Op::GlobalAvgPool { spatial } => {
                let x = parent_value(0);
                let s = *spatial;
                let nc = g.numel();
                let mut gx = vec![0.0f64; x.numel()];
                for i in 0..nc {
                    let gv = g.data()[i] / s as f64;
                    for sp in 0..s {
                        gx[i * s + sp] = gv;
                    }
                }
                Ok(vec![Some(Tensor::new(x.shape().to_vec(), gx)?)])
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                op.backward(&inputs, g)
            }
        }
    }
}
