//! Reverse-mode automatic differentiation over tensors.
//!
//! A `Graph` is a tape of nodes; parents always precede children, so the
//! tape order is a topological order and backward is a single reverse
//! sweep. Leaves are registered with a name and a `wants_grad` flag;
//! `backward` returns a map from leaf name to gradient. Registering the
//! same name twice (weight sharing) accumulates gradients for that name.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

/// Gradients keyed by leaf name, in deterministic order.
pub type GradientMap = BTreeMap<String, Tensor>;

/// An operation with a caller-supplied forward and vector-Jacobian product.
///
/// Lets other modules (spectral loss, classifier losses) extend the op set
/// without touching the engine.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients w.r.t. each input; entries where `needs[i]` is false may be
    /// `None`.
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add,
    Sub,
    Hadamard,
    ScalarMul(f32),
    Linear,
    Conv3d,
    Silu,
    Relu,
    Clamp01,
    Tanh,
    Sum,
    Mean,
    L2Norm,
    Reshape,
    ConcatChannel,
    Broadcast,
    AvgPool2,
    SpatialMean,
    Custom(Arc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Hadamard => "hadamard",
            Op::ScalarMul(_) => "scalar-mul",
            Op::Linear => "linear",
            Op::Conv3d => "conv3d",
            Op::Silu => "silu",
            Op::Relu => "relu",
            Op::Clamp01 => "clamp01",
            Op::Tanh => "tanh",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2Norm => "l2norm",
            Op::Reshape => "reshape",
            Op::ConcatChannel => "concat-channel",
            Op::Broadcast => "broadcast",
            Op::AvgPool2 => "avgpool2",
            Op::SpatialMean => "spatial-mean",
            Op::Custom(op) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<NodeRef>,
    requires_grad: bool,
    leaf_name: Option<String>,
}

/// Reverse-mode computation graph. One backward pass per graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, n: NodeRef) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a named leaf. Gradients are produced for it iff `wants_grad`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor, wants_grad: bool) -> NodeRef {
        self.push(Node {
            value,
            op: Op::Leaf,
            parents: vec![],
            requires_grad: wants_grad,
            leaf_name: Some(name.into()),
        })
    }

    /// Register an unnamed constant; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeRef {
        self.push(Node {
            value,
            op: Op::Leaf,
            parents: vec![],
            requires_grad: false,
            leaf_name: None,
        })
    }

    fn push(&mut self, node: Node) -> NodeRef {
        debug_assert!(
            node.value.is_finite(),
            "non-finite output of `{}`",
            node.op.name()
        );
        self.nodes.push(node);
        NodeRef(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op, a: NodeRef, value: Tensor) -> NodeRef {
        let requires_grad = self.nodes[a.0].requires_grad;
        self.push(Node {
            value,
            op,
            parents: vec![a],
            requires_grad,
            leaf_name: None,
        })
    }

    fn binary(&mut self, op: Op, a: NodeRef, b: NodeRef, value: Tensor) -> NodeRef {
        let requires_grad = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(Node {
            value,
            op,
            parents: vec![a, b],
            requires_grad,
            leaf_name: None,
        })
    }

    // ---- primitives ------------------------------------------------------

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(Op::Add, a, b, value))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(Op::Sub, a, b, value))
    }

    pub fn hadamard(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.binary(Op::Hadamard, a, b, value))
    }

    pub fn scalar_mul(&mut self, a: NodeRef, s: f32) -> NodeRef {
        let value = self.value(a).scale(s);
        self.unary(Op::ScalarMul(s), a, value)
    }

    /// Fully connected layer: `x (B,I) · w (O,I)^T + b (O) -> (B,O)`.
    pub fn linear(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = linear_forward(self.value(x), self.value(w), self.value(b))?;
        let requires_grad = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        Ok(self.push(Node {
            value,
            op: Op::Linear,
            parents: vec![x, w, b],
            requires_grad,
            leaf_name: None,
        }))
    }

    /// 3D convolution, stride 1, zero padding, odd kernel extents so the
    /// output keeps the input's T, H, W.
    pub fn conv3d(&mut self, x: NodeRef, kernel: NodeRef) -> Result<NodeRef> {
        let value = conv3d_forward(self.value(x), self.value(kernel))?;
        Ok(self.binary(Op::Conv3d, x, kernel, value))
    }

    pub fn silu(&mut self, a: NodeRef) -> NodeRef {
        let value = self.value(a).map(|v| v * sigmoid(v));
        self.unary(Op::Silu, a, value)
    }

    pub fn relu(&mut self, a: NodeRef) -> NodeRef {
        let value = self.value(a).map(|v| v.max(0.0));
        self.unary(Op::Relu, a, value)
    }

    /// Clamp to [0,1]; backward passes the gradient where the input lies in
    /// [0,1] and zeroes it outside (straight-through at the boundary).
    pub fn clamp01(&mut self, a: NodeRef) -> NodeRef {
        let value = self.value(a).clamp01();
        self.unary(Op::Clamp01, a, value)
    }

    pub fn tanh(&mut self, a: NodeRef) -> NodeRef {
        let value = self.value(a).map(f32::tanh);
        self.unary(Op::Tanh, a, value)
    }

    pub fn sum(&mut self, a: NodeRef) -> NodeRef {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>();
        let value = Tensor::scalar(s as f32);
        self.unary(Op::Sum, a, value)
    }

    pub fn mean(&mut self, a: NodeRef) -> NodeRef {
        let value = Tensor::scalar(self.value(a).mean());
        self.unary(Op::Mean, a, value)
    }

    pub fn l2norm(&mut self, a: NodeRef) -> NodeRef {
        let value = Tensor::scalar(self.value(a).l2_norm() as f32);
        self.unary(Op::L2Norm, a, value)
    }

    pub fn reshape(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.unary(Op::Reshape, a, value))
    }

    /// Concatenate along axis 1 (channels); all other extents must match.
    pub fn concat_channel(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = concat_channel_forward(self.value(a), self.value(b))?;
        Ok(self.binary(Op::ConcatChannel, a, b, value))
    }

    /// Broadcast to `target`: same rank, every extent either equal or 1.
    pub fn broadcast(&mut self, a: NodeRef, target: &[usize]) -> Result<NodeRef> {
        let value = broadcast_forward(self.value(a), target)?;
        Ok(self.unary(Op::Broadcast, a, value))
    }

    /// 2x2x2 average pooling over (T,H,W) of a rank-5 tensor; ragged edges
    /// average over the elements actually present.
    pub fn avg_pool2(&mut self, a: NodeRef) -> Result<NodeRef> {
        let value = avg_pool2_forward(self.value(a))?;
        Ok(self.unary(Op::AvgPool2, a, value))
    }

    /// Mean over (T,H,W) per (batch, channel): rank-5 -> rank-2.
    pub fn spatial_mean(&mut self, a: NodeRef) -> Result<NodeRef> {
        let value = spatial_mean_forward(self.value(a))?;
        Ok(self.unary(Op::SpatialMean, a, value))
    }

    /// Apply a caller-defined op with its own VJP.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeRef]) -> Result<NodeRef> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&n| self.value(n)).collect();
        let value = op.forward(&tensors)?;
        let requires_grad = inputs.iter().any(|&n| self.nodes[n.0].requires_grad);
        Ok(self.push(Node {
            value,
            op: Op::Custom(op),
            parents: inputs.to_vec(),
            requires_grad,
            leaf_name: None,
        }))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// registered with `wants_grad` (zeros if the leaf is unreachable).
    /// A second call on the same graph is an error.
    pub fn backward(&mut self, loss: NodeRef) -> Result<GradientMap> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this graph; build a fresh graph instead",
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(grad);
                continue;
            }
            let parent_ids = node.parents.clone();
            let needs: Vec<bool> = parent_ids
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = self.node_vjp(i, &grad, &needs)?;
            debug_assert_eq!(parent_grads.len(), parent_ids.len());
            for (p, pg) in parent_ids.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert!(
                    pg.is_finite(),
                    "non-finite gradient out of `{}`",
                    self.nodes[i].op.name()
                );
                match &mut grads[p.0] {
                    Some(existing) => *existing = existing.add(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut map = GradientMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            if let Some(name) = &node.leaf_name {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match map.get_mut(name) {
                    Some(existing) => *existing = existing.add(&g)?,
                    None => {
                        map.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(map)
    }

    fn node_vjp(&self, i: usize, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[i];
        let pv = |j: usize| &self.nodes[node.parents[j].0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.clone()),
            ],
            Op::Sub => vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.scale(-1.0)),
            ],
            Op::Hadamard => vec![
                if needs[0] { Some(grad.hadamard(pv(1))?) } else { None },
                if needs[1] { Some(grad.hadamard(pv(0))?) } else { None },
            ],
            Op::ScalarMul(s) => vec![needs[0].then(|| grad.scale(*s))],
            Op::Linear => linear_vjp(pv(0), pv(1), grad, needs)?,
            Op::Conv3d => conv3d_vjp(pv(0), pv(1), grad, needs)?,
            Op::Silu => {
                let x = pv(0);
                vec![needs[0].then(|| {
                    grad.zip_map(x, "silu-vjp", |g, v| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .expect("shape checked at forward")
                })]
            }
            Op::Relu => {
                let x = pv(0);
                vec![needs[0].then(|| {
                    grad.zip_map(x, "relu-vjp", |g, v| if v > 0.0 { g } else { 0.0 })
                        .expect("shape checked at forward")
                })]
            }
            Op::Clamp01 => {
                let x = pv(0);
                vec![needs[0].then(|| {
                    grad.zip_map(x, "clamp01-vjp", |g, v| {
                        if (0.0..=1.0).contains(&v) {
                            g
                        } else {
                            0.0
                        }
                    })
                    .expect("shape checked at forward")
                })]
            }
            Op::Tanh => {
                let y = &node.value;
                vec![needs[0].then(|| {
                    grad.zip_map(y, "tanh-vjp", |g, t| g * (1.0 - t * t))
                        .expect("shape checked at forward")
                })]
            }
            Op::Sum => {
                let g = grad.item()?;
                vec![needs[0].then(|| Tensor::full(pv(0).shape(), g))]
            }
            Op::Mean => {
                let g = grad.item()? / pv(0).len() as f32;
                vec![needs[0].then(|| Tensor::full(pv(0).shape(), g))]
            }
            Op::L2Norm => {
                let g = grad.item()?;
                let norm = node.value.item()? as f64;
                vec![needs[0].then(|| {
                    if norm < 1e-12 {
                        Tensor::zeros(pv(0).shape())
                    } else {
                        pv(0).scale(g / norm as f32)
                    }
                })]
            }
            Op::Reshape => vec![if needs[0] {
                Some(grad.reshape(pv(0).shape())?)
            } else {
                None
            }],
            Op::ConcatChannel => concat_channel_vjp(pv(0), pv(1), grad, needs)?,
            Op::Broadcast => vec![if needs[0] {
                Some(broadcast_vjp(pv(0).shape(), grad))
            } else {
                None
            }],
            Op::AvgPool2 => vec![if needs[0] {
                Some(avg_pool2_vjp(pv(0).shape(), grad)?)
            } else {
                None
            }],
            Op::SpatialMean => vec![if needs[0] {
                Some(spatial_mean_vjp(pv(0).shape(), grad)?)
            } else {
                None
            }],
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                op.vjp(&inputs, &node.value, grad, needs)?
            }
        };
        Ok(out)
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

// ---- linear ---------------------------------------------------------------

fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = |details: String| Error::shape("linear", details);
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(err(format!(
            "want x (B,I), w (O,I), b (O); got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (bn, inp) = (x.shape()[0], x.shape()[1]);
    let (out, inp2) = (w.shape()[0], w.shape()[1]);
    if inp != inp2 || b.shape()[0] != out {
        return Err(err(format!(
            "x {:?} vs w {:?} vs b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(&[bn, out]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let yd = y.data_mut();
    for bi in 0..bn {
        let xrow = &xd[bi * inp..(bi + 1) * inp];
        for o in 0..out {
            let wrow = &wd[o * inp..(o + 1) * inp];
            let mut acc = bd[o];
            for i in 0..inp {
                acc += xrow[i] * wrow[i];
            }
            yd[bi * out + o] = acc;
        }
    }
    Ok(y)
}

fn linear_vjp(x: &Tensor, w: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let (bn, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let gd = grad.data();
    let dx = if needs[0] {
        let mut dx = Tensor::zeros(x.shape());
        let dxd = dx.data_mut();
        let wd = w.data();
        for bi in 0..bn {
            for o in 0..out {
                let g = gd[bi * out + o];
                let wrow = &wd[o * inp..(o + 1) * inp];
                let drow = &mut dxd[bi * inp..(bi + 1) * inp];
                for i in 0..inp {
                    drow[i] += g * wrow[i];
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    let dw = if needs[1] {
        let mut dw = Tensor::zeros(w.shape());
        let dwd = dw.data_mut();
        let xd = x.data();
        for bi in 0..bn {
            let xrow = &xd[bi * inp..(bi + 1) * inp];
            for o in 0..out {
                let g = gd[bi * out + o];
                let drow = &mut dwd[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    drow[i] += g * xrow[i];
                }
            }
        }
        Some(dw)
    } else {
        None
    };
    let db = if needs[2] {
        let mut db = Tensor::zeros(&[out]);
        let dbd = db.data_mut();
        for bi in 0..bn {
            for o in 0..out {
                dbd[o] += gd[bi * out + o];
            }
        }
        Some(db)
    } else {
        None
    };
    Ok(vec![dx, dw, db])
}

// ---- conv3d ---------------------------------------------------------------

struct ConvDims {
    b: usize,
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

fn conv3d_dims(x: &Tensor, k: &Tensor) -> Result<ConvDims> {
    let err = |details: String| Error::shape("conv3d", details);
    if x.rank() != 5 || k.rank() != 5 {
        return Err(err(format!(
            "want x (B,C,T,H,W) and kernel (Co,Ci,kt,kh,kw); got {:?}, {:?}",
            x.shape(),
            k.shape()
        )));
    }
    let [b, ci, t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let [co, ci2, kt, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3], k.shape()[4]];
    if ci != ci2 {
        return Err(err(format!(
            "input channels {} vs kernel channels {}",
            ci, ci2
        )));
    }
    if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(err(format!(
            "kernel extents must be odd to preserve T,H,W; got ({kt},{kh},{kw})"
        )));
    }
    Ok(ConvDims { b, ci, t, h, w, co, kt, kh, kw })
}

fn conv3d_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = conv3d_dims(x, k)?;
    let (pt, ph, pw) = (d.kt / 2, d.kh / 2, d.kw / 2);
    let mut y = Tensor::zeros(&[d.b, d.co, d.t, d.h, d.w]);
    let xd = x.data();
    let kd = k.data();
    let yd = y.data_mut();
    let plane = d.h * d.w;
    let vol = d.t * plane;
    for b in 0..d.b {
        for co in 0..d.co {
            let ybase = (b * d.co + co) * vol;
            for ci in 0..d.ci {
                let xbase = (b * d.ci + ci) * vol;
                let kbase = (co * d.ci + ci) * d.kt * d.kh * d.kw;
                for dt in 0..d.kt {
                    for t in 0..d.t {
                        let ti = t + dt;
                        if ti < pt || ti - pt >= d.t {
                            continue;
                        }
                        let ti = ti - pt;
                        for dh in 0..d.kh {
                            for h in 0..d.h {
                                let hi = h + dh;
                                if hi < ph || hi - ph >= d.h {
                                    continue;
                                }
                                let hi = hi - ph;
                                let xrow = &xd[xbase + ti * plane + hi * d.w..];
                                let yrow = &mut yd[ybase + t * vol / d.t + h * d.w..];
                                let krow = &kd[kbase + (dt * d.kh + dh) * d.kw..kbase + (dt * d.kh + dh + 1) * d.kw];
                                for (dw, &kv) in krow.iter().enumerate() {
                                    if kv == 0.0 {
                                        continue;
                                    }
                                    let shift = dw as isize - pw as isize;
                                    let w_lo = (-shift).max(0) as usize;
                                    let w_hi = ((d.w as isize - shift).min(d.w as isize)).max(0) as usize;
                                    for w in w_lo..w_hi {
                                        yrow[w] += xrow[(w as isize + shift) as usize] * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

fn conv3d_vjp(x: &Tensor, k: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let d = conv3d_dims(x, k)?;
    let (pt, ph, pw) = (d.kt / 2, d.kh / 2, d.kw / 2);
    let xd = x.data();
    let kd = k.data();
    let gd = grad.data();
    let plane = d.h * d.w;
    let vol = d.t * plane;

    let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut dk = needs[1].then(|| Tensor::zeros(k.shape()));

    for b in 0..d.b {
        for co in 0..d.co {
            let gbase = (b * d.co + co) * vol;
            for ci in 0..d.ci {
                let xbase = (b * d.ci + ci) * vol;
                let kbase = (co * d.ci + ci) * d.kt * d.kh * d.kw;
                for dt in 0..d.kt {
                    for t in 0..d.t {
                        let ti = t + dt;
                        if ti < pt || ti - pt >= d.t {
                            continue;
                        }
                        let ti = ti - pt;
                        for dh in 0..d.kh {
                            for h in 0..d.h {
                                let hi = h + dh;
                                if hi < ph || hi - ph >= d.h {
                                    continue;
                                }
                                let hi = hi - ph;
                                let grow = &gd[gbase + t * plane + h * d.w..gbase + t * plane + h * d.w + d.w];
                                let xoff = xbase + ti * plane + hi * d.w;
                                for dw in 0..d.kw {
                                    let shift = dw as isize - pw as isize;
                                    let w_lo = (-shift).max(0) as usize;
                                    let w_hi = ((d.w as isize - shift).min(d.w as isize)).max(0) as usize;
                                    let kidx = kbase + (dt * d.kh + dh) * d.kw + dw;
                                    if let Some(dx) = dx.as_mut() {
                                        let kv = kd[kidx];
                                        if kv != 0.0 {
                                            let dxd = dx.data_mut();
                                            for w in w_lo..w_hi {
                                                dxd[xoff + (w as isize + shift) as usize] += grow[w] * kv;
                                            }
                                        }
                                    }
                                    if let Some(dk) = dk.as_mut() {
                                        let mut acc = 0.0f32;
                                        for w in w_lo..w_hi {
                                            acc += grow[w] * xd[xoff + (w as isize + shift) as usize];
                                        }
                                        dk.data_mut()[kidx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(vec![dx, dk])
}

// ---- concat / broadcast / pooling ----------------------------------------

fn concat_channel_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = |details: String| Error::shape("concat-channel", details);
    if a.rank() != b.rank() || a.rank() < 2 {
        return Err(err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    for (i, (&ea, &eb)) in a.shape().iter().zip(b.shape()).enumerate() {
        if i != 1 && ea != eb {
            return Err(err(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
    }
    let mut shape = a.shape().to_vec();
    shape[1] += b.shape()[1];
    let lead = a.shape()[0];
    let rest: usize = a.shape()[2..].iter().product();
    let block_a = a.shape()[1] * rest;
    let block_b = b.shape()[1] * rest;
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for l in 0..lead {
        let dst = l * (block_a + block_b);
        od[dst..dst + block_a].copy_from_slice(&a.data()[l * block_a..(l + 1) * block_a]);
        od[dst + block_a..dst + block_a + block_b]
            .copy_from_slice(&b.data()[l * block_b..(l + 1) * block_b]);
    }
    Ok(out)
}

fn concat_channel_vjp(
    a: &Tensor,
    b: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let lead = a.shape()[0];
    let rest: usize = a.shape()[2..].iter().product();
    let block_a = a.shape()[1] * rest;
    let block_b = b.shape()[1] * rest;
    let gd = grad.data();
    let da = needs[0].then(|| {
        let mut da = Tensor::zeros(a.shape());
        for l in 0..lead {
            let src = l * (block_a + block_b);
            da.data_mut()[l * block_a..(l + 1) * block_a]
                .copy_from_slice(&gd[src..src + block_a]);
        }
        da
    });
    let db = needs[1].then(|| {
        let mut db = Tensor::zeros(b.shape());
        for l in 0..lead {
            let src = l * (block_a + block_b) + block_a;
            db.data_mut()[l * block_b..(l + 1) * block_b]
                .copy_from_slice(&gd[src..src + block_b]);
        }
        db
    });
    Ok(vec![da, db])
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn broadcast_forward(a: &Tensor, target: &[usize]) -> Result<Tensor> {
    let err = |details: String| Error::shape("broadcast", details);
    if a.rank() != target.len() {
        return Err(err(format!("{:?} -> {:?}", a.shape(), target)));
    }
    for (&e, &t) in a.shape().iter().zip(target) {
        if e != t && e != 1 {
            return Err(err(format!("{:?} -> {:?}", a.shape(), target)));
        }
    }
    let mut out = Tensor::zeros(target);
    let src_strides = strides_of(a.shape());
    let ad = a.data();
    let od = out.data_mut();
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    for slot in od.iter_mut() {
        let mut src = 0;
        for (axis, &i) in idx.iter().enumerate() {
            if a.shape()[axis] != 1 {
                src += i * src_strides[axis];
            }
        }
        *slot = ad[src];
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < target[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Ok(out)
}

fn broadcast_vjp(src_shape: &[usize], grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(src_shape);
    let src_strides = strides_of(src_shape);
    let od = out.data_mut();
    let gd = grad.data();
    let target = grad.shape();
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    for &g in gd.iter() {
        let mut src = 0;
        for (axis, &i) in idx.iter().enumerate() {
            if src_shape[axis] != 1 {
                src += i * src_strides[axis];
            }
        }
        od[src] += g;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < target[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

fn pooled_extent(e: usize) -> usize {
    e.div_ceil(2)
}

fn avg_pool2_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 5 {
        return Err(Error::shape(
            "avgpool2",
            format!("want rank-5 (B,C,T,H,W), got {:?}", x.shape()),
        ));
    }
    let [b, c, t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let (ot, oh, ow) = (pooled_extent(t), pooled_extent(h), pooled_extent(w));
    let mut y = Tensor::zeros(&[b, c, ot, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for bc in 0..b * c {
        let xbase = bc * t * h * w;
        let ybase = bc * ot * oh * ow;
        for pt in 0..ot {
            for ph in 0..oh {
                for pw in 0..ow {
                    let mut acc = 0.0f64;
                    let mut count = 0usize;
                    for it in (pt * 2)..((pt * 2 + 2).min(t)) {
                        for ih in (ph * 2)..((ph * 2 + 2).min(h)) {
                            for iw in (pw * 2)..((pw * 2 + 2).min(w)) {
                                acc += xd[xbase + (it * h + ih) * w + iw] as f64;
                                count += 1;
                            }
                        }
                    }
                    yd[ybase + (pt * oh + ph) * ow + pw] = (acc / count as f64) as f32;
                }
            }
        }
    }
    Ok(y)
}

fn avg_pool2_vjp(x_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let [b, c, t, h, w] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3], x_shape[4]];
    let (ot, oh, ow) = (pooled_extent(t), pooled_extent(h), pooled_extent(w));
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    let gd = grad.data();
    for bc in 0..b * c {
        let xbase = bc * t * h * w;
        let gbase = bc * ot * oh * ow;
        for pt in 0..ot {
            for ph in 0..oh {
                for pw in 0..ow {
                    let t_hi = (pt * 2 + 2).min(t);
                    let h_hi = (ph * 2 + 2).min(h);
                    let w_hi = (pw * 2 + 2).min(w);
                    let count = (t_hi - pt * 2) * (h_hi - ph * 2) * (w_hi - pw * 2);
                    let g = gd[gbase + (pt * oh + ph) * ow + pw] / count as f32;
                    for it in (pt * 2)..t_hi {
                        for ih in (ph * 2)..h_hi {
                            for iw in (pw * 2)..w_hi {
                                dxd[xbase + (it * h + ih) * w + iw] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn spatial_mean_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 5 {
        return Err(Error::shape(
            "spatial-mean",
            format!("want rank-5 (B,C,T,H,W), got {:?}", x.shape()),
        ));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let vol: usize = x.shape()[2..].iter().product();
    let mut y = Tensor::zeros(&[b, c]);
    let yd = y.data_mut();
    for bc in 0..b * c {
        let s: f64 = x.data()[bc * vol..(bc + 1) * vol]
            .iter()
            .map(|&v| v as f64)
            .sum();
        yd[bc] = (s / vol as f64) as f32;
    }
    Ok(y)
}

fn spatial_mean_vjp(x_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let (b, c) = (x_shape[0], x_shape[1]);
    let vol: usize = x_shape[2..].iter().product();
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for bc in 0..b * c {
        let g = grad.data()[bc] / vol as f32;
        for v in &mut dxd[bc * vol..(bc + 1) * vol] {
            *v = g;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::{sample_gaussian, SeededRng};

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn add_of_zeros_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap(), true);
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv3d_identity_kernel_is_identity() {
        let mut rng = SeededRng::new(5);
        let x = sample_gaussian(&[2, 3, 4, 5, 6], &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf("x", x.clone(), true);
        // One 1x1x1 kernel of value 1 per (out=in) channel pair on the diagonal.
        let mut k = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let kn = g.constant(k);
        let y = g.conv3d(xn, kn).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv3d_is_linear_in_input_and_kernel() {
        let mut rng = SeededRng::new(6);
        let x1 = sample_gaussian(&[1, 2, 3, 4, 4], &mut rng);
        let x2 = sample_gaussian(&[1, 2, 3, 4, 4], &mut rng);
        let k1 = sample_gaussian(&[2, 2, 3, 3, 3], &mut rng);
        let k2 = sample_gaussian(&[2, 2, 3, 3, 3], &mut rng);
        let conv = |x: &Tensor, k: &Tensor| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let kn = g.constant(k.clone());
            let y = g.conv3d(xn, kn).unwrap();
            g.value(y).clone()
        };
        // Superposition in the input.
        let lhs = conv(&x1.add(&x2).unwrap(), &k1);
        let rhs = conv(&x1, &k1).add(&conv(&x2, &k1)).unwrap();
        assert_close(lhs.data(), rhs.data(), 1e-5);
        // Superposition in the kernel.
        let lhs = conv(&x1, &k1.add(&k2).unwrap());
        let rhs = conv(&x1, &k1).add(&conv(&x1, &k2)).unwrap();
        assert_close(lhs.data(), rhs.data(), 1e-5);
    }

    #[test]
    fn mean_of_constant_tensor() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 4], 2.0));
        let m = g.mean(x);
        assert_eq!(g.value(m).item().unwrap(), 2.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::full(&[2, 3], 1.5), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_mean_square() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::scalar(3.0), true);
        let sq = g.hadamard(x, x).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::scalar(1.0), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::zeros(&[2, 2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_leaf_names_accumulate() {
        let mut g = Graph::new();
        let a = g.leaf("w", Tensor::scalar(2.0), true);
        let b = g.leaf("w", Tensor::scalar(2.0), true);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[2.0]);
    }

    #[test]
    fn unreachable_trainable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let _orphan = g.leaf("orphan", Tensor::zeros(&[3]), true);
        let x = g.leaf("x", Tensor::scalar(1.0), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["orphan"].data(), &[0.0; 3]);
    }

    #[test]
    fn clamp01_zeroes_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.leaf(
            "x",
            Tensor::new(&[4], vec![-0.5, 0.25, 0.75, 1.5]).unwrap(),
            true,
        );
        let c = g.clamp01(x);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_and_reduce_roundtrip_gradient() {
        let mut g = Graph::new();
        let bias = g.leaf("b", Tensor::new(&[1, 2, 1, 1, 1], vec![0.5, -0.5]).unwrap(), true);
        let x = g.constant(Tensor::full(&[2, 2, 2, 2, 2], 1.0));
        let bb = g.broadcast(bias, &[2, 2, 2, 2, 2]).unwrap();
        let y = g.add(x, bb).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // Each bias entry reaches 2*2*2*2 = 16 positions.
        assert_eq!(grads["b"].data(), &[16.0, 16.0]);
    }

    #[test]
    fn concat_channel_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf("a", Tensor::full(&[1, 2, 2], 1.0), true);
        let b = g.leaf("b", Tensor::full(&[1, 1, 2], 2.0), true);
        let c = g.concat_channel(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 2]);
        let w = g.constant(Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.hadamard(c, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["a"].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grads["b"].data(), &[5.0, 6.0]);
    }

    #[test]
    fn avg_pool_handles_ragged_edges() {
        // T=1,H=3,W=3 pools to 1x2x2 with window counts 4,2,2,1.
        let x = Tensor::new(
            &[1, 1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let xn = g.leaf("x", x, true);
        let y = g.avg_pool2(xn).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 2, 2]);
        assert_close(g.value(y).data(), &[3.0, 4.5, 7.5, 9.0], 1e-6);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_close(
            grads["x"].data(),
            &[0.25, 0.25, 0.5, 0.25, 0.25, 0.5, 0.5, 0.5, 1.0],
            1e-6,
        );
    }

    #[test]
    fn spatial_mean_reduces_to_batch_channel() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::full(&[2, 3, 2, 2, 2], 1.5), true);
        let y = g.spatial_mean(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert_close(g.value(y).data(), &[1.5; 6], 1e-6);
    }

    #[test]
    fn shape_errors_name_the_offending_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let err = g.conv3d(x, k).unwrap_err();
        assert!(err.to_string().contains("odd"), "{err}");
    }
}
