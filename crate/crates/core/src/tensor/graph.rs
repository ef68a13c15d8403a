//! Recorded-operation tape with reverse-mode differentiation.
//!
//! Nodes are appended in topological order; `backward` walks them once in
//! reverse. Parameters are bound by name so that a weight used in several
//! forward passes of the same graph accumulates one gradient.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels as k;
use super::{Padding, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // constants carried for graph debugging
enum Op {
    Leaf,
    /// inputs: [x, kernel, bias]
    Conv2d {
        mask: Option<Arc<Tensor>>,
        padding: Padding,
    },
    Relu,
    Add,
    Mul,
    AddScalar(f64),
    Scale(f64),
    /// Depth concatenation (axis 1) of rank-4 tensors.
    Concat,
    /// Sum of all elements, yielding a scalar.
    Sum,
    /// Per-prediction negative log-likelihood. Rank-2 input is [rows, K];
    /// rank-4 input is [B, G*K, H, W] with targets in [B, G, H, W] order.
    Xent {
        levels: usize,
        targets: Arc<Vec<u16>>,
    },
    /// inputs: [x [B,C,H,W], table [n,C]]; adds table[indices[b]] to every
    /// spatial position of batch item b.
    BiasEmbed {
        indices: Arc<Vec<usize>>,
    },
    PatchSplit {
        m: usize,
    },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Bind a named parameter; repeated binds return the same node so its
    /// gradient accumulates across uses.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.params.iter().map(|(n, &id)| (n, id))
    }

    /// 2-D convolution with an optional binary kernel mask. The effective
    /// kernel is kernel ⊙ mask; gradients of masked-out entries are exactly
    /// zero.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        mask: Option<Arc<Tensor>>,
        padding: Padding,
    ) -> Result<NodeId> {
        let (xv, kv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        if let Some(m) = &mask {
            if m.shape() != kv.shape() {
                return Err(Error::dim(format!(
                    "conv2d mask shape {:?} != kernel shape {:?}",
                    m.shape(),
                    kv.shape()
                )));
            }
            debug_assert!(
                m.data().iter().all(|&v| v == 0.0 || v == 1.0),
                "conv2d mask must be binary"
            );
        }
        let dims = k::conv_dims(xv, kv, bv, padding)?;
        let eff = k::effective_kernel(kv, mask.as_deref());
        let out = k::conv2d_forward(xv, &eff, bv, &dims);
        Ok(self.push(Op::Conv2d { mask, padding }, vec![x, kernel, bias], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        // NaN propagates; a silent zero here would hide error states.
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data()
                .iter()
                .map(|&a| if a > 0.0 || a.is_nan() { a } else { 0.0 })
                .collect(),
        )
        .expect("shape preserved");
        self.push(Op::Relu, vec![x], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "add: shape {:?} != {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "mul: shape {:?} != {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a + c).collect())
            .expect("shape preserved");
        self.push(Op::AddScalar(c), vec![x], out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())
            .expect("shape preserved");
        self.push(Op::Scale(c), vec![x], out)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.len() != 4 {
            return Err(Error::dim("concat wants rank-4 tensors"));
        }
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut ctotal = 0;
        for p in parts {
            let sh = self.nodes[p.0].value.shape();
            if sh.len() != 4 || sh[0] != b || sh[2] != h || sh[3] != w {
                return Err(Error::dim(format!(
                    "concat: shape {sh:?} incompatible with [{b}, _, {h}, {w}]"
                )));
            }
            ctotal += sh[1];
        }
        let mut out = Tensor::zeros(vec![b, ctotal, h, w]);
        let plane = h * w;
        for bi in 0..b {
            let mut coff = 0;
            for p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.shape()[1];
                let src = &v.data()[bi * c * plane..(bi + 1) * c * plane];
                let dst_start = (bi * ctotal + coff) * plane;
                out.data_mut()[dst_start..dst_start + c * plane].copy_from_slice(src);
                coff += c;
            }
        }
        Ok(self.push(Op::Concat, parts.to_vec(), out))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-prediction NLL in nats. Rank-2 logits are [rows, K]; rank-4
    /// logits are [B, G*K, H, W] with targets in [B, G, H, W] order.
    pub fn xent(
        &mut self,
        logits: NodeId,
        levels: usize,
        targets: Arc<Vec<u16>>,
    ) -> Result<NodeId> {
        let v = &self.nodes[logits.0].value;
        let out = k::xent_forward(v, levels, &targets)?;
        Ok(self.push(Op::Xent { levels, targets }, vec![logits], out))
    }

    /// Mean NLL over a [rows, K] logits batch, plus the per-row NLL vector.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &[u16]) -> Result<(NodeId, NodeId)> {
        let sh = self.nodes[logits.0].value.shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::dim(format!("softmax_xent wants [B, K], got {sh:?}")));
        }
        let per_item = self.xent(logits, sh[1], Arc::new(targets.to_vec()))?;
        let loss = self.mean(per_item);
        Ok((loss, per_item))
    }

    pub fn bias_embed(
        &mut self,
        x: NodeId,
        table: NodeId,
        indices: Arc<Vec<usize>>,
    ) -> Result<NodeId> {
        let (xv, tv) = (&self.nodes[x.0].value, &self.nodes[table.0].value);
        let xs = xv.shape();
        let ts = tv.shape();
        if xs.len() != 4 || ts.len() != 2 || ts[1] != xs[1] {
            return Err(Error::dim(format!(
                "bias_embed: x {xs:?} and table {ts:?} incompatible"
            )));
        }
        if indices.len() != xs[0] {
            return Err(Error::dim(format!(
                "bias_embed: {} indices for batch of {}",
                indices.len(),
                xs[0]
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::Index(format!(
                "bias_embed index {bad} out of range [0, {})",
                ts[0]
            )));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let mut out = xv.clone();
        for bi in 0..b {
            for ci in 0..c {
                let add = tv.data()[indices[bi] * c + ci];
                let start = (bi * c + ci) * plane;
                for v in &mut out.data_mut()[start..start + plane] {
                    *v += add;
                }
            }
        }
        Ok(self.push(Op::BiasEmbed { indices }, vec![x, table], out))
    }

    pub fn patch_split(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let out = k::patch_split_forward(&self.nodes[x.0].value, m)?;
        Ok(self.push(Op::PatchSplit { m }, vec![x], out))
    }

    /// Reverse pass from a scalar loss. Visits every recorded entry exactly
    /// once in reverse topological order.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim("backward from non-scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.accumulate_inputs(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate_inputs(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let give = |id: NodeId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { mask, padding } => {
                let (x, kn, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xv = &self.nodes[x.0].value;
                let kv = &self.nodes[kn.0].value;
                let bv = &self.nodes[b.0].value;
                let dims = k::conv_dims(xv, kv, bv, *padding)?;
                if self.nodes[x.0].needs_grad {
                    let eff = k::effective_kernel(kv, mask.as_deref());
                    give(x, k::conv2d_backward_input(g, &eff, &dims), grads);
                }
                if self.nodes[kn.0].needs_grad {
                    give(
                        kn,
                        k::conv2d_backward_kernel(xv, g, mask.as_deref(), &dims),
                        grads,
                    );
                }
                if self.nodes[b.0].needs_grad {
                    give(b, k::conv2d_backward_bias(g, &dims), grads);
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                let xv = &self.nodes[x.0].value;
                let delta = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                        .collect(),
                )?;
                give(x, delta, grads);
            }
            Op::Add => {
                give(node.inputs[0], g.clone(), grads);
                give(node.inputs[1], g.clone(), grads);
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(bv.data())
                        .map(|(gv, y)| gv * y)
                        .collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, x)| gv * x)
                        .collect(),
                )?;
                give(a, da, grads);
                give(b, db, grads);
            }
            Op::AddScalar(_) => give(node.inputs[0], g.clone(), grads),
            Op::Scale(c) => {
                let delta = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|gv| gv * c).collect(),
                )?;
                give(node.inputs[0], delta, grads);
            }
            Op::Concat => {
                let sh = node.value.shape();
                let (b, h, w) = (sh[0], sh[2], sh[3]);
                let ctotal = sh[1];
                let plane = h * w;
                let mut coff = 0;
                for p in &node.inputs {
                    let c = self.nodes[p.0].value.shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut delta = Tensor::zeros(vec![b, c, h, w]);
                        for bi in 0..b {
                            let src_start = (bi * ctotal + coff) * plane;
                            let dst_start = bi * c * plane;
                            delta.data_mut()[dst_start..dst_start + c * plane]
                                .copy_from_slice(&g.data()[src_start..src_start + c * plane]);
                        }
                        give(*p, delta, grads);
                    }
                    coff += c;
                }
            }
            Op::Sum => {
                let x = node.inputs[0];
                let xv = &self.nodes[x.0].value;
                give(x, Tensor::filled(xv.shape().to_vec(), g.item()), grads);
            }
            Op::Xent { levels, targets } => {
                let x = node.inputs[0];
                let xv = &self.nodes[x.0].value;
                give(x, k::xent_backward(xv, *levels, targets, g), grads);
            }
            Op::BiasEmbed { indices } => {
                let (x, table) = (node.inputs[0], node.inputs[1]);
                give(x, g.clone(), grads);
                if self.nodes[table.0].needs_grad {
                    let ts = self.nodes[table.0].value.shape().to_vec();
                    let xs = self.nodes[x.0].value.shape();
                    let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut delta = Tensor::zeros(ts);
                    for bi in 0..b {
                        for ci in 0..c {
                            let start = (bi * c + ci) * plane;
                            let s: f64 = g.data()[start..start + plane].iter().sum();
                            delta.data_mut()[indices[bi] * c + ci] += s;
                        }
                    }
                    give(table, delta, grads);
                }
            }
            Op::PatchSplit { m } => {
                let x = node.inputs[0];
                let in_shape = self.nodes[x.0].value.shape().to_vec();
                give(x, k::patch_split_backward(g, *m, &in_shape), grads);
            }
        }
        Ok(())
    }
}
