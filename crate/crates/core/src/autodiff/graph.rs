//! Eager computation graph with reverse-mode differentiation.
//!
//! Every op evaluates immediately when it is recorded, so node values are
//! available as soon as the node exists and nodes are appended in
//! topological order. [`Graph::backward`] walks the tape from the loss
//! node down to the first node.

use super::optim::ParameterStore;
use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Param,
    Add,
    AddN,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    Relu,
    Sigmoid,
    Abs,
    Sum,
    Mean,
    Conv2dValid,
    SpatialMean,
    ChannelScale,
    Concat,
    Reshape,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    Add(usize, usize),
    AddN(Vec<usize>),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Conv2d(usize, usize),
    Conv2dBias(usize, usize, usize),
    SpatialMean(usize),
    ChannelScale(usize, usize),
    Concat(Vec<usize>),
    Reshape(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Add(..) => OpKind::Add,
            Op::AddN(_) => OpKind::AddN,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Abs(_) => OpKind::Abs,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Conv2d(..) | Op::Conv2dBias(..) => OpKind::Conv2dValid,
            Op::SpatialMean(_) => OpKind::SpatialMean,
            Op::ChannelScale(..) => OpKind::ChannelScale,
            Op::Concat(_) => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MatMul(a, b)
            | Op::Conv2d(a, b)
            | Op::ChannelScale(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SpatialMean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Conv2dBias(a, b, c) => vec![*a, *b, *c],
            Op::AddN(v) | Op::Concat(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Gradients of a scalar loss, one tensor per [`ParameterStore`] entry in
/// store order. Parameters the loss does not reach get zeros.
#[derive(Clone, Debug)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.tensors.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A single-threaded tape of tensor operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// (batch, spatial, channels) view of a rank-3 `[H,W,C]` or rank-4
/// `[N,H,W,C]` tensor.
fn spatial_view(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Some((1, h * w, c)),
        [n, h, w, c] => Some((n, h * w, c)),
        _ => None,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0]
            .op
            .inputs()
            .into_iter()
            .map(NodeId)
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = match op {
            Op::Input => true,
            Op::Param(_) => true,
            _ => op.inputs().iter().any(|&j| self.nodes[j].needs_grad),
        };
        self.push_node(op, value, needs_grad)
    }

    fn push_node(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input (no gradient flows to a parameter, but the node's own
    /// gradient is recorded and readable after backward).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        value.ensure_finite("input")?;
        Ok(self.push(Op::Input, value))
    }

    /// An input leaf that backward never differentiates with respect to.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        value.ensure_finite("input")?;
        Ok(self.push_node(Op::Input, value, false))
    }

    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let value = store.entry(idx).value.clone();
        value.ensure_finite(name)?;
        Ok(self.push(Op::Param(idx), value))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    /// Elementwise sum of one or more same-shaped nodes.
    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::contract("add_n needs at least one term"))?;
        for &t in &terms[1..] {
            self.same_shape("add_n", first, t)?;
        }
        let mut v = self.val(first).clone();
        for &t in &terms[1..] {
            for (o, x) in v.data_mut().iter_mut().zip(self.val(t).data()) {
                *o += x;
            }
        }
        Ok(self.push(Op::AddN(terms.iter().map(|t| t.0).collect()), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.val(a).map(|x| x * factor);
        self.push(Op::Scale(a.0, factor), v)
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let c = *tx.shape().last().unwrap();
        if tb.shape() != [c] {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut v = tx.clone();
        for row in v.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(x.0, bias.0), v))
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            &mut out,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a.0, b.0), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::abs);
        self.push(Op::Abs(a.0), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.val(a).sum());
        self.push(Op::Sum(a.0), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a.0), v)
    }

    /// Valid (unpadded) stride-1 cross-correlation.
    ///
    /// `input` is `[H,W,Cin]` or `[N,H,W,Cin]`; `kernels` is
    /// `[kh,kw,Cin,Cout]`. The output keeps the input's rank.
    pub fn conv2d_valid(&mut self, input: NodeId, kernels: NodeId) -> Result<NodeId> {
        self.conv(input, kernels, None)
    }

    /// [`Graph::conv2d_valid`] plus a per-output-channel `bias[Cout]`, fused
    /// so the feature map is written once.
    pub fn conv2d_valid_bias(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        self.conv(input, kernels, Some(bias))
    }

    fn conv(&mut self, input: NodeId, kernels: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (ti, tk) = (self.val(input), self.val(kernels));
        let geo = ConvGeometry::new(ti.shape(), tk.shape())?;
        let mut out = match bias {
            Some(b) => {
                let tb = self.val(b);
                if tb.shape() != [geo.cout] {
                    return Err(Error::shape("conv2d_valid_bias", tk.shape(), tb.shape()));
                }
                tb.data().repeat(geo.rows())
            }
            None => vec![0.0; geo.rows() * geo.cout],
        };
        let patches = geo.im2col(ti.data());
        gemm_acc(
            geo.rows(),
            geo.patch_len(),
            geo.cout,
            &patches,
            geo.patch_len() as isize,
            1,
            tk.data(),
            geo.cout as isize,
            1,
            &mut out,
        );
        let v = Tensor::new(geo.out_shape(ti.shape().len()), out)?;
        let op = match bias {
            Some(b) => Op::Conv2dBias(input.0, kernels.0, b.0),
            None => Op::Conv2d(input.0, kernels.0),
        };
        Ok(self.push(op, v))
    }

    /// Mean over the spatial extent: `[N,H,W,C] → [N,C]`, `[H,W,C] → [C]`.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.val(x);
        let (n, s, c) = spatial_view(tx.shape())
            .ok_or_else(|| Error::shape("spatial_mean", tx.shape(), &[]))?;
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let acc = &mut out[b * c..(b + 1) * c];
            for p in 0..s {
                let row = &tx.data()[(b * s + p) * c..(b * s + p + 1) * c];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= s as f64;
            }
        }
        let shape = if tx.shape().len() == 4 {
            vec![n, c]
        } else {
            vec![c]
        };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(Op::SpatialMean(x.0), v))
    }

    /// Per-channel rescale: `x[N,H,W,C] ⊙ w[N,C]` broadcast over H×W
    /// (or `x[H,W,C] ⊙ w[C]`).
    pub fn channel_scale(&mut self, x: NodeId, weights: NodeId) -> Result<NodeId> {
        let (tx, tw) = (self.val(x), self.val(weights));
        let (n, s, c) = spatial_view(tx.shape())
            .ok_or_else(|| Error::shape("channel_scale", tx.shape(), tw.shape()))?;
        let expect: &[usize] = if tx.shape().len() == 4 { &[n, c] } else { &[c] };
        if tw.shape() != expect {
            return Err(Error::shape("channel_scale", tx.shape(), tw.shape()));
        }
        let mut v = tx.clone();
        for b in 0..n {
            let w = &tw.data()[b * c..(b + 1) * c];
            for p in 0..s {
                let row = &mut v.data_mut()[(b * s + p) * c..(b * s + p + 1) * c];
                for (o, wv) in row.iter_mut().zip(w) {
                    *o *= wv;
                }
            }
        }
        Ok(self.push(Op::ChannelScale(x.0, weights.0), v))
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat needs at least one part"))?;
        let lead = {
            let s = self.val(first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.val(first).shape(), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.val(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x.0), v))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns parameter gradients in
    /// store order; gradients w.r.t. [`Graph::input`] leaves stay readable
    /// through [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId, store: &ParameterStore) -> Result<Gradients> {
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Input = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, g)?);
                continue;
            }
            self.propagate(i, g, &mut grads, &mut param_grads)?;
        }

        let tensors = store
            .iter()
            .zip(param_grads)
            .map(|(e, g)| match g {
                Some(g) => Tensor::new(e.value.shape().to_vec(), g),
                None => Ok(Tensor::zeros(e.value.shape())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { tensors })
    }

    fn propagate(
        &self,
        i: usize,
        mut g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;

        match &nodes[i].op {
            Op::Input => {}
            Op::Param(p) => give(&mut param_grads[*p], g),
            Op::Add(a, b) => {
                if wants(*b) {
                    acc(grads, nodes, *b, &g);
                }
                give_to(grads, nodes, *a, g);
            }
            Op::AddN(terms) => {
                let (last, rest) = terms.split_last().unwrap();
                for &j in rest {
                    if wants(j) {
                        acc(grads, nodes, j, &g);
                    }
                }
                give_to(grads, nodes, *last, g);
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, nodes, *a, &g);
                }
                g.iter_mut().for_each(|v| *v = -*v);
                give_to(grads, nodes, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*b) {
                    let db = slot(grads, nodes, *b);
                    acc_into(db, g.iter().zip(va).map(|(g, x)| g * x));
                }
                g.iter_mut().zip(vb).for_each(|(g, y)| *g *= y);
                give_to(grads, nodes, *a, g);
            }
            Op::Scale(a, f) => {
                g.iter_mut().for_each(|v| *v *= f);
                give_to(grads, nodes, *a, g);
            }
            Op::AddBias(x, b) => {
                if wants(*b) {
                    let c = nodes[*b].value.len();
                    let db = slot(grads, nodes, *b);
                    for row in g.chunks(c) {
                        acc_into_slice(db, row, 1.0);
                    }
                }
                give_to(grads, nodes, *x, g);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    // dA += dC · Bᵀ
                    let da = slot(grads, nodes, *a);
                    gemm_acc(m, n, k, &g, n as isize, 1, tb.data(), 1, n as isize, da);
                }
                if wants(*b) {
                    // dB += Aᵀ · dC
                    let db = slot(grads, nodes, *b);
                    gemm_acc(k, m, n, ta.data(), 1, k as isize, &g, n as isize, 1, db);
                }
            }
            Op::Relu(a) => {
                let va = nodes[*a].value.data();
                g.iter_mut().zip(va).for_each(|(g, &x)| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                give_to(grads, nodes, *a, g);
            }
            Op::Sigmoid(a) => {
                let y = nodes[i].value.data();
                g.iter_mut().zip(y).for_each(|(g, y)| *g *= y * (1.0 - y));
                give_to(grads, nodes, *a, g);
            }
            Op::Abs(a) => {
                let va = nodes[*a].value.data();
                // subgradient 0 at exact zero
                g.iter_mut().zip(va).for_each(|(g, &x)| *g *= sign(x));
                give_to(grads, nodes, *a, g);
            }
            Op::Sum(a) => {
                let da = slot(grads, nodes, *a);
                let g0 = g[0];
                da.iter_mut().for_each(|d| *d += g0);
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                let da = slot(grads, nodes, *a);
                let g0 = g[0] / n;
                da.iter_mut().for_each(|d| *d += g0);
            }
            Op::Conv2d(x, k) | Op::Conv2dBias(x, k, _) => {
                if let Op::Conv2dBias(.., b) = nodes[i].op {
                    if wants(b) {
                        let c = nodes[b].value.len();
                        let db = slot(grads, nodes, b);
                        for row in g.chunks(c) {
                            acc_into_slice(db, row, 1.0);
                        }
                    }
                }
                let (tx, tk) = (&nodes[*x].value, &nodes[*k].value);
                let geo = ConvGeometry::new(tx.shape(), tk.shape())?;
                let (rows, plen, cout) = (geo.rows(), geo.patch_len(), geo.cout);
                if wants(*k) {
                    let patches = geo.im2col(tx.data());
                    let dk = slot(grads, nodes, *k);
                    // dK += Pᵀ · dOut
                    gemm_acc(
                        plen,
                        rows,
                        cout,
                        &patches,
                        1,
                        plen as isize,
                        &g,
                        cout as isize,
                        1,
                        dk,
                    );
                }
                if wants(*x) {
                    // dP = dOut · Kᵀ
                    let mut dpatches = vec![0.0; rows * plen];
                    gemm_acc(
                        rows,
                        cout,
                        plen,
                        &g,
                        cout as isize,
                        1,
                        tk.data(),
                        1,
                        cout as isize,
                        &mut dpatches,
                    );
                    let dx = slot(grads, nodes, *x);
                    geo.col2im_acc(&dpatches, dx);
                }
            }
            Op::SpatialMean(x) => {
                let (n, s, c) = spatial_view(nodes[*x].value.shape()).unwrap();
                let dx = slot(grads, nodes, *x);
                let inv = 1.0 / s as f64;
                for b in 0..n {
                    let gb = &g[b * c..(b + 1) * c];
                    for p in 0..s {
                        let row = &mut dx[(b * s + p) * c..(b * s + p + 1) * c];
                        acc_into_slice(row, gb, inv);
                    }
                }
            }
            Op::ChannelScale(x, w) => {
                let (tx, tw) = (&nodes[*x].value, &nodes[*w].value);
                let (n, s, c) = spatial_view(tx.shape()).unwrap();
                if wants(*w) {
                    let dw = slot(grads, nodes, *w);
                    for b in 0..n {
                        for p in 0..s {
                            let r = (b * s + p) * c..(b * s + p + 1) * c;
                            let dwb = &mut dw[b * c..(b + 1) * c];
                            for ((d, gv), xv) in
                                dwb.iter_mut().zip(&g[r.clone()]).zip(&tx.data()[r])
                            {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                for b in 0..n {
                    let wb = &tw.data()[b * c..(b + 1) * c];
                    for p in 0..s {
                        let r = (b * s + p) * c..(b * s + p + 1) * c;
                        g[r].iter_mut().zip(wb).for_each(|(gv, wv)| *gv *= wv);
                    }
                }
                give_to(grads, nodes, *x, g);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *nodes[p].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if wants(p) {
                        let dp = slot(grads, nodes, p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            acc_into_slice(&mut dp[r * w..(r + 1) * w], src, 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => give_to(grads, nodes, *x, g),
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
    grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()])
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], j: usize, g: &[f64]) {
    acc_into_slice(slot(grads, nodes, j), g, 1.0);
}

/// Hand `g` to an empty slot without copying; accumulate otherwise.
fn give(dst: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match dst {
        Some(d) => acc_into_slice(d, &g, 1.0),
        None => *dst = Some(g),
    }
}

fn give_to(grads: &mut [Option<Vec<f64>>], nodes: &[Node], j: usize, g: Vec<f64>) {
    if nodes[j].needs_grad {
        give(&mut grads[j], g);
    }
}

fn acc_into(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn acc_into_slice(dst: &mut [f64], src: &[f64], factor: f64) {
    if factor == 1.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s * factor;
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize]) -> Result<Self> {
        let (n, h, w, cin) = match *input {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::shape("conv2d_valid", input, kernels)),
        };
        let [kh, kw, kc, cout] = *kernels else {
            return Err(Error::shape("conv2d_valid", input, kernels));
        };
        if kc != cin || kh > h || kw > w {
            return Err(Error::shape("conv2d_valid", input, kernels));
        }
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
        })
    }

    fn ho(&self) -> usize {
        self.h - self.kh + 1
    }

    fn wo(&self) -> usize {
        self.w - self.kw + 1
    }

    fn rows(&self) -> usize {
        self.n * self.ho() * self.wo()
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn out_shape(&self, rank: usize) -> Vec<usize> {
        if rank == 3 {
            vec![self.ho(), self.wo(), self.cout]
        } else {
            vec![self.n, self.ho(), self.wo(), self.cout]
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo, plen) = (self.ho(), self.wo(), self.patch_len());
        let mut out = vec![0.0; self.rows() * plen];
        let seg = self.kw * self.cin;
        for b in 0..self.n {
            for y in 0..ho {
                for xo in 0..wo {
                    let r = (b * ho + y) * wo + xo;
                    let dst = &mut out[r * plen..(r + 1) * plen];
                    for dy in 0..self.kh {
                        let src = ((b * self.h + y + dy) * self.w + xo) * self.cin;
                        dst[dy * seg..(dy + 1) * seg].copy_from_slice(&x[src..src + seg]);
                    }
                }
            }
        }
        out
    }

    fn col2im_acc(&self, dpatches: &[f64], dx: &mut [f64]) {
        let (ho, wo, plen) = (self.ho(), self.wo(), self.patch_len());
        let seg = self.kw * self.cin;
        for b in 0..self.n {
            for y in 0..ho {
                for xo in 0..wo {
                    let r = (b * ho + y) * wo + xo;
                    let src = &dpatches[r * plen..(r + 1) * plen];
                    for dy in 0..self.kh {
                        let d = ((b * self.h + y + dy) * self.w + xo) * self.cin;
                        acc_into_slice(&mut dx[d..d + seg], &src[dy * seg..(dy + 1) * seg], 1.0);
                    }
                }
            }
        }
    }
}
