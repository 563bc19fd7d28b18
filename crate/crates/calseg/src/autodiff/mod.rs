//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is an append-only tape of operations. Every op validates its
//! input shapes, computes its value eagerly, and (while the graph is
//! recording) appends a node remembering the op and its inputs.
//! [`Graph::backward`] walks the tape from a scalar root and produces
//! gradients for the requested tensors.
//!
//! The distinguishing feature is `create_graph`: when set, the backward pass
//! expresses every vector-Jacobian product through the same public op
//! vocabulary and records those ops onto the same tape. The returned
//! gradients are then ordinary graph tensors, so penalties built from
//! gradient norms can themselves be differentiated by a second `backward`
//! call. The op set is closed under this construction to any order.
//!
//! Evaluation is eager, sequential, and allocation-order deterministic: the
//! same recorded graph re-evaluates to bit-identical buffers (see
//! [`Graph::replay_all`]).

pub mod conv;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifier of a node within one graph's tape.
pub type NodeId = usize;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Reference from a tensor back into the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NodeRef {
    graph: u64,
    id: NodeId,
}

/// Immutable n-dimensional `f64` array. Cloning is cheap: the buffer is
/// shared. A tensor optionally points at the graph node that produced it;
/// tensors without a node are constants and receive no gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Constant tensor from a flat buffer. The buffer length must equal the
    /// product of `shape` (an empty shape is a scalar of length one).
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("buffer of length {} does not fill shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data: data.into(), node: None })
    }

    /// Scalar constant (shape `[]`).
    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![v].into(), node: None }
    }

    /// All-zero constant of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel].into(), node: None }
    }

    /// All-ones constant of the given shape.
    pub fn ones(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![1.0; numel].into(), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape is {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Copy of this tensor with its graph history severed. The values are
    /// shared; gradients will not flow through the detached copy.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    /// Whether this tensor participates in a graph.
    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// Tape position of this tensor in its graph, if any.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|n| n.id)
    }
}

/// Stride/padding pair for the convolution ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

/// Operation vocabulary. Every variant has a vector-Jacobian product
/// expressible with ops from this same list, which is what makes recorded
/// backward passes differentiable again.
#[derive(Debug, Clone)]
enum Op {
    /// Entry point for data: either an explicit leaf or a constant input
    /// promoted when an op recorded it.
    Leaf,
    Add,
    Sub,
    Mul,
    /// `a * x + b` with scalar constants.
    Affine { a: f64, b: f64 },
    /// `x^e` with a scalar constant exponent.
    PowScalar { e: f64 },
    /// Clamp into `[lo, hi]`; gradient passes inside the closed interval.
    Clamp { lo: f64, hi: f64 },
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    /// 2D matrix product `[m,k] x [k,n]`.
    MatMul,
    /// 2D transpose.
    Transpose,
    /// `conv3d(x, w)` with inputs `[ci,n0,n1,n2]` and `[co,ci,k0,k1,k2]`.
    Conv3d { spec: ConvSpec },
    /// Adjoint of `Conv3d` w.r.t. its input; inputs are `(gy, w)`.
    Conv3dInputGrad { spec: ConvSpec },
    /// Adjoint of `Conv3d` w.r.t. its weights; inputs are `(x, gy)`.
    Conv3dWeightGrad { spec: ConvSpec },
    /// Full reduction to a scalar of shape `[]`.
    Sum,
    /// Reduction onto a same-rank shape whose axes are either equal or 1.
    SumTo,
    /// Expansion from a same-rank shape whose axes are either equal or 1.
    Broadcast,
    /// Same data, new shape with identical element count.
    Reshape,
    /// Rectangular window copy.
    Slice { start: Vec<usize> },
    /// Adjoint of `Slice`: embed a window into a zero tensor.
    SliceScatter { start: Vec<usize> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Arc<[f64]>,
}

/// Append-only operation tape plus the recording switch.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph: ops append nodes and `backward` works.
    pub fn new() -> Graph {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Non-recording graph: the same op API, but every result is a constant
    /// and no tape is kept. Used for inference where gradients are never
    /// needed and tape bookkeeping would be wasted work.
    pub fn inference() -> Graph {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), recording: false }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Register `data` as an explicit leaf. Leaves are the only tensors the
    /// Fisher penalty accepts as differentiation targets for features.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        let id = self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone());
        Ok(Tensor { node: Some(NodeRef { graph: self.id, id }), ..t })
    }

    /// Re-register an existing tensor's values as a fresh leaf of this
    /// graph, severing any prior history.
    pub fn leaf_from(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone());
        Tensor { shape: t.shape.clone(), data: t.data.clone(), node: Some(NodeRef { graph: self.id, id }) }
    }

    /// True when the node at `id` is a leaf of this graph.
    pub fn is_leaf(&self, t: &Tensor) -> bool {
        match t.node {
            Some(r) if r.graph == self.id => matches!(self.nodes[r.id].op, Op::Leaf),
            _ => false,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Arc<[f64]>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, shape, value });
        id
    }

    /// Resolve a tensor to a node id of this graph, promoting constants to
    /// leaves. Errors when the tensor belongs to another graph.
    fn ensure_node(&mut self, t: &Tensor) -> Result<NodeId> {
        match t.node {
            Some(r) => {
                if r.graph != self.id {
                    return Err(Error::GraphMismatch);
                }
                Ok(r.id)
            }
            None => Ok(self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone())),
        }
    }

    fn check_same_graph(&self, ts: &[&Tensor]) -> Result<()> {
        for t in ts {
            if let Some(r) = t.node {
                if r.graph != self.id {
                    return Err(Error::GraphMismatch);
                }
            }
        }
        Ok(())
    }

    /// Record the op (when recording) and wrap the computed buffer.
    fn finish(&mut self, op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let data: Arc<[f64]> = data.into();
        if self.recording {
            let mut ids = Vec::with_capacity(inputs.len());
            for t in inputs {
                ids.push(self.ensure_node(t)?);
            }
            let id = self.push(op, ids, shape.clone(), data.clone());
            Ok(Tensor { shape, data, node: Some(NodeRef { graph: self.id, id }) })
        } else {
            self.check_same_graph(inputs)?;
            Ok(Tensor { shape, data, node: None })
        }
    }

    fn binary_elementwise(&mut self, name: &'static str, op: Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::shape(name, format!("shapes {:?} and {:?} differ", a.shape, b.shape)));
        }
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        self.finish(op, &[a, b], a.shape.clone(), data)
    }

    fn unary_elementwise(&mut self, op: Op, t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = t.data.iter().map(|&x| f(x)).collect();
        self.finish(op, &[t], t.shape.clone(), data)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("add", Op::Add, a, b, |x, y| x + y)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("sub", Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("mul", Op::Mul, a, b, |x, y| x * y)
    }

    /// Elementwise quotient, composed as `a * b^-1` so its derivative needs
    /// no dedicated rule.
    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::shape("div", format!("shapes {:?} and {:?} differ", a.shape, b.shape)));
        }
        let inv = self.powf(b, -1.0)?;
        self.mul(a, &inv)
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&mut self, t: &Tensor, a: f64, b: f64) -> Result<Tensor> {
        self.unary_elementwise(Op::Affine { a, b }, t, |x| a * x + b)
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, t: &Tensor, a: f64) -> Result<Tensor> {
        self.affine(t, a, 0.0)
    }

    /// Add a scalar constant.
    pub fn add_scalar(&mut self, t: &Tensor, b: f64) -> Result<Tensor> {
        self.affine(t, 1.0, b)
    }

    /// Negate.
    pub fn neg(&mut self, t: &Tensor) -> Result<Tensor> {
        self.affine(t, -1.0, 0.0)
    }

    /// Elementwise power with a constant exponent. Fractional exponents on
    /// negative bases produce NaN, as with `f64::powf`.
    pub fn powf(&mut self, t: &Tensor, e: f64) -> Result<Tensor> {
        self.unary_elementwise(Op::PowScalar { e }, t, |x| x.powf(e))
    }

    /// Clamp into `[lo, hi]`. The gradient passes through wherever the input
    /// lies inside the closed interval and is zero outside.
    pub fn clamp(&mut self, t: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds [{lo}, {hi}] are inverted")));
        }
        self.unary_elementwise(Op::Clamp { lo, hi }, t, |x| x.clamp(lo, hi))
    }

    pub fn relu(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary_elementwise(Op::Relu, t, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary_elementwise(Op::Sigmoid, t, sigmoid_stable)
    }

    /// `ln(1 + e^x)`, evaluated in a form that never overflows.
    pub fn softplus(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary_elementwise(Op::Softplus, t, softplus_stable)
    }

    pub fn exp(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary_elementwise(Op::Exp, t, f64::exp)
    }

    /// Natural log. The domain is the caller's responsibility; inputs are
    /// typically clamped away from zero first.
    pub fn log(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary_elementwise(Op::Log, t, f64::ln)
    }

    /// 2D matrix product.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (asp, bsp) = (&a.shape, &b.shape);
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {asp:?} by {bsp:?}")));
        }
        let (m, k, n) = (asp[0], asp[1], bsp[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data[i * k + p] * b.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        self.finish(Op::MatMul, &[a, b], vec![m, n], out)
    }

    /// 2D transpose.
    pub fn transpose(&mut self, t: &Tensor) -> Result<Tensor> {
        if t.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", t.shape)));
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        self.finish(Op::Transpose, &[t], vec![n, m], out)
    }

    /// 3D convolution of `x: [ci,n0,n1,n2]` with `w: [co,ci,k0,k1,k2]`,
    /// zero padding on every spatial axis.
    pub fn conv3d(&mut self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (xs, ws) = conv_shapes("conv3d", x, w)?;
        let os = conv::out_shape(&xs, &ws, stride, pad).ok_or_else(|| {
            Error::shape("conv3d", format!("kernel {ws:?} stride {stride} pad {pad} does not fit input {xs:?}"))
        })?;
        let data = conv::forward(&x.data, &xs, &w.data, &ws, stride, pad);
        self.finish(Op::Conv3d { spec: ConvSpec { stride, pad } }, &[x, w], os.to_vec(), data)
    }

    /// Adjoint of [`Graph::conv3d`] with respect to its input. `gy` must
    /// have the output shape that `x_shape` and `w` produce.
    pub fn conv3d_input_grad(&mut self, gy: &Tensor, w: &Tensor, stride: usize, pad: usize, x_shape: [usize; 4]) -> Result<Tensor> {
        let ws = rank5("conv3d_input_grad", w)?;
        let os = conv::out_shape(&x_shape, &ws, stride, pad).ok_or_else(|| {
            Error::shape("conv3d_input_grad", format!("kernel {ws:?} does not fit input {x_shape:?}"))
        })?;
        if gy.shape != os {
            return Err(Error::shape(
                "conv3d_input_grad",
                format!("cotangent shape {:?} does not match conv output {os:?}", gy.shape),
            ));
        }
        let data = conv::input_grad(&gy.data, &w.data, &ws, stride, pad, &x_shape);
        self.finish(Op::Conv3dInputGrad { spec: ConvSpec { stride, pad } }, &[gy, w], x_shape.to_vec(), data)
    }

    /// Adjoint of [`Graph::conv3d`] with respect to its weights.
    pub fn conv3d_weight_grad(&mut self, x: &Tensor, gy: &Tensor, stride: usize, pad: usize, w_shape: [usize; 5]) -> Result<Tensor> {
        let xs = rank4("conv3d_weight_grad", x)?;
        let os = conv::out_shape(&xs, &w_shape, stride, pad).ok_or_else(|| {
            Error::shape("conv3d_weight_grad", format!("kernel {w_shape:?} does not fit input {xs:?}"))
        })?;
        if gy.shape != os {
            return Err(Error::shape(
                "conv3d_weight_grad",
                format!("cotangent shape {:?} does not match conv output {os:?}", gy.shape),
            ));
        }
        let data = conv::weight_grad(&x.data, &xs, &gy.data, &w_shape, stride, pad);
        self.finish(Op::Conv3dWeightGrad { spec: ConvSpec { stride, pad } }, &[x, gy], w_shape.to_vec(), data)
    }

    /// Reduce all elements to a scalar of shape `[]`.
    pub fn sum(&mut self, t: &Tensor) -> Result<Tensor> {
        let total = t.data.iter().fold(0.0, |acc, &x| acc + x);
        self.finish(Op::Sum, &[t], vec![], vec![total])
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, t: &Tensor) -> Result<Tensor> {
        let n = t.numel();
        if n == 0 {
            return Err(Error::shape("mean", "cannot average an empty tensor".to_string()));
        }
        let s = self.sum(t)?;
        self.scale(&s, 1.0 / n as f64)
    }

    /// Sum of squared elements, composed as `sum(t * t)`.
    pub fn norm_sq(&mut self, t: &Tensor) -> Result<Tensor> {
        let sq = self.mul(t, t)?;
        self.sum(&sq)
    }

    /// Reduce onto `target`, which must have the same rank with every axis
    /// either equal to the input's or 1 (those axes are summed out).
    pub fn sum_to(&mut self, t: &Tensor, target: Vec<usize>) -> Result<Tensor> {
        check_expand_pair("sum_to", &target, &t.shape)?;
        let data = sum_to_buffer(&t.data, &t.shape, &target);
        self.finish(Op::SumTo, &[t], target, data)
    }

    /// Expand onto `target`, which must have the same rank with every axis
    /// either equal to the input's or expanded from 1.
    pub fn broadcast(&mut self, t: &Tensor, target: Vec<usize>) -> Result<Tensor> {
        check_expand_pair("broadcast", &t.shape, &target)?;
        let data = broadcast_buffer(&t.data, &t.shape, &target);
        self.finish(Op::Broadcast, &[t], target, data)
    }

    /// Same elements, new shape; element counts must agree.
    pub fn reshape(&mut self, t: &Tensor, target: Vec<usize>) -> Result<Tensor> {
        let numel: usize = target.iter().product();
        if numel != t.numel() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {target:?}", t.shape)));
        }
        let data = t.data.to_vec();
        self.finish(Op::Reshape, &[t], target, data)
    }

    /// Copy the rectangular window `start .. start + size`.
    pub fn slice(&mut self, t: &Tensor, start: &[usize], size: &[usize]) -> Result<Tensor> {
        check_window("slice", &t.shape, start, size)?;
        let data = slice_buffer(&t.data, &t.shape, start, size);
        self.finish(Op::Slice { start: start.to_vec() }, &[t], size.to_vec(), data)
    }

    /// Embed `t` into a zero tensor of shape `full` at offset `start`.
    /// Adjoint of [`Graph::slice`].
    pub fn slice_scatter(&mut self, t: &Tensor, start: &[usize], full: &[usize]) -> Result<Tensor> {
        check_window("slice_scatter", full, start, &t.shape)?;
        let data = scatter_buffer(&t.data, &t.shape, start, full);
        self.finish(Op::SliceScatter { start: start.to_vec() }, &[t], full.to_vec(), data)
    }

    /// Wrap a node back into a tensor handle.
    fn tensor_for(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            node: Some(NodeRef { graph: self.id, id }),
        }
    }

    /// Reverse-mode gradients of a scalar `root` with respect to each tensor
    /// in `wrt`, returned in the same order.
    ///
    /// Tensors in `wrt` that are constants or unreachable from `root` get
    /// zero gradients. With `create_graph`, the backward computation itself
    /// is recorded so the returned gradients can be differentiated again.
    ///
    /// Only the subgraph between `root` and the requested tensors is
    /// propagated; everything else is skipped.
    pub fn backward(&mut self, root: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot { shape: root.shape.clone() });
        }
        self.check_same_graph(&[root])?;
        self.check_same_graph(wrt)?;

        let root_id = match root.node {
            Some(r) => r.id,
            // A constant root depends on nothing.
            None => return Ok(wrt.iter().map(|t| Tensor::zeros(t.shape.clone())).collect()),
        };

        // Relevance sweep: a node is relevant if some requested tensor is an
        // ancestor of it. Gradients only need to flow through relevant nodes.
        let mut relevant = vec![false; root_id + 1];
        for t in wrt {
            if let Some(r) = t.node {
                if r.id <= root_id {
                    relevant[r.id] = true;
                }
            }
        }
        for id in 0..=root_id {
            if !relevant[id] {
                let inputs = &self.nodes[id].inputs;
                if inputs.iter().any(|&i| relevant[i]) {
                    relevant[id] = true;
                }
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..=root_id).map(|_| None).collect();
        let seed = if root.shape.is_empty() {
            Tensor::scalar(1.0)
        } else {
            Tensor::ones(root.shape.clone())
        };
        grads[root_id] = Some(seed);

        let saved = self.recording;
        self.recording = create_graph;
        let outcome = self.propagate(root_id, &relevant, &mut grads);
        self.recording = saved;
        outcome?;

        let mut result = Vec::with_capacity(wrt.len());
        for t in wrt {
            let g = t
                .node
                .and_then(|r| if r.id <= root_id { grads[r.id].clone() } else { None })
                .unwrap_or_else(|| Tensor::zeros(t.shape.clone()));
            result.push(g);
        }
        Ok(result)
    }

    fn propagate(&mut self, root_id: NodeId, relevant: &[bool], grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        for id in (0..=root_id).rev() {
            if !relevant[id] {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let want: Vec<bool> = inputs.iter().map(|&i| relevant[i]).collect();
            let contribs = self.vjp(id, &op, &inputs, &g, &want)?;
            for (slot, contrib) in inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    let next = match grads[*slot].take() {
                        None => c,
                        Some(prev) => self.add(&prev, &c)?,
                    };
                    grads[*slot] = Some(next);
                }
            }
        }
        Ok(())
    }

    /// Per-input cotangent contributions for one node. `want[i]` is false
    /// when input `i` leads to no requested tensor; its contribution is
    /// skipped entirely.
    fn vjp(&mut self, id: NodeId, op: &Op, inputs: &[NodeId], g: &Tensor, want: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
        match op {
            Op::Leaf => {}
            Op::Add => {
                if want[0] {
                    out[0] = Some(g.clone());
                }
                if want[1] {
                    out[1] = Some(g.clone());
                }
            }
            Op::Sub => {
                if want[0] {
                    out[0] = Some(g.clone());
                }
                if want[1] {
                    out[1] = Some(self.neg(g)?);
                }
            }
            Op::Mul => {
                let (a, b) = (self.tensor_for(inputs[0]), self.tensor_for(inputs[1]));
                if want[0] {
                    out[0] = Some(self.mul(g, &b)?);
                }
                if want[1] {
                    out[1] = Some(self.mul(g, &a)?);
                }
            }
            Op::Affine { a, .. } => {
                if want[0] {
                    out[0] = Some(self.scale(g, *a)?);
                }
            }
            Op::PowScalar { e } => {
                // d(x^e)/dx = e * x^(e-1); an exponent of zero contributes
                // nothing.
                if want[0] && *e != 0.0 {
                    let x = self.tensor_for(inputs[0]);
                    let p = self.powf(&x, e - 1.0)?;
                    let gp = self.mul(g, &p)?;
                    out[0] = Some(self.scale(&gp, *e)?);
                }
            }
            Op::Clamp { lo, hi } => {
                if want[0] {
                    let x = self.tensor_for(inputs[0]);
                    let mask: Vec<f64> = x.data.iter().map(|&v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 }).collect();
                    let mask = Tensor::new(mask, x.shape.clone())?;
                    out[0] = Some(self.mul(g, &mask)?);
                }
            }
            Op::Relu => {
                if want[0] {
                    let x = self.tensor_for(inputs[0]);
                    let mask: Vec<f64> = x.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                    let mask = Tensor::new(mask, x.shape.clone())?;
                    out[0] = Some(self.mul(g, &mask)?);
                }
            }
            Op::Sigmoid => {
                if want[0] {
                    // y' = y * (1 - y), rebuilt from the recorded output so
                    // second derivatives stay available.
                    let y = self.tensor_for(id);
                    let one_minus = self.affine(&y, -1.0, 1.0)?;
                    let dy = self.mul(&y, &one_minus)?;
                    out[0] = Some(self.mul(g, &dy)?);
                }
            }
            Op::Softplus => {
                if want[0] {
                    let x = self.tensor_for(inputs[0]);
                    let s = self.sigmoid(&x)?;
                    out[0] = Some(self.mul(g, &s)?);
                }
            }
            Op::Exp => {
                if want[0] {
                    let y = self.tensor_for(id);
                    out[0] = Some(self.mul(g, &y)?);
                }
            }
            Op::Log => {
                if want[0] {
                    let x = self.tensor_for(inputs[0]);
                    let inv = self.powf(&x, -1.0)?;
                    out[0] = Some(self.mul(g, &inv)?);
                }
            }
            Op::MatMul => {
                let (a, b) = (self.tensor_for(inputs[0]), self.tensor_for(inputs[1]));
                if want[0] {
                    let bt = self.transpose(&b)?;
                    out[0] = Some(self.matmul(g, &bt)?);
                }
                if want[1] {
                    let at = self.transpose(&a)?;
                    out[1] = Some(self.matmul(&at, g)?);
                }
            }
            Op::Transpose => {
                if want[0] {
                    out[0] = Some(self.transpose(g)?);
                }
            }
            Op::Conv3d { spec } => {
                let (x, w) = (self.tensor_for(inputs[0]), self.tensor_for(inputs[1]));
                if want[0] {
                    let xs = rank4("conv3d backward", &x)?;
                    out[0] = Some(self.conv3d_input_grad(g, &w, spec.stride, spec.pad, xs)?);
                }
                if want[1] {
                    let ws = rank5("conv3d backward", &w)?;
                    out[1] = Some(self.conv3d_weight_grad(&x, g, spec.stride, spec.pad, ws)?);
                }
            }
            Op::Conv3dInputGrad { spec } => {
                // Output of this node is x-shaped, so the upstream cotangent
                // g is x-shaped; inputs are (gy, w).
                let (gy, w) = (self.tensor_for(inputs[0]), self.tensor_for(inputs[1]));
                if want[0] {
                    out[0] = Some(self.conv3d(g, &w, spec.stride, spec.pad)?);
                }
                if want[1] {
                    let ws = rank5("conv3d_input_grad backward", &w)?;
                    out[1] = Some(self.conv3d_weight_grad(g, &gy, spec.stride, spec.pad, ws)?);
                }
            }
            Op::Conv3dWeightGrad { spec } => {
                // Output of this node is w-shaped, so g is w-shaped; inputs
                // are (x, gy).
                let (x, gy) = (self.tensor_for(inputs[0]), self.tensor_for(inputs[1]));
                if want[0] {
                    let xs = rank4("conv3d_weight_grad backward", &x)?;
                    out[0] = Some(self.conv3d_input_grad(&gy, g, spec.stride, spec.pad, xs)?);
                }
                if want[1] {
                    out[1] = Some(self.conv3d(&x, g, spec.stride, spec.pad)?);
                }
            }
            Op::Sum => {
                if want[0] {
                    let in_shape = self.nodes[inputs[0]].shape.clone();
                    let gg = self.reshape(g, vec![1; in_shape.len()])?;
                    out[0] = Some(self.broadcast(&gg, in_shape)?);
                }
            }
            Op::SumTo => {
                if want[0] {
                    let in_shape = self.nodes[inputs[0]].shape.clone();
                    out[0] = Some(self.broadcast(g, in_shape)?);
                }
            }
            Op::Broadcast => {
                if want[0] {
                    let in_shape = self.nodes[inputs[0]].shape.clone();
                    out[0] = Some(self.sum_to(g, in_shape)?);
                }
            }
            Op::Reshape => {
                if want[0] {
                    let in_shape = self.nodes[inputs[0]].shape.clone();
                    out[0] = Some(self.reshape(g, in_shape)?);
                }
            }
            Op::Slice { start } => {
                if want[0] {
                    let in_shape = self.nodes[inputs[0]].shape.clone();
                    out[0] = Some(self.slice_scatter(g, start, &in_shape)?);
                }
            }
            Op::SliceScatter { start } => {
                if want[0] {
                    let in_size = self.nodes[inputs[0]].shape.clone();
                    out[0] = Some(self.slice(g, start, &in_size)?);
                }
            }
        }
        Ok(out)
    }

    /// Recompute every node's value from the recorded leaves, in tape
    /// order, and return the buffers. Two replays of the same graph are
    /// bit-identical; callers use this to assert evaluation determinism.
    pub fn replay_all(&self) -> Vec<Arc<[f64]>> {
        let mut values: Vec<Arc<[f64]>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let data: Arc<[f64]> = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let ins: Vec<(&[f64], &[usize])> = node
                        .inputs
                        .iter()
                        .map(|&i| (values[i].as_ref(), self.nodes[i].shape.as_slice()))
                        .collect();
                    eval_kernel(op, &ins, &node.shape).into()
                }
            };
            values.push(data);
        }
        values
    }

    /// Stored value buffer of a node, for replay comparisons.
    pub fn node_value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }
}

/// Pure evaluation of one op from input buffers. Shared by the op methods'
/// replay path; kept free of graph state so determinism is easy to audit.
fn eval_kernel(op: &Op, ins: &[(&[f64], &[usize])], out_shape: &[usize]) -> Vec<f64> {
    match op {
        Op::Leaf => unreachable!("leaves hold stored values"),
        Op::Add => ins[0].0.iter().zip(ins[1].0).map(|(&a, &b)| a + b).collect(),
        Op::Sub => ins[0].0.iter().zip(ins[1].0).map(|(&a, &b)| a - b).collect(),
        Op::Mul => ins[0].0.iter().zip(ins[1].0).map(|(&a, &b)| a * b).collect(),
        Op::Affine { a, b } => ins[0].0.iter().map(|&x| a * x + b).collect(),
        Op::PowScalar { e } => ins[0].0.iter().map(|&x| x.powf(*e)).collect(),
        Op::Clamp { lo, hi } => ins[0].0.iter().map(|&x| x.clamp(*lo, *hi)).collect(),
        Op::Relu => ins[0].0.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        Op::Sigmoid => ins[0].0.iter().map(|&x| sigmoid_stable(x)).collect(),
        Op::Softplus => ins[0].0.iter().map(|&x| softplus_stable(x)).collect(),
        Op::Exp => ins[0].0.iter().map(|&x| x.exp()).collect(),
        Op::Log => ins[0].0.iter().map(|&x| x.ln()).collect(),
        Op::MatMul => {
            let (a, asp) = ins[0];
            let (b, bsp) = ins[1];
            let (m, k, n) = (asp[0], asp[1], bsp[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p] * b[p * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
            out
        }
        Op::Transpose => {
            let (t, tsp) = ins[0];
            let (m, n) = (tsp[0], tsp[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = t[i * n + j];
                }
            }
            out
        }
        Op::Conv3d { spec } => {
            let xs = to4(ins[0].1);
            let ws = to5(ins[1].1);
            conv::forward(ins[0].0, &xs, ins[1].0, &ws, spec.stride, spec.pad)
        }
        Op::Conv3dInputGrad { spec } => {
            let ws = to5(ins[1].1);
            let xs = to4(out_shape);
            conv::input_grad(ins[0].0, ins[1].0, &ws, spec.stride, spec.pad, &xs)
        }
        Op::Conv3dWeightGrad { spec } => {
            let xs = to4(ins[0].1);
            let ws = to5(out_shape);
            conv::weight_grad(ins[0].0, &xs, ins[1].0, &ws, spec.stride, spec.pad)
        }
        Op::Sum => vec![ins[0].0.iter().fold(0.0, |acc, &x| acc + x)],
        Op::SumTo => sum_to_buffer(ins[0].0, ins[0].1, out_shape),
        Op::Broadcast => broadcast_buffer(ins[0].0, ins[0].1, out_shape),
        Op::Reshape => ins[0].0.to_vec(),
        Op::Slice { start } => slice_buffer(ins[0].0, ins[0].1, start, out_shape),
        Op::SliceScatter { start } => scatter_buffer(ins[0].0, ins[0].1, start, out_shape),
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape(op, format!("expected rank 4 input, got {:?}", t.shape())))
}

fn rank5(op: &'static str, t: &Tensor) -> Result<[usize; 5]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape(op, format!("expected rank 5 weights, got {:?}", t.shape())))
}

fn conv_shapes(op: &'static str, x: &Tensor, w: &Tensor) -> Result<([usize; 4], [usize; 5])> {
    let xs = rank4(op, x)?;
    let ws = rank5(op, w)?;
    if xs[0] != ws[1] {
        return Err(Error::shape(
            op,
            format!("input channels {} do not match weight channels {}", xs[0], ws[1]),
        ));
    }
    Ok((xs, ws))
}

fn to4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

fn to5(s: &[usize]) -> [usize; 5] {
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Validate that `small` expands to `big`: same rank, every axis equal or 1
/// on the small side.
fn check_expand_pair(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.len() == big.len()
        && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, format!("shape {small:?} does not expand to {big:?}")))
    }
}

fn check_window(op: &'static str, full: &[usize], start: &[usize], size: &[usize]) -> Result<()> {
    let ok = full.len() == start.len()
        && full.len() == size.len()
        && full
            .iter()
            .zip(start.iter().zip(size))
            .all(|(&f, (&st, &sz))| sz >= 1 && st + sz <= f);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("window start {start:?} size {size:?} does not fit shape {full:?}"),
        ))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_buffer(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let numel: usize = to.iter().product();
    let fs = strides(from);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; to.len()];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        for (axis, &dim) in to.iter().enumerate().rev() {
            coords[axis] = rem % dim;
            rem /= dim;
        }
        let mut src = 0;
        for (axis, &c) in coords.iter().enumerate() {
            if from[axis] != 1 {
                src += c * fs[axis];
            }
        }
        *slot = data[src];
    }
    out
}

fn sum_to_buffer(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let numel: usize = to.iter().product();
    let ts = strides(to);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; from.len()];
    for (lin, &v) in data.iter().enumerate() {
        let mut rem = lin;
        for (axis, &dim) in from.iter().enumerate().rev() {
            coords[axis] = rem % dim;
            rem /= dim;
        }
        let mut dst = 0;
        for (axis, &c) in coords.iter().enumerate() {
            if to[axis] != 1 {
                dst += c * ts[axis];
            }
        }
        out[dst] += v;
    }
    out
}

fn slice_buffer(data: &[f64], full: &[usize], start: &[usize], size: &[usize]) -> Vec<f64> {
    let numel: usize = size.iter().product();
    let fs = strides(full);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; size.len()];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        for (axis, &dim) in size.iter().enumerate().rev() {
            coords[axis] = rem % dim;
            rem /= dim;
        }
        let src: usize = coords
            .iter()
            .enumerate()
            .map(|(axis, &c)| (c + start[axis]) * fs[axis])
            .sum();
        *slot = data[src];
    }
    out
}

fn scatter_buffer(data: &[f64], size: &[usize], start: &[usize], full: &[usize]) -> Vec<f64> {
    let numel: usize = full.iter().product();
    let fs = strides(full);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; size.len()];
    for (lin, &v) in data.iter().enumerate() {
        let mut rem = lin;
        for (axis, &dim) in size.iter().enumerate().rev() {
            coords[axis] = rem % dim;
            rem /= dim;
        }
        let dst: usize = coords
            .iter()
            .enumerate()
            .map(|(axis, &c)| (c + start[axis]) * fs[axis])
            .sum();
        out[dst] = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        g.leaf(data, shape).expect("leaf")
    }

    #[test]
    fn add_rejects_mismatched_shapes_with_both_named() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![1.0, 2.0], vec![2]);
        let b = leaf(&mut g, vec![1.0, 2.0, 3.0], vec![3]);
        let err = g.add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "unhelpful message: {msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![1.0, 2.0], vec![2]);
        let err = g.backward(&a, &[&a], false).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot { .. }));
    }

    #[test]
    fn backward_of_simple_chain() {
        // f(x) = sum(3 * x + 1), df/dx = 3 everywhere.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0, -2.0, 0.5], vec![3]);
        let y = g.affine(&x, 3.0, 1.0).unwrap();
        let s = g.sum(&y).unwrap();
        let grads = g.backward(&s, &[&x], false).unwrap();
        assert_eq!(grads[0].data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn unreachable_tensor_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2.0], vec![1]);
        let unused = leaf(&mut g, vec![5.0], vec![1]);
        let s = g.sum(&x).unwrap();
        let grads = g.backward(&s, &[&unused], false).unwrap();
        assert_eq!(grads[0].data(), &[0.0]);
    }

    #[test]
    fn detached_tensor_blocks_gradient_flow() {
        // f = sum(x * detach(x)): treating the detached factor as constant
        // gives df/dx = detach(x) = x, not 2x.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3.0], vec![1]);
        let d = x.detach();
        assert!(d.is_constant());
        let y = g.mul(&x, &d).unwrap();
        let s = g.sum(&y).unwrap();
        let grads = g.backward(&s, &[&x], false).unwrap();
        assert_eq!(grads[0].data(), &[3.0]);
    }

    #[test]
    fn second_order_through_gradient_norm() {
        // y = sum(x^3) with x = [1], first gradient 3x^2 = 3.
        // r = ||grad||^2 = 9x^4, dr/dx = 36x^3 = 36.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0], vec![1]);
        let x3 = g.powf(&x, 3.0).unwrap();
        let y = g.sum(&x3).unwrap();
        let first = g.backward(&y, &[&x], true).unwrap();
        assert!((first[0].data()[0] - 3.0).abs() < 1e-12);
        let r = g.norm_sq(&first[0]).unwrap();
        assert!((r.item().unwrap() - 9.0).abs() < 1e-12);
        let second = g.backward(&r, &[&x], false).unwrap();
        assert!((second[0].data()[0] - 36.0).abs() < 1e-12);
    }

    #[test]
    fn cross_graph_tensors_are_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let a = leaf(&mut g1, vec![1.0], vec![1]);
        let b = leaf(&mut g2, vec![1.0], vec![1]);
        let err = g2.add(&a, &b).unwrap_err();
        assert!(matches!(err, Error::GraphMismatch));
    }

    #[test]
    fn inference_graph_produces_constants() {
        let mut g = Graph::inference();
        let a = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap();
        let y = g.relu(&a).unwrap();
        assert!(y.is_constant());
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![0.3, -1.7, 2.9, 0.0], vec![4]);
        let a = g.sigmoid(&x).unwrap();
        let b = g.softplus(&a).unwrap();
        let c = g.mul(&a, &b).unwrap();
        let s = g.sum(&c).unwrap();
        let _ = g.backward(&s, &[&x], true).unwrap();
        let replayed = g.replay_all();
        for id in 0..g.node_count() {
            let stored = g.node_value(id);
            let again = &replayed[id];
            assert_eq!(stored.len(), again.len());
            for (s, r) in stored.iter().zip(again.iter()) {
                assert_eq!(s.to_bits(), r.to_bits(), "node {id} drifted between evaluations");
            }
        }
    }

    #[test]
    fn broadcast_and_sum_to_round_trip() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0, 2.0], vec![2, 1]);
        let b = g.broadcast(&x, vec![2, 3]).unwrap();
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let back = g.sum_to(&b, vec![2, 1]).unwrap();
        assert_eq!(back.data(), &[3.0, 6.0]);
    }

    #[test]
    fn slice_and_scatter_are_adjoint_shapes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, (0..12).map(|v| v as f64).collect(), vec![3, 4]);
        let s = g.slice(&x, &[1, 1], &[2, 2]).unwrap();
        assert_eq!(s.data(), &[5.0, 6.0, 9.0, 10.0]);
        let sc = g.slice_scatter(&s, &[1, 1], &[3, 4]).unwrap();
        assert_eq!(sc.data()[5], 5.0);
        assert_eq!(sc.data()[0], 0.0);
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = leaf(&mut g, vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]);
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gradient_accumulates_across_shared_use() {
        // f = sum(x * x) = sum(x^2) via two uses of the same tensor.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2.0, -3.0], vec![2]);
        let y = g.norm_sq(&x).unwrap();
        let grads = g.backward(&y, &[&x], false).unwrap();
        assert_eq!(grads[0].data(), &[4.0, -6.0]);
    }
}
