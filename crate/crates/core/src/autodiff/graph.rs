use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::{AutodiffError, Tensor};
use crate::lambert_w::{lambert_w, lambert_w_derivative, lambert_w_pade_derivative, Evaluation, WDomainPoint};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous `(start, len)` ranges over a flat vector.
pub type Segments = Arc<[(usize, usize)]>;

#[derive(Debug, Clone)]
enum Op {
    Placeholder { name: String, trainable: bool },
    Constant(Vec<f64>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LambertW(NodeId, Evaluation),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Gather(NodeId, Arc<[usize]>),
    Slice(NodeId, usize),
    SegmentSum(NodeId, Segments),
    SegmentSoftmax(NodeId, Segments),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    CrossEntropy(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Placeholder { .. } => "placeholder",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LambertW(..) => "lambert_w",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Gather(..) => "gather",
            Op::Slice(..) => "slice",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Placeholder { .. } | Op::Constant(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Dot(a, b)
            | Op::CrossEntropy(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LambertW(a, _)
            | Op::Gather(a, _)
            | Op::Slice(a, _)
            | Op::SegmentSum(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::Sum(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Option<Vec<f64>>,
}

/// Values fed to placeholders for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    values: HashMap<NodeId, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, id: NodeId, value: Tensor) -> &mut Self {
        self.values.insert(id, value);
        self
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Tensor> {
        self.values.get_mut(&id)
    }
}

/// Gradients of a scalar output with respect to trainable placeholders.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    values: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.values.iter()
    }
}

/// A static computation graph built once and evaluated repeatedly.
///
/// Nodes are appended in construction order, which is a valid topological
/// order because every op only refers to nodes that already exist.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(ctx: &'static str, a: &[usize], b: &[usize]) -> Result<(), AutodiffError> {
    if a != b {
        return Err(AutodiffError::ShapeMismatch { context: ctx, expected: a.to_vec(), found: b.to_vec() });
    }
    Ok(())
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Placeholder { trainable, .. } => *trainable,
            Op::Constant(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, shape, requires_grad, value: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Input slot that never receives gradients.
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        self.push(Op::Placeholder { name: name.to_string(), trainable: false }, shape)
    }

    /// Trainable slot; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        self.push(Op::Placeholder { name: name.to_string(), trainable: true }, shape)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value.into_data()), shape)
    }

    fn binary(&mut self, ctx: &'static str, a: NodeId, b: NodeId, op: Op) -> Result<NodeId, AutodiffError> {
        same_shape(ctx, self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(op, shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("add", a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("sub", a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("mul", a, b, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Offset(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a))
    }

    /// Principal-branch Lambert W, elementwise. Arguments must lie in
    /// `[-1/e, 0]`.
    pub fn lambert_w(&mut self, a: NodeId, eval: Evaluation) -> NodeId {
        self.unary(a, Op::LambertW(a, eval))
    }

    /// `(n x k) * (k x m)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { context: "matmul", expected: sa, found: sb });
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// Adds a length-`m` vector to each row of an `n x m` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { context: "add_bias", expected: sx, found: sb });
        }
        Ok(self.push(Op::AddBias(x, bias), sx))
    }

    /// `out[i] = a[index[i]]`; gradients are scatter-added back.
    pub fn gather(&mut self, a: NodeId, index: Arc<[usize]>) -> Result<NodeId, AutodiffError> {
        let n = numel(self.shape(a));
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: n });
        }
        let len = index.len();
        Ok(self.push(Op::Gather(a, index), vec![len]))
    }

    /// Contiguous window of the flattened input starting at `start`, viewed
    /// with `shape`.
    pub fn slice(&mut self, a: NodeId, start: usize, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let n = numel(self.shape(a));
        if start + numel(&shape) > n {
            return Err(AutodiffError::IndexOutOfRange { index: start + numel(&shape), len: n });
        }
        Ok(self.push(Op::Slice(a, start), shape))
    }

    fn check_segments(&self, a: NodeId, segments: &Segments) -> Result<(), AutodiffError> {
        let n = numel(self.shape(a));
        for &(s, l) in segments.iter() {
            if l == 0 || s + l > n {
                return Err(AutodiffError::IndexOutOfRange { index: s + l, len: n });
            }
        }
        Ok(())
    }

    pub fn segment_sum(&mut self, a: NodeId, segments: Segments) -> Result<NodeId, AutodiffError> {
        self.check_segments(a, &segments)?;
        let len = segments.len();
        Ok(self.push(Op::SegmentSum(a, segments), vec![len]))
    }

    /// Softmax applied independently within each segment. Positions outside
    /// every segment are passed through unchanged.
    pub fn segment_softmax(&mut self, a: NodeId, segments: Segments) -> Result<NodeId, AutodiffError> {
        self.check_segments(a, &segments)?;
        Ok(self.unary(a, Op::SegmentSoftmax(a, segments)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        same_shape("dot", self.shape(a), self.shape(b))?;
        Ok(self.push(Op::Dot(a, b), vec![]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`. `labels` holds class
    /// indices stored as floats, one per row.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId, AutodiffError> {
        let (sl, sy) = (self.shape(logits).to_vec(), self.shape(labels).to_vec());
        if sl.len() != 2 || sy.len() != 1 || sl[0] != sy[0] {
            return Err(AutodiffError::ShapeMismatch { context: "cross_entropy", expected: sl, found: sy });
        }
        Ok(self.push(Op::CrossEntropy(logits, labels), vec![]))
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.as_deref().expect("inputs are evaluated before their consumers")
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.value.as_ref().map(|v| Tensor::new(node.shape.clone(), v.clone()).expect("shape was validated"))
    }

    /// Borrowed forward value of a node.
    pub fn value_slice(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.as_deref()
    }

    /// Evaluates every node up to and including `output`.
    pub fn forward(&mut self, bindings: &Bindings, output: NodeId) -> Result<Tensor, AutodiffError> {
        for node in &mut self.nodes {
            node.value = None;
        }
        let mut needed = vec![false; output.0 + 1];
        needed[output.0] = true;
        for i in (0..=output.0).rev() {
            if needed[i] {
                for input in self.nodes[i].op.inputs() {
                    needed[input.0] = true;
                }
            }
        }
        for i in (0..=output.0).filter(|&i| needed[i]) {
            let value = self.eval_node(i, bindings)?;
            if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite { node: i, op: self.nodes[i].op.name(), position: pos });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(self.value(output).expect("just evaluated"))
    }

    fn eval_node(&self, i: usize, bindings: &Bindings) -> Result<Vec<f64>, AutodiffError> {
        let node = &self.nodes[i];
        let map = |a: NodeId, f: &dyn Fn(f64) -> f64| self.val(a).iter().map(|&v| f(v)).collect::<Vec<f64>>();
        let zip = |a: NodeId, b: NodeId, f: &dyn Fn(f64, f64) -> f64| {
            self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>()
        };
        Ok(match &node.op {
            Op::Placeholder { name, .. } => {
                let t = bindings.get(NodeId(i)).ok_or_else(|| AutodiffError::Unbound(name.clone()))?;
                same_shape("placeholder binding", &node.shape, t.shape())?;
                t.data().to_vec()
            }
            Op::Constant(v) => v.clone(),
            Op::Add(a, b) => zip(*a, *b, &|x, y| x + y),
            Op::Sub(a, b) => zip(*a, *b, &|x, y| x - y),
            Op::Mul(a, b) => zip(*a, *b, &|x, y| x * y),
            Op::Neg(a) => map(*a, &|x| -x),
            Op::Scale(a, c) => map(*a, &|x| x * c),
            Op::Offset(a, c) => map(*a, &|x| x + c),
            Op::Exp(a) => map(*a, &f64::exp),
            Op::Log(a) => map(*a, &f64::ln),
            Op::Sqrt(a) => map(*a, &f64::sqrt),
            Op::Square(a) => map(*a, &|x| x * x),
            Op::Tanh(a) => map(*a, &f64::tanh),
            Op::Relu(a) => map(*a, &|x| x.max(0.0)),
            Op::LambertW(a, eval) => {
                let mut out = Vec::with_capacity(node.shape.iter().product());
                for (pos, &x) in self.val(*a).iter().enumerate() {
                    let p = WDomainPoint::new(x).map_err(|_| AutodiffError::Domain { node: i, op: "lambert_w", position: pos })?;
                    out.push(lambert_w(p, *eval));
                }
                out
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                kernels::matmul(self.val(*a), self.val(*b), sa[0], sa[1], sb[1])
            }
            Op::AddBias(x, b) => {
                let mut out = self.val(*x).to_vec();
                kernels::add_bias(&mut out, self.val(*b));
                out
            }
            Op::Gather(a, index) => {
                let v = self.val(*a);
                index.iter().map(|&j| v[j]).collect()
            }
            Op::Slice(a, start) => {
                let n = numel(&node.shape);
                self.val(*a)[*start..*start + n].to_vec()
            }
            Op::SegmentSum(a, segs) => {
                let v = self.val(*a);
                segs.iter().map(|&(s, l)| v[s..s + l].iter().sum()).collect()
            }
            Op::SegmentSoftmax(a, segs) => {
                let mut out = self.val(*a).to_vec();
                for &(s, l) in segs.iter() {
                    let seg = &mut out[s..s + l];
                    let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in seg.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in seg.iter_mut() {
                        *v /= total;
                    }
                }
                out
            }
            Op::Sum(a) => vec![self.val(*a).iter().sum()],
            Op::Dot(a, b) => vec![self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x * y).sum()],
            Op::CrossEntropy(logits, labels) => {
                let s = self.shape(*logits);
                let (n, c) = (s[0], s[1]);
                let z = self.val(*logits);
                let mut total = 0.0;
                for (r, &y) in self.val(*labels).iter().enumerate() {
                    let label = class_index(y, c)?;
                    let row = &z[r * c..(r + 1) * c];
                    total += kernels::log_sum_exp(row) - row[label];
                }
                vec![total / n as f64]
            }
        })
    }

    /// Reverse-mode sweep from a scalar `output` evaluated by the last
    /// [`Graph::forward`] call.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, AutodiffError> {
        if numel(self.shape(output)) != 1 {
            return Err(AutodiffError::NonScalarOutput(self.shape(output).to_vec()));
        }
        // forward clears every cache first, so a cached output implies cached
        // ancestors
        if self.nodes[output.0].value.is_none() {
            return Err(AutodiffError::MissingForward);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = node.value.as_deref().expect("checked above");
            let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel(&self.nodes[id.0].shape)]);
                f(slot);
            };
            let elementwise = |a: NodeId, d: &dyn Fn(usize) -> f64| -> Vec<f64> {
                (0..numel(&self.nodes[a.0].shape)).map(|j| g[j] * d(j)).collect()
            };
            match &node.op {
                Op::Placeholder { .. } => {
                    result.values.insert(NodeId(i), Tensor::new(node.shape.clone(), g).expect("shape tracked"));
                }
                Op::Constant(_) => {}
                Op::Add(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, d)| *s += d));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, d)| *s += d));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, d)| *s += d));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, d)| *s -= d));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    acc(*a, &mut |s| s.iter_mut().zip(g.iter().zip(vb)).for_each(|(s, (d, y))| *s += d * y));
                    acc(*b, &mut |s| s.iter_mut().zip(g.iter().zip(va)).for_each(|(s, (d, x))| *s += d * x));
                }
                Op::Neg(a) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, d)| *s -= d)),
                Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, d)| *s += d * c)),
                Op::Offset(a, _) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, d)| *s += d)),
                Op::Exp(a) => {
                    let d = elementwise(*a, &|j| out[j]);
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::Log(a) => {
                    let x = self.val(*a);
                    let d = elementwise(*a, &|j| 1.0 / x[j]);
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::Sqrt(a) => {
                    let d = elementwise(*a, &|j| 0.5 / out[j]);
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::Square(a) => {
                    let x = self.val(*a);
                    let d = elementwise(*a, &|j| 2.0 * x[j]);
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::Tanh(a) => {
                    let d = elementwise(*a, &|j| 1.0 - out[j] * out[j]);
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::Relu(a) => {
                    let x = self.val(*a);
                    let d = elementwise(*a, &|j| if x[j] > 0.0 { 1.0 } else { 0.0 });
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::LambertW(a, eval) => {
                    let x = self.val(*a);
                    let d = match eval {
                        Evaluation::Refined => elementwise(*a, &|j| lambert_w_derivative(x[j], out[j])),
                        Evaluation::Pade => elementwise(*a, &|j| {
                            let p = WDomainPoint::new(x[j]).expect("validated in forward");
                            lambert_w_pade_derivative(p).min(1e12)
                        }),
                    };
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    let (n, k, m) = (sa[0], sa[1], sb[1]);
                    let (va, vb) = (self.val(*a), self.val(*b));
                    acc(*a, &mut |s| kernels::matmul_grad_left(&g, vb, n, k, m, s));
                    acc(*b, &mut |s| kernels::matmul_grad_right(va, &g, n, k, m, s));
                }
                Op::AddBias(x, b) => {
                    acc(*x, &mut |s| add_into(s, &g));
                    let m = self.shape(*b)[0];
                    acc(*b, &mut |s| {
                        for row in g.chunks(m) {
                            add_into(s, row);
                        }
                    });
                }
                Op::Gather(a, index) => acc(*a, &mut |s| {
                    for (&j, d) in index.iter().zip(&g) {
                        s[j] += d;
                    }
                }),
                Op::Slice(a, start) => acc(*a, &mut |s| add_into(&mut s[*start..*start + g.len()], &g)),
                Op::SegmentSum(a, segs) => acc(*a, &mut |s| {
                    for (&(st, l), d) in segs.iter().zip(&g) {
                        s[st..st + l].iter_mut().for_each(|v| *v += d);
                    }
                }),
                Op::SegmentSoftmax(a, segs) => {
                    // Identity outside the segments.
                    let mut d = g.clone();
                    for &(st, l) in segs.iter() {
                        let y = &out[st..st + l];
                        let gy: f64 = g[st..st + l].iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in st..st + l {
                            d[j] = out[j] * (g[j] - gy);
                        }
                    }
                    acc(*a, &mut |s| add_into(s, &d));
                }
                Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
                Op::Dot(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    acc(*a, &mut |s| s.iter_mut().zip(vb).for_each(|(s, y)| *s += g[0] * y));
                    acc(*b, &mut |s| s.iter_mut().zip(va).for_each(|(s, x)| *s += g[0] * x));
                }
                Op::CrossEntropy(logits, labels) => {
                    let sh = self.shape(*logits);
                    let (n, c) = (sh[0], sh[1]);
                    let z = self.val(*logits);
                    let y = self.val(*labels);
                    let scale = g[0] / n as f64;
                    acc(*logits, &mut |s| {
                        for r in 0..n {
                            let row = &z[r * c..(r + 1) * c];
                            let lse = kernels::log_sum_exp(row);
                            let label = y[r] as usize;
                            for j in 0..c {
                                let p = (row[j] - lse).exp();
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                s[r * c + j] += scale * (p - onehot);
                            }
                        }
                    });
                }
            }
        }
        Ok(result)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn class_index(y: f64, classes: usize) -> Result<usize, AutodiffError> {
    if y < 0.0 || y.fract() != 0.0 || y as usize >= classes {
        return Err(AutodiffError::LabelOutOfRange { label: y, classes });
    }
    Ok(y as usize)
}
