use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Index of a node on the tape. Ids are issued in recording order, so every
/// input id is smaller than the id of the node consuming it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Leaf that never receives a gradient.
    Input,
    /// Leaf that receives a gradient (parameters and differentiated inputs).
    Param,
    MatMul { lhs_t: bool, rhs_t: bool },
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Relu,
    /// Heaviside mask `x > 0`; treated as a constant by differentiation.
    Step,
    Sigmoid,
    Tanh,
    Square,
    Sqrt,
    Sum,
    Mean,
    Broadcast(Vec<usize>),
    SumTo(Vec<usize>),
    Reshape(Vec<usize>),
    /// Concatenation along the last axis.
    Concat,
    /// Column range `[start, end)` of the last axis.
    Slice { start: usize, end: usize },
    /// Zero-padding of the last axis to `width`, inverse of `Slice`.
    Pad { before: usize, width: usize },
    /// Row-wise softmax of a 2-D tensor.
    Softmax,
    /// Mean over rows of `-log softmax(row)[label]`.
    SoftmaxCrossEntropy(Arc<[usize]>),
    /// Euclidean norm of each row, `[n, m] -> [n]`.
    L2NormRows,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::Neg => "negate",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add-scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Broadcast(_) => "broadcast",
            Op::SumTo(_) => "sum-to",
            Op::Reshape(_) => "reshape",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy(_) => "softmax-cross-entropy",
            Op::L2NormRows => "l2-norm-rows",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    value: Option<Arc<Tensor>>,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> Option<&Tensor> {
        self.value.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Gradients of a scalar root, keyed by the leaf they belong to.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<NodeId, NodeId>,
}

impl Gradients {
    /// Node holding dRoot/dLeaf, or `None` when the root does not depend on it.
    pub fn get(&self, leaf: NodeId) -> Option<NodeId> {
        self.map.get(&leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Recorded computation trace.
///
/// Ops evaluate eagerly as soon as all their inputs carry values; leaves
/// created with [`Graph::placeholder`] defer evaluation until
/// [`Graph::forward`] binds them. The backward pass records its own ops on the
/// same tape, so a gradient node can be differentiated again.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, value.shape().to_vec(), Some(Arc::new(value)))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Param, value.shape().to_vec(), Some(Arc::new(value)))
    }

    /// Shares an existing tensor as a differentiable leaf without copying it.
    pub fn param_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push_leaf(Op::Param, value.shape().to_vec(), Some(value))
    }

    /// Leaf whose value is supplied later through [`Graph::forward`].
    pub fn placeholder(&mut self, shape: &[usize], requires_grad: bool) -> NodeId {
        let op = if requires_grad { Op::Param } else { Op::Input };
        self.push_leaf(op, shape.to_vec(), None)
    }

    fn push_leaf(&mut self, op: Op, shape: Vec<usize>, value: Option<Arc<Tensor>>) -> NodeId {
        let requires_grad = op == Op::Param;
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            shape,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Value of an evaluated node.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0]
            .value
            .as_deref()
            .ok_or(AutodiffError::NotEvaluated(id.0))
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if !v.is_scalar() {
            return Err(AutodiffError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    }

    /// Records an op node, evaluating it if every input already has a value.
    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        assert!(!op.is_leaf(), "leaves are created with input/param/placeholder");
        let shapes: Vec<&[usize]> = inputs.iter().map(|i| self.nodes[i.0].shape.as_slice()).collect();
        let shape = kernels::infer_shape(&op, &shapes)?;
        let requires_grad =
            !matches!(op, Op::Step) && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        let value = if inputs.iter().all(|i| self.nodes[i.0].value.is_some()) {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| self.nodes[i.0].value.as_deref().unwrap()).collect();
            let out = kernels::eval(&op, &vals, &shape);
            check_finite(&op, id, &out)?;
            Some(Arc::new(out))
        } else {
            None
        };
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape,
            value,
            requires_grad,
        });
        Ok(id)
    }

    /// Rebinds leaves and re-evaluates every op node in recording order.
    ///
    /// Leaves missing from `bindings` keep their current value; a leaf with no
    /// value at all is an error.
    pub fn forward(&mut self, bindings: &HashMap<NodeId, Tensor>) -> Result<()> {
        for (id, t) in bindings {
            let node = self
                .nodes
                .get_mut(id.0)
                .ok_or(AutodiffError::UnknownNode(id.0))?;
            if !node.op.is_leaf() {
                return Err(AutodiffError::NotALeaf(id.0));
            }
            if node.shape != t.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "bind",
                    shapes: vec![node.shape.clone(), t.shape().to_vec()],
                });
            }
            node.value = Some(Arc::new(t.clone()));
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                if self.nodes[i].value.is_none() {
                    return Err(AutodiffError::Unbound(i));
                }
                continue;
            }
            let node = &self.nodes[i];
            let vals: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|j| self.nodes[j.0].value.as_deref().expect("inputs precede consumers"))
                .collect();
            let out = kernels::eval(&node.op, &vals, &node.shape);
            check_finite(&node.op, NodeId(i), &out)?;
            self.nodes[i].value = Some(Arc::new(out));
        }
        Ok(())
    }

    /// Gradients of `root` with respect to every differentiable leaf it depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        let leaves: Vec<NodeId> = (0..=root.0)
            .filter(|&i| self.nodes[i].op == Op::Param)
            .map(NodeId)
            .collect();
        let grads = self.differentiate(root, &leaves)?;
        Ok(Gradients {
            map: leaves
                .into_iter()
                .zip(grads)
                .filter_map(|(l, g)| g.map(|g| (l, g)))
                .collect(),
        })
    }

    /// Gradient nodes of `root` with respect to each of `wrt`.
    ///
    /// Fails if some target does not influence the root through a
    /// differentiable path.
    pub fn gradients(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let grads = self.differentiate(root, wrt)?;
        wrt.iter()
            .zip(grads)
            .map(|(w, g)| g.ok_or(AutodiffError::NotAncestor { wrt: w.0, root: root.0 }))
            .collect()
    }

    /// Like [`Graph::gradients`], but yields `None` for targets the root does
    /// not depend on instead of failing.
    pub fn try_gradients(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        self.differentiate(root, wrt)
    }

    /// Differentiable node holding the Euclidean norm of dRoot/dWrt.
    pub fn grad_norm(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId> {
        let g = self.gradients(root, &[wrt])?[0];
        let sq = self.square(g)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Per-row norms `[n]` of dRoot/dWrt for a batched `wrt` of shape `[n, m]`.
    ///
    /// `eps` is added under the square root so the norm stays differentiable
    /// where the gradient row vanishes.
    pub fn grad_norm_rows(&mut self, root: NodeId, wrt: NodeId, eps: f64) -> Result<NodeId> {
        let g = self.gradients(root, &[wrt])?[0];
        let n = self.shape(g).first().copied().unwrap_or(1);
        let sq = self.square(g)?;
        let rows = self.sum_to(sq, &[n, 1])?;
        let rows = self.add_scalar(rows, eps)?;
        let norm = self.sqrt(rows)?;
        self.reshape(norm, &[n])
    }

    fn differentiate(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(root.0));
        }
        let root_val = self.value(root)?;
        if !root_val.is_scalar() {
            return Err(AutodiffError::NotScalar(root_val.shape().to_vec()));
        }
        if let Some(bad) = (0..=root.0).find(|&i| self.nodes[i].value.is_none()) {
            return Err(AutodiffError::NotEvaluated(bad));
        }

        // nodes on a differentiable path from some target up to the root
        let mut relevant = vec![false; root.0 + 1];
        for w in wrt {
            if w.0 <= root.0 && self.nodes[w.0].requires_grad {
                relevant[w.0] = true;
            }
        }
        for i in 0..=root.0 {
            let node = &self.nodes[i];
            if !relevant[i] && node.requires_grad && node.inputs.iter().any(|j| relevant[j.0]) {
                relevant[i] = true;
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        if relevant[root.0] {
            let seed = self.input(Tensor::ones(&self.nodes[root.0].shape.clone()));
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i] else { continue };
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let needs: Vec<bool> = inputs.iter().map(|j| relevant[j.0]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let contribs = self.vjp(NodeId(i), g, &needs)?;
            for ((inp, need), c) in inputs.iter().zip(&needs).zip(contribs) {
                if !need {
                    continue;
                }
                let c = c.expect("vjp yields a contribution for every needed input");
                grads[inp.0] = Some(match grads[inp.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.0 <= root.0 { grads[w.0] } else { None })
            .collect())
    }

    /// Records the vector-Jacobian products of node `id` given upstream `g`.
    fn vjp(&mut self, id: NodeId, g: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let node = self.nodes[id.0].clone();
        let x = node.inputs[0];
        let mut out = vec![None; node.inputs.len()];
        match &node.op {
            Op::Input | Op::Param | Op::Step => {}
            Op::MatMul { lhs_t, rhs_t } => {
                let b = node.inputs[1];
                if needs[0] {
                    out[0] = Some(if *lhs_t {
                        self.matmul_t(b, g, *rhs_t, true)?
                    } else {
                        self.matmul_t(g, b, false, !rhs_t)?
                    });
                }
                if needs[1] {
                    out[1] = Some(if *rhs_t {
                        self.matmul_t(g, x, true, *lhs_t)?
                    } else {
                        self.matmul_t(x, g, !lhs_t, false)?
                    });
                }
            }
            Op::Transpose => out[0] = Some(self.transpose(g)?),
            Op::Add => {
                out[0] = needs[0].then_some(g);
                out[1] = needs[1].then_some(g);
            }
            Op::Sub => {
                out[0] = needs[0].then_some(g);
                if needs[1] {
                    out[1] = Some(self.neg(g)?);
                }
            }
            Op::Mul => {
                let b = node.inputs[1];
                if needs[0] {
                    out[0] = Some(self.mul(g, b)?);
                }
                if needs[1] {
                    out[1] = Some(self.mul(g, x)?);
                }
            }
            Op::Div => {
                let b = node.inputs[1];
                if needs[0] {
                    out[0] = Some(self.div(g, b)?);
                }
                if needs[1] {
                    // d(a/b)/db = -(a/b)/b
                    let gy = self.mul(g, id)?;
                    let q = self.div(gy, b)?;
                    out[1] = Some(self.neg(q)?);
                }
            }
            Op::Neg => out[0] = Some(self.neg(g)?),
            Op::Scale(c) => out[0] = Some(self.scale(g, *c)?),
            Op::AddScalar(_) => out[0] = Some(g),
            Op::Reshape(_) => {
                let s = self.nodes[x.0].shape.clone();
                out[0] = Some(self.reshape(g, &s)?);
            }
            Op::Exp => out[0] = Some(self.mul(g, id)?),
            Op::Log => out[0] = Some(self.div(g, x)?),
            Op::Relu => {
                let mask = self.push(Op::Step, &[x])?;
                out[0] = Some(self.mul(g, mask)?);
            }
            Op::Sigmoid => {
                let one_minus = self.scale(id, -1.0)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                let d = self.mul(id, one_minus)?;
                out[0] = Some(self.mul(g, d)?);
            }
            Op::Tanh => {
                let sq = self.square(id)?;
                let d = self.scale(sq, -1.0)?;
                let d = self.add_scalar(d, 1.0)?;
                out[0] = Some(self.mul(g, d)?);
            }
            Op::Square => {
                let gx = self.mul(g, x)?;
                out[0] = Some(self.scale(gx, 2.0)?);
            }
            Op::Sqrt => {
                let half = self.scale(g, 0.5)?;
                out[0] = Some(self.div(half, id)?);
            }
            Op::Sum => {
                let s = self.nodes[x.0].shape.clone();
                out[0] = Some(self.broadcast(g, &s)?);
            }
            Op::Mean => {
                let s = self.nodes[x.0].shape.clone();
                let n: usize = s.iter().product();
                let gs = self.scale(g, 1.0 / n as f64)?;
                out[0] = Some(self.broadcast(gs, &s)?);
            }
            Op::Broadcast(_) => {
                let s = self.nodes[x.0].shape.clone();
                out[0] = Some(self.sum_to(g, &s)?);
            }
            Op::SumTo(_) => {
                let s = self.nodes[x.0].shape.clone();
                out[0] = Some(self.broadcast(g, &s)?);
            }
            Op::Concat => {
                let mut start = 0;
                for (k, inp) in node.inputs.iter().enumerate() {
                    let w = *self.nodes[inp.0].shape.last().unwrap();
                    if needs[k] {
                        out[k] = Some(self.slice(g, start, start + w)?);
                    }
                    start += w;
                }
            }
            Op::Slice { start, .. } => {
                let width = *self.nodes[x.0].shape.last().unwrap();
                out[0] = Some(self.push(Op::Pad { before: *start, width }, &[g])?);
            }
            Op::Pad { before, .. } => {
                let w = *self.nodes[x.0].shape.last().unwrap();
                out[0] = Some(self.slice(g, *before, before + w)?);
            }
            Op::Softmax => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let s = node.shape.clone();
                let gy = self.mul(g, id)?;
                let rs = self.sum_to(gy, &[s[0], 1])?;
                let rs = self.broadcast(rs, &s)?;
                let diff = self.sub(g, rs)?;
                out[0] = Some(self.mul(id, diff)?);
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let s = self.nodes[x.0].shape.clone();
                let mut onehot = Tensor::zeros(&s);
                for (r, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[r * s[1] + y] = 1.0;
                }
                let onehot = self.input(onehot);
                let p = self.softmax(x)?;
                let d = self.sub(p, onehot)?;
                let d = self.scale(d, 1.0 / labels.len() as f64)?;
                let gb = self.broadcast(g, &s)?;
                out[0] = Some(self.mul(d, gb)?);
            }
            Op::L2NormRows => {
                // x_ij / ‖x_i‖ · g_i
                let s = self.nodes[x.0].shape.clone();
                let q = self.div(g, id)?;
                let q = self.reshape(q, &[s[0], 1])?;
                let q = self.broadcast(q, &s)?;
                out[0] = Some(self.mul(x, q)?);
            }
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { lhs_t: false, rhs_t: false }, &[a, b])
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, lhs_t: bool, rhs_t: bool) -> Result<NodeId> {
        self.push(Op::MatMul { lhs_t, rhs_t }, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div, &[a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(c), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, &[a])
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Broadcast(shape.to_vec()), &[a])
    }

    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::SumTo(shape.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat, parts)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::Slice { start, end }, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, &[a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy(labels.into()), &[logits])
    }

    pub fn l2_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2NormRows, &[a])
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let bb = self.broadcast(b, &s)?;
        self.add(x, bb)
    }
}

fn check_finite(op: &Op, id: NodeId, out: &Tensor) -> Result<()> {
    if out.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite {
            node: id.0,
            op: op.name(),
        })
    }
}
