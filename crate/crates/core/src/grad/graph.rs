use std::collections::BTreeMap;

use super::kernels;
use super::tensor::{ParameterSet, Tensor};
use super::GradError;
use crate::quantizer::{self, SelectionKind};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed operation set of the engine.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Parameter(String),
    Constant,
    /// `a · b`, or `a · bᵀ` when `transpose_rhs` is set.
    MatMul { transpose_rhs: bool },
    /// Elementwise sum; the right operand may be a `1×n` bias row.
    Add,
    Scale(f64),
    Tanh,
    SliceCols { start: usize, end: usize },
    SliceRows { start: usize, end: usize },
    ConcatCols,
    ConcatRows,
    RowSoftmax,
    RowLogSoftmax,
    Log,
    Negate,
    /// Sum of all entries into a `1×1` scalar.
    Sum,
    /// Row-wise inner product of two equal-shape matrices, giving `m×1`.
    RowDot,
    StopGradient,
    /// Inputs `(scores, probs)`. Forward is the one-hot argmax of each score
    /// row (lowest index on ties); backward passes the gradient to `probs`
    /// unchanged and nothing to `scores`.
    StraightThroughSelect,
    /// Inputs `(sub_vectors n×s, codebook L×s[, bilinear s×s])`, giving the
    /// `n×L` codeword-selection scores.
    SelectionScores(SelectionKind),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::SliceCols { .. } | Op::SliceRows { .. } => "slice",
            Op::ConcatCols | Op::ConcatRows => "concat",
            Op::RowSoftmax => "row-softmax",
            Op::RowLogSoftmax => "row-log-softmax",
            Op::Log => "log",
            Op::Negate => "negate",
            Op::Sum => "sum",
            Op::RowDot => "dot",
            Op::StopGradient => "stop-gradient",
            Op::StraightThroughSelect => "straight-through-select",
            Op::SelectionScores(_) => "selection-scores",
        }
    }

    /// True for ops whose backward deliberately departs from the derivative
    /// of their forward value.
    pub fn is_detaching(&self) -> bool {
        matches!(self, Op::StopGradient | Op::StraightThroughSelect)
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input(_) | Op::Parameter(_) | Op::Constant)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Define-by-run computation graph.
///
/// Values are computed as nodes are added, so shape errors surface at the
/// call that introduces them. [`Graph::forward`] re-evaluates every node in
/// insertion (topological) order with new leaf bindings.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a named input or parameter leaf.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    /// Gradient reaching any node; `None` if no path carried gradient to it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.per_node.get(id.0).and_then(Option::as_ref)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    /// Gradients restricted to parameter leaves.
    pub fn parameters(&self, graph: &Graph) -> ParameterSet {
        graph
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Parameter(name) => Some((name.clone(), self.named[name].clone())),
                _ => None,
            })
            .collect()
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

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn contains_detaching_ops(&self) -> bool {
        self.nodes.iter().any(|n| n.op.is_detaching())
    }

    /// Named leaf lookup.
    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId, GradError> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(GradError::DuplicateName(name));
        }
        let id = self.push_leaf(Op::Input(name.clone()), value);
        self.leaves.insert(name, id);
        Ok(id)
    }

    /// Registers a parameter leaf. Registering the same name twice returns
    /// the existing node, so parameters are shared within a graph.
    pub fn parameter(&mut self, name: impl Into<String>, value: &Tensor) -> Result<NodeId, GradError> {
        let name = name.into();
        if let Some(&id) = self.leaves.get(&name) {
            let node = &self.nodes[id.0];
            if !matches!(node.op, Op::Parameter(_)) {
                return Err(GradError::DuplicateName(name));
            }
            if node.value.shape() != value.shape() {
                return Err(GradError::BindingShape {
                    name,
                    expected: node.value.shape(),
                    actual: value.shape(),
                });
            }
            return Ok(id);
        }
        let id = self.push_leaf(Op::Parameter(name.clone()), value.clone());
        self.leaves.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, GradError> {
        let id = self.nodes.len();
        let value = {
            let args: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            evaluate(id, &op, &args)?
        };
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::MatMul { transpose_rhs: false }, vec![a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::MatMul { transpose_rhs: true }, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Add, vec![a, b])
    }

    /// `a - b`, expressed as `a + (-b)`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let nb = self.negate(b)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GradError> {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, GradError> {
        self.push(Op::SliceCols { start, end }, vec![a])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, GradError> {
        self.push(Op::SliceRows { start, end }, vec![a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        self.push(Op::ConcatCols, parts.to_vec())
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        self.push(Op::ConcatRows, parts.to_vec())
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::RowSoftmax, vec![a])
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::RowLogSoftmax, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Log, vec![a])
    }

    pub fn negate(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Negate, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Sum, vec![a])
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::RowDot, vec![a, b])
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::StopGradient, vec![a])
    }

    pub fn straight_through_select(&mut self, scores: NodeId, probs: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::StraightThroughSelect, vec![scores, probs])
    }

    pub fn selection_scores(
        &mut self,
        kind: SelectionKind,
        sub_vectors: NodeId,
        codebook: NodeId,
        bilinear: Option<NodeId>,
    ) -> Result<NodeId, GradError> {
        let mut inputs = vec![sub_vectors, codebook];
        inputs.extend(bilinear);
        self.push(Op::SelectionScores(kind), inputs)
    }

    /// Re-evaluates the whole graph in topological order.
    ///
    /// Leaves named in `bindings` take the bound value (shapes must match);
    /// other leaves keep their current value.
    pub fn forward(&mut self, bindings: &ParameterSet) -> Result<(), GradError> {
        for (name, value) in bindings {
            if let Some(&id) = self.leaves.get(name) {
                let current = &self.nodes[id.0].value;
                if current.shape() != value.shape() {
                    return Err(GradError::BindingShape {
                        name: name.clone(),
                        expected: current.shape(),
                        actual: value.shape(),
                    });
                }
            }
        }
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            let value = match &node.op {
                Op::Input(name) | Op::Parameter(name) => match bindings.get(name) {
                    Some(v) => v.clone(),
                    None => continue,
                },
                Op::Constant => continue,
                op => {
                    let args: Vec<&Tensor> =
                        node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    evaluate(id, op, &args)?
                }
            };
            self.nodes[id].value = value;
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Contributions are accumulated in reverse insertion order, so repeated
    /// calls give bit-identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GradError> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(GradError::NotScalar {
                shape: loss_value.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.op.is_leaf() {
                continue;
            }
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let args: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let contributions = vector_jacobian(&node.op, &args, &node.value, g);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut named = BTreeMap::new();
        for (name, &id) in &self.leaves {
            let value = &self.nodes[id.0].value;
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()));
            named.insert(name.clone(), g);
        }
        Ok(Gradients {
            per_node: grads,
            named,
        })
    }
}

fn shape_error(node: usize, op: &Op, detail: String) -> GradError {
    GradError::Shape {
        node,
        op: op.name(),
        detail,
    }
}

fn arity(node: usize, op: &Op, args: &[&Tensor], n: usize) -> Result<(), GradError> {
    if args.len() != n {
        return Err(shape_error(
            node,
            op,
            format!("expected {n} inputs, got {}", args.len()),
        ));
    }
    Ok(())
}

fn evaluate(node: usize, op: &Op, args: &[&Tensor]) -> Result<Tensor, GradError> {
    let out = match op {
        Op::Input(_) | Op::Parameter(_) | Op::Constant => {
            unreachable!("leaves are never evaluated")
        }
        Op::MatMul { transpose_rhs } => {
            arity(node, op, args, 2)?;
            let (a, b) = (args[0], args[1]);
            if *transpose_rhs {
                if a.cols() != b.cols() {
                    return Err(shape_error(
                        node,
                        op,
                        format!("{:?} x transpose {:?}", a.shape(), b.shape()),
                    ));
                }
                kernels::matmul_bt(a, b)
            } else {
                if a.cols() != b.rows() {
                    return Err(shape_error(node, op, format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                kernels::matmul(a, b)
            }
        }
        Op::Add => {
            arity(node, op, args, 2)?;
            let (a, b) = (args[0], args[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_raw(a.rows(), a.cols(), data)
            } else if b.rows() == 1 && b.cols() == a.cols() {
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let row = &mut out.data_mut()[r * a.cols()..(r + 1) * a.cols()];
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        *x += *y;
                    }
                }
                out
            } else {
                return Err(shape_error(node, op, format!("{:?} + {:?}", a.shape(), b.shape())));
            }
        }
        Op::Scale(f) => {
            arity(node, op, args, 1)?;
            let a = args[0];
            Tensor::from_raw(a.rows(), a.cols(), a.data().iter().map(|x| x * f).collect())
        }
        Op::Tanh => {
            arity(node, op, args, 1)?;
            let a = args[0];
            Tensor::from_raw(a.rows(), a.cols(), a.data().iter().map(|x| x.tanh()).collect())
        }
        Op::SliceCols { start, end } => {
            arity(node, op, args, 1)?;
            let a = args[0];
            if start >= end || *end > a.cols() {
                return Err(shape_error(
                    node,
                    op,
                    format!("columns {start}..{end} of {:?}", a.shape()),
                ));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(a.rows() * w);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row_slice(r)[*start..*end]);
            }
            Tensor::from_raw(a.rows(), w, data)
        }
        Op::SliceRows { start, end } => {
            arity(node, op, args, 1)?;
            let a = args[0];
            if start >= end || *end > a.rows() {
                return Err(shape_error(node, op, format!("rows {start}..{end} of {:?}", a.shape())));
            }
            let data = a.data()[start * a.cols()..end * a.cols()].to_vec();
            Tensor::from_raw(end - start, a.cols(), data)
        }
        Op::ConcatCols => {
            if args.is_empty() {
                return Err(shape_error(node, op, "no inputs".into()));
            }
            let rows = args[0].rows();
            if args.iter().any(|t| t.rows() != rows) {
                let shapes: Vec<_> = args.iter().map(|t| t.shape()).collect();
                return Err(shape_error(node, op, format!("row counts differ: {shapes:?}")));
            }
            let cols: usize = args.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in args {
                    data.extend_from_slice(t.row_slice(r));
                }
            }
            Tensor::from_raw(rows, cols, data)
        }
        Op::ConcatRows => {
            if args.is_empty() {
                return Err(shape_error(node, op, "no inputs".into()));
            }
            let cols = args[0].cols();
            if args.iter().any(|t| t.cols() != cols) {
                let shapes: Vec<_> = args.iter().map(|t| t.shape()).collect();
                return Err(shape_error(node, op, format!("column counts differ: {shapes:?}")));
            }
            let rows: usize = args.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in args {
                data.extend_from_slice(t.data());
            }
            Tensor::from_raw(rows, cols, data)
        }
        Op::RowSoftmax => {
            arity(node, op, args, 1)?;
            kernels::row_softmax(args[0])
        }
        Op::RowLogSoftmax => {
            arity(node, op, args, 1)?;
            kernels::row_log_softmax(args[0])
        }
        Op::Log => {
            arity(node, op, args, 1)?;
            let a = args[0];
            Tensor::from_raw(a.rows(), a.cols(), a.data().iter().map(|x| x.ln()).collect())
        }
        Op::Negate => {
            arity(node, op, args, 1)?;
            let a = args[0];
            Tensor::from_raw(a.rows(), a.cols(), a.data().iter().map(|x| -x).collect())
        }
        Op::Sum => {
            arity(node, op, args, 1)?;
            Tensor::scalar(args[0].data().iter().sum())
        }
        Op::RowDot => {
            arity(node, op, args, 2)?;
            let (a, b) = (args[0], args[1]);
            if a.shape() != b.shape() {
                return Err(shape_error(node, op, format!("{:?} . {:?}", a.shape(), b.shape())));
            }
            let data = (0..a.rows())
                .map(|r| kernels::dot(a.row_slice(r), b.row_slice(r)))
                .collect();
            Tensor::from_raw(a.rows(), 1, data)
        }
        Op::StopGradient => {
            arity(node, op, args, 1)?;
            args[0].clone()
        }
        Op::StraightThroughSelect => {
            arity(node, op, args, 2)?;
            let (scores, probs) = (args[0], args[1]);
            if scores.shape() != probs.shape() {
                return Err(shape_error(
                    node,
                    op,
                    format!("scores {:?} vs probs {:?}", scores.shape(), probs.shape()),
                ));
            }
            let mut out = Tensor::zeros(scores.rows(), scores.cols());
            for r in 0..scores.rows() {
                let j = quantizer::argmax(scores.row_slice(r));
                out.data_mut()[r * scores.cols() + j] = 1.0;
            }
            out
        }
        Op::SelectionScores(kind) => {
            let expected = if *kind == SelectionKind::Bilinear { 3 } else { 2 };
            arity(node, op, args, expected)?;
            let (z, c) = (args[0], args[1]);
            let s = z.cols();
            if c.cols() != s {
                return Err(shape_error(
                    node,
                    op,
                    format!("sub-vectors {:?} vs codebook {:?}", z.shape(), c.shape()),
                ));
            }
            let w = match args.get(2) {
                Some(w) if w.shape() != [s, s] => {
                    return Err(shape_error(
                        node,
                        op,
                        format!("bilinear matrix {:?}, expected [{s}, {s}]", w.shape()),
                    ))
                }
                Some(w) => Some(w.data()),
                None => None,
            };
            let mut out = vec![0.0; z.rows() * c.rows()];
            quantizer::score_block(*kind, z.data(), c.data(), s, w, &mut out).map_err(|e| {
                GradError::Degenerate {
                    node,
                    detail: e.to_string(),
                }
            })?;
            Tensor::from_raw(z.rows(), c.rows(), out)
        }
    };
    if !out.is_finite() {
        return Err(GradError::NonFinite { node, op: op.name() });
    }
    Ok(out)
}

/// Contribution of `g = ∂loss/∂out` to each input of one node.
fn vector_jacobian(op: &Op, args: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Input(_) | Op::Parameter(_) | Op::Constant => Vec::new(),
        Op::MatMul { transpose_rhs } => {
            let (a, b) = (args[0], args[1]);
            if *transpose_rhs {
                // out = a bᵀ
                vec![Some(kernels::matmul(g, b)), Some(kernels::matmul_at(g, a))]
            } else {
                vec![Some(kernels::matmul_bt(g, b)), Some(kernels::matmul_at(a, g))]
            }
        }
        Op::Add => {
            let b = args[1];
            let gb = if b.shape() == g.shape() {
                g.clone()
            } else {
                kernels::column_sums(g)
            };
            vec![Some(g.clone()), Some(gb)]
        }
        Op::Scale(f) => {
            let data = g.data().iter().map(|x| x * f).collect();
            vec![Some(Tensor::from_raw(g.rows(), g.cols(), data))]
        }
        Op::Tanh => {
            let data = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(gi, y)| gi * (1.0 - y * y))
                .collect();
            vec![Some(Tensor::from_raw(g.rows(), g.cols(), data))]
        }
        Op::SliceCols { start, end } => {
            let a = args[0];
            let mut da = Tensor::zeros(a.rows(), a.cols());
            let w = end - start;
            for r in 0..a.rows() {
                let dst = &mut da.data_mut()[r * a.cols() + start..r * a.cols() + end];
                dst.copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![Some(da)]
        }
        Op::SliceRows { start, end } => {
            let a = args[0];
            let mut da = Tensor::zeros(a.rows(), a.cols());
            da.data_mut()[start * a.cols()..end * a.cols()].copy_from_slice(g.data());
            vec![Some(da)]
        }
        Op::ConcatCols => {
            let mut offset = 0;
            args.iter()
                .map(|t| {
                    let mut part = Vec::with_capacity(t.len());
                    for r in 0..t.rows() {
                        let row = g.row_slice(r);
                        part.extend_from_slice(&row[offset..offset + t.cols()]);
                    }
                    offset += t.cols();
                    Some(Tensor::from_raw(t.rows(), t.cols(), part))
                })
                .collect()
        }
        Op::ConcatRows => {
            let mut offset = 0;
            args.iter()
                .map(|t| {
                    let part = g.data()[offset..offset + t.len()].to_vec();
                    offset += t.len();
                    Some(Tensor::from_raw(t.rows(), t.cols(), part))
                })
                .collect()
        }
        Op::RowSoftmax => {
            let mut dx = Tensor::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let inner = kernels::dot(gr, y);
                let dst = &mut dx.data_mut()[r * g.cols()..(r + 1) * g.cols()];
                for ((d, yi), gi) in dst.iter_mut().zip(y).zip(gr) {
                    *d = yi * (gi - inner);
                }
            }
            vec![Some(dx)]
        }
        Op::RowLogSoftmax => {
            let mut dx = Tensor::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let total: f64 = gr.iter().sum();
                let dst = &mut dx.data_mut()[r * g.cols()..(r + 1) * g.cols()];
                for ((d, yi), gi) in dst.iter_mut().zip(y).zip(gr) {
                    *d = gi - yi.exp() * total;
                }
            }
            vec![Some(dx)]
        }
        Op::Log => {
            let a = args[0];
            let data = g.data().iter().zip(a.data()).map(|(gi, x)| gi / x).collect();
            vec![Some(Tensor::from_raw(g.rows(), g.cols(), data))]
        }
        Op::Negate => {
            let data = g.data().iter().map(|x| -x).collect();
            vec![Some(Tensor::from_raw(g.rows(), g.cols(), data))]
        }
        Op::Sum => {
            let a = args[0];
            vec![Some(Tensor::filled(a.rows(), a.cols(), g.data()[0]))]
        }
        Op::RowDot => {
            let (a, b) = (args[0], args[1]);
            let mut da = Tensor::zeros(a.rows(), a.cols());
            let mut db = Tensor::zeros(b.rows(), b.cols());
            let n = a.cols();
            for r in 0..a.rows() {
                let gr = g.data()[r];
                for c in 0..n {
                    da.data_mut()[r * n + c] = gr * b.get(r, c);
                    db.data_mut()[r * n + c] = gr * a.get(r, c);
                }
            }
            vec![Some(da), Some(db)]
        }
        Op::StopGradient => vec![None],
        Op::StraightThroughSelect => vec![None, Some(g.clone())],
        Op::SelectionScores(kind) => {
            let (z, c) = (args[0], args[1]);
            let w = args.get(2).map(|w| w.data());
            let (dz, dc, dw) = kernels::selection_scores_vjp(*kind, z, c, w, g);
            let mut out = vec![Some(dz), Some(dc)];
            if let Some(dw) = dw {
                out.push(Some(dw));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn constant_evaluates_to_itself() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(5.0));
        assert_eq!(g.value(c).item(), Some(5.0));
    }

    #[test]
    fn matmul_with_identity() {
        let mut g = Graph::new();
        let x = g.input("x", t(1, 2, &[1.0, 2.0])).unwrap();
        let i = g.constant(Tensor::identity(2));
        let y = g.matmul(x, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn tanh_of_half() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(0.5)).unwrap();
        let y = g.tanh(x).unwrap();
        // Odd power series of tanh, summed to convergence.
        let bernoulli_terms = [1.0, -1.0 / 3.0, 2.0 / 15.0, -17.0 / 315.0, 62.0 / 2835.0,
            -1382.0 / 155925.0, 21844.0 / 6081075.0, -929569.0 / 638512875.0];
        let series: f64 = bernoulli_terms
            .iter()
            .enumerate()
            .map(|(k, c)| c * 0.5f64.powi(2 * k as i32 + 1))
            .sum();
        assert!((series - 0.462117).abs() < 1e-6);
        assert!((g.value(y).item().unwrap() - series).abs() < 1e-6);
    }

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), Some(1.0));
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let y = g.row_dot(x, x).unwrap();
        assert_eq!(g.value(y).item(), Some(9.0));
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), Some(6.0));
    }

    #[test]
    fn stop_gradient_detaches_exactly() {
        let mut g = Graph::new();
        let x = g.input("x", t(1, 3, &[0.3, -1.2, 2.0])).unwrap();
        let s = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let y = g.tanh(s).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.get("x").unwrap();
        assert!(gx.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input("x", t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(GradError::NotScalar { .. })));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", t(1, 2, &[1.0, 2.0])).unwrap();
        let b = g.input("b", t(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        match g.matmul(a, b) {
            Err(GradError::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.log(x), Err(GradError::NonFinite { .. })));
    }

    #[test]
    fn reevaluation_is_bit_identical() {
        let mut g = Graph::new();
        let w = g.parameter("w", &t(2, 2, &[0.1, -0.7, 0.4, 0.9])).unwrap();
        let x = g.input("x", t(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0])).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.tanh(h).unwrap();
        let p = g.row_log_softmax(h).unwrap();
        let l = g.sum(p).unwrap();
        let before: Vec<u64> = g.value(l).data().iter().map(|v| v.to_bits()).collect();
        g.forward(&ParameterSet::new()).unwrap();
        let after: Vec<u64> = g.value(l).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn straight_through_select_is_one_hot_with_low_tie_break() {
        let mut g = Graph::new();
        let s = g.input("s", t(2, 3, &[1.0, 3.0, 3.0, 0.0, -1.0, -2.0])).unwrap();
        let p = g.row_softmax(s).unwrap();
        let h = g.straight_through_select(s, p).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut g = Graph::new();
        let w = g.parameter("w", &Tensor::scalar(2.0)).unwrap();
        let w2 = g.parameter("w", &Tensor::scalar(2.0)).unwrap();
        assert_eq!(w, w2);
        let y = g.add(w, w2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().item(), Some(2.0));
    }
}
