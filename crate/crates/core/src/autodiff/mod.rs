//! Reverse-mode gradient engine over dense `f64` matrices.
//!
//! A [`Tape`] is a static graph: nodes are appended in topological order
//! (every node's inputs have smaller ids), so the graph is acyclic by
//! construction. Leaves are either data inputs or parameters; both receive
//! their values from [`Bindings`] at evaluation time, which lets one graph
//! serve every minibatch shard. A [`Session`] runs forward and backward over
//! one set of bindings.
//!
//! Every value is two-dimensional. Elementwise binary ops accept equal
//! shapes, a `1 x n` row broadcast against `m x n`, or a `1 x 1` scalar
//! against anything.

mod check;
mod session;

use std::borrow::Cow;

use ndarray::Array2;

pub use check::{finite_diff_check, finite_diff_check_with, FdOptions, FdReport};
pub use session::{Gradients, Session};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({label}) has no binding")]
    Unbound { node: usize, label: String },
    #[error("backward requested before forward")]
    State,
    #[error("tape has no loss node")]
    NoLoss,
    #[error("loss node must be 1x1, found {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Softplus,
    Log,
    Square,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Offset(f64),
    SliceCols {
        start: usize,
        end: usize,
    },
    ConcatCols,
    ConcatRows,
    /// Inverted dropout: `x * mask`, where the mask input already carries the
    /// `1/(1-p)` scaling (entries are `0` or `1/(1-p)`, or all ones at
    /// inference).
    Dropout {
        p: f64,
    },
    Sum,
    Mean,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Parameter => "parameter",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Softplus => "softplus",
            Op::Log => "log",
            Op::Square => "square",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::SliceCols { .. } => "slice",
            Op::ConcatCols => "concat_cols",
            Op::ConcatRows => "concat_rows",
            Op::Dropout { .. } => "dropout",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Parameter)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) label: String,
    pub(crate) requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: Vec<NodeId>,
    loss: Option<NodeId>,
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

    /// Parameter node ids in creation order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn set_loss(&mut self, id: NodeId) {
        self.loss = Some(id);
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn input(&mut self, label: impl Into<String>) -> NodeId {
        self.push_leaf(Op::Input, label.into(), false)
    }

    pub fn parameter(&mut self, label: impl Into<String>) -> NodeId {
        let id = self.push_leaf(Op::Parameter, label.into(), true);
        self.params.push(id);
        id
    }

    fn push_leaf(&mut self, op: Op, label: String, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            label,
            requires_grad,
        });
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        for input in &inputs {
            assert!(input.0 < id.0, "node inputs must precede the node");
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let label = op.name().to_string();
        self.nodes.push(Node {
            op,
            inputs,
            label,
            requires_grad,
        });
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        self.push(Op::LeakyRelu(alpha), vec![x])
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus, vec![x])
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log, vec![x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(c), vec![x])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        assert!(start < end, "empty column slice");
        self.push(Op::SliceCols { start, end }, vec![x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        self.push(Op::ConcatCols, parts.to_vec())
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        self.push(Op::ConcatRows, parts.to_vec())
    }

    pub fn dropout(&mut self, x: NodeId, mask: NodeId, p: f64) -> NodeId {
        assert!(
            (0.0..1.0).contains(&p),
            "dropout probability must lie in [0, 1)"
        );
        self.push(Op::Dropout { p }, vec![x, mask])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, vec![x])
    }
}

/// Values for the leaves of a tape. Borrowed values avoid copying shared
/// parameters into every shard's bindings.
#[derive(Debug, Clone)]
pub struct Bindings<'a> {
    values: Vec<Option<Cow<'a, Array2<f64>>>>,
}

impl<'a> Bindings<'a> {
    pub fn new(tape: &Tape) -> Self {
        Self {
            values: vec![None; tape.len()],
        }
    }

    pub fn bind(&mut self, id: NodeId, value: Array2<f64>) -> &mut Self {
        self.values[id.0] = Some(Cow::Owned(value));
        self
    }

    pub fn bind_ref(&mut self, id: NodeId, value: &'a Array2<f64>) -> &mut Self {
        self.values[id.0] = Some(Cow::Borrowed(value));
        self
    }

    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.values.get(id.0).and_then(|v| v.as_deref())
    }

    /// Mutable access, copying a borrowed value on first write.
    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Array2<f64>> {
        self.values
            .get_mut(id.0)
            .and_then(|v| v.as_mut())
            .map(|cow| cow.to_mut())
    }
}

/// Elementwise broadcast result shape, if the pair is compatible.
pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    if a == b || b == (1, 1) {
        Some(a)
    } else if a == (1, 1) {
        Some(b)
    } else if b.0 == 1 && b.1 == a.1 {
        Some(a)
    } else if a.0 == 1 && a.1 == b.1 {
        Some(b)
    } else {
        None
    }
}
