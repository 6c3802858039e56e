//! Define-by-run reverse-mode differentiation over dense 2-D `f64` arrays.
//!
//! A [`Graph`] is an append-only list of operation records. Building a node
//! only checks shapes; values are produced by [`Graph::forward`] from a set of
//! input [`Bindings`]. [`Graph::gradients`] appends the adjoint computation as
//! ordinary nodes, so a gradient can itself be differentiated (double
//! backprop), which is what the gradient penalty needs.
//!
//! Every array is a matrix; scalars are `1×1` and vectors are `1×n` rows.
//! The elementwise binary ops broadcast along unit dimensions.

use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

/// Dense value type used by the graph.
pub type Array = Array2<f64>;

/// Matrix dimensions of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn of(a: &ArrayView2<'_, f64>) -> Self {
        Shape::new(a.nrows(), a.ncols())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Handle to a node inside the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    id: usize,
    shape: Shape,
}

impl NodeRef {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("node {node}: {op} shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node}: input is not bound")]
    UnboundInput { node: usize },
    #[error("node {node}: binding has shape {got}, input declared {expected}")]
    BindingShape {
        node: usize,
        expected: Shape,
        got: Shape,
    },
    #[error("node {node}: not an input node")]
    NotAnInput { node: usize },
    #[error("node {node}: differentiated output must be 1x1, got {shape}")]
    NonScalarOutput { node: usize, shape: Shape },
    #[error("node {node} does not belong to this graph")]
    UnknownNode { node: usize },
    #[error("node {node}: gather index {index} out of range for {rows} rows")]
    IndexOutOfRange {
        node: usize,
        index: usize,
        rows: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Piecewise-constant masks used to express the derivatives of the kinked ops.
#[derive(Clone, Copy, Debug, PartialEq)]
enum MaskKind {
    /// 1 where x > 0, `slope` elsewhere (so the subgradient at 0 is `slope`).
    Leaky(f64),
    /// 1 where lo <= x <= hi, 0 elsewhere.
    Between(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant(Array),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise a / b with 0 wherever b == 0.
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Concat(usize, usize),
    SliceCols { src: usize, start: usize },
    PadCols { src: usize, start: usize },
    Relu(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    Mask(usize, MaskKind),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    RowNorm(usize),
    LogSumExpRows(usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    SumTo(usize),
    BroadcastTo(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::Mask(..) => "mask",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowNorm(..) => "row_norm",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Input | Op::Constant(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Concat(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Transpose(a)
            | Op::SliceCols { src: a, .. }
            | Op::PadCols { src: a, .. }
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Clamp(a, _, _)
            | Op::Mask(a, _)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorm(a)
            | Op::LogSumExpRows(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::SumTo(a)
            | Op::BroadcastTo(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Shape,
}

/// Append-only record of a differentiable computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Values bound to the graph's input nodes for one evaluation.
#[derive(Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<usize, ArrayView2<'a, f64>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, node: NodeRef, value: &'a Array) -> &mut Self {
        self.values.insert(node.id, value.view());
        self
    }

    pub fn bind_view(&mut self, node: NodeRef, value: ArrayView2<'a, f64>) -> &mut Self {
        self.values.insert(node.id, value);
        self
    }
}

/// Evaluated value of every node in a graph.
#[derive(Debug)]
pub struct Values<'a> {
    slots: Vec<Slot<'a>>,
}

#[derive(Debug)]
enum Slot<'a> {
    Bound(ArrayView2<'a, f64>),
    Owned(Array),
    Constant(usize),
}

impl<'a> Values<'a> {
    pub fn get(&self, node: NodeRef) -> ArrayView2<'_, f64> {
        self.view(node.id)
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, node: NodeRef) -> f64 {
        self.view(node.id)[[0, 0]]
    }

    pub fn to_owned(&self, node: NodeRef) -> Array {
        self.get(node).to_owned()
    }

    fn view(&self, id: usize) -> ArrayView2<'_, f64> {
        match &self.slots[id] {
            Slot::Bound(v) => v.view(),
            Slot::Owned(a) => a.view(),
            Slot::Constant(_) => unreachable!("constant slots are resolved at evaluation"),
        }
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some(Shape::new(dim(a.rows, b.rows)?, dim(a.cols, b.cols)?))
}

fn reducible(from: Shape, to: Shape) -> bool {
    (to.rows == from.rows || to.rows == 1) && (to.cols == from.cols || to.cols == 1)
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

    /// Name of the operation that produced `node`, for diagnostics.
    pub fn op_name(&self, node: NodeRef) -> &'static str {
        self.nodes.get(node.id).map_or("unknown", |n| n.op.name())
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeRef {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        NodeRef { id, shape }
    }

    fn check(&self, node: NodeRef) -> Result<()> {
        match self.nodes.get(node.id) {
            Some(n) if n.shape == node.shape => Ok(()),
            _ => Err(AutodiffError::UnknownNode { node: node.id }),
        }
    }

    fn mismatch(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    pub fn input(&mut self, shape: Shape) -> NodeRef {
        self.push(Op::Input, shape)
    }

    pub fn constant(&mut self, value: Array) -> NodeRef {
        let shape = Shape::of(&value.view());
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeRef {
        self.constant(Array::from_elem((1, 1), value))
    }

    fn binary(&mut self, a: NodeRef, b: NodeRef, name: &'static str) -> Result<Shape> {
        self.check(a)?;
        self.check(b)?;
        broadcast_shape(a.shape, b.shape)
            .ok_or_else(|| self.mismatch(name, format!("{} vs {}", a.shape, b.shape)))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let shape = self.binary(a, b, "add")?;
        Ok(self.push(Op::Add(a.id, b.id), shape))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let shape = self.binary(a, b, "sub")?;
        Ok(self.push(Op::Sub(a.id, b.id), shape))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let shape = self.binary(a, b, "mul")?;
        Ok(self.push(Op::Mul(a.id, b.id), shape))
    }

    /// Elementwise quotient; entries with a zero denominator evaluate to 0.
    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let shape = self.binary(a, b, "div")?;
        Ok(self.push(Op::Div(a.id, b.id), shape))
    }

    pub fn scale(&mut self, a: NodeRef, k: f64) -> Result<NodeRef> {
        self.check(a)?;
        Ok(self.push(Op::Scale(a.id, k), a.shape))
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.scale(a, -1.0)
    }

    /// Adds the constant `k` to every entry.
    pub fn offset(&mut self, a: NodeRef, k: f64) -> Result<NodeRef> {
        self.check(a)?;
        Ok(self.push(Op::Offset(a.id, k), a.shape))
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        if a.shape.cols != b.shape.rows {
            return Err(self.mismatch("matmul", format!("{} x {}", a.shape, b.shape)));
        }
        Ok(self.push(
            Op::MatMul(a.id, b.id),
            Shape::new(a.shape.rows, b.shape.cols),
        ))
    }

    pub fn transpose(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        Ok(self.push(Op::Transpose(a.id), Shape::new(a.shape.cols, a.shape.rows)))
    }

    /// Concatenation along the last axis (columns).
    pub fn concat(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        if a.shape.rows != b.shape.rows {
            return Err(self.mismatch("concat", format!("{} | {}", a.shape, b.shape)));
        }
        Ok(self.push(
            Op::Concat(a.id, b.id),
            Shape::new(a.shape.rows, a.shape.cols + b.shape.cols),
        ))
    }

    pub fn slice_cols(&mut self, a: NodeRef, start: usize, len: usize) -> Result<NodeRef> {
        self.check(a)?;
        if start + len > a.shape.cols {
            return Err(self.mismatch(
                "slice_cols",
                format!("[{start}, {}) of {}", start + len, a.shape),
            ));
        }
        Ok(self.push(
            Op::SliceCols { src: a.id, start },
            Shape::new(a.shape.rows, len),
        ))
    }

    /// Places `a` at column `start` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: NodeRef, start: usize, total: usize) -> Result<NodeRef> {
        self.check(a)?;
        if start + a.shape.cols > total {
            return Err(self.mismatch(
                "pad_cols",
                format!("{} at column {start} exceeds {total}", a.shape),
            ));
        }
        Ok(self.push(
            Op::PadCols { src: a.id, start },
            Shape::new(a.shape.rows, total),
        ))
    }

    fn unary(&mut self, a: NodeRef, op: Op) -> Result<NodeRef> {
        self.check(a)?;
        Ok(self.push(op, a.shape))
    }

    pub fn relu(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(a, Op::Relu(a.id))
    }

    pub fn leaky_relu(&mut self, a: NodeRef, slope: f64) -> Result<NodeRef> {
        self.unary(a, Op::LeakyRelu(a.id, slope))
    }

    pub fn clamp(&mut self, a: NodeRef, lo: f64, hi: f64) -> Result<NodeRef> {
        self.unary(a, Op::Clamp(a.id, lo, hi))
    }

    pub fn sigmoid(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(a, Op::Sigmoid(a.id))
    }

    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(a, Op::Log(a.id))
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(a, Op::Exp(a.id))
    }

    pub fn square(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(a, Op::Square(a.id))
    }

    pub fn sqrt(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(a, Op::Sqrt(a.id))
    }

    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a.id), Shape::SCALAR))
    }

    pub fn mean(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        if a.shape.is_empty() {
            return Err(self.mismatch("mean", format!("empty operand {}", a.shape)));
        }
        Ok(self.push(Op::Mean(a.id), Shape::SCALAR))
    }

    /// Euclidean norm of each row, `B×n -> B×1`.
    pub fn row_norm(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        Ok(self.push(Op::RowNorm(a.id), Shape::new(a.shape.rows, 1)))
    }

    /// Stabilised `log Σ exp` of each row, `B×n -> B×1`.
    pub fn logsumexp_rows(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        if a.shape.cols == 0 {
            return Err(self.mismatch("logsumexp_rows", "zero columns".into()));
        }
        Ok(self.push(Op::LogSumExpRows(a.id), Shape::new(a.shape.rows, 1)))
    }

    pub fn gather_rows(&mut self, a: NodeRef, indices: &[usize]) -> Result<NodeRef> {
        self.check(a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.shape.rows) {
            return Err(AutodiffError::IndexOutOfRange {
                node: self.nodes.len(),
                index: bad,
                rows: a.shape.rows,
            });
        }
        Ok(self.push(
            Op::GatherRows(a.id, indices.to_vec()),
            Shape::new(indices.len(), a.shape.cols),
        ))
    }

    /// Adjoint of `gather_rows`: row `k` of `a` is added into row `indices[k]`.
    pub fn scatter_rows(&mut self, a: NodeRef, indices: &[usize], rows: usize) -> Result<NodeRef> {
        self.check(a)?;
        if indices.len() != a.shape.rows {
            return Err(self.mismatch(
                "scatter_rows",
                format!("{} indices for {}", indices.len(), a.shape),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange {
                node: self.nodes.len(),
                index: bad,
                rows,
            });
        }
        Ok(self.push(
            Op::ScatterRows(a.id, indices.to_vec()),
            Shape::new(rows, a.shape.cols),
        ))
    }

    /// Sums over the axes where `shape` has extent 1.
    pub fn sum_to(&mut self, a: NodeRef, shape: Shape) -> Result<NodeRef> {
        self.check(a)?;
        if !reducible(a.shape, shape) {
            return Err(self.mismatch("sum_to", format!("{} to {}", a.shape, shape)));
        }
        Ok(self.push(Op::SumTo(a.id), shape))
    }

    pub fn broadcast_to(&mut self, a: NodeRef, shape: Shape) -> Result<NodeRef> {
        self.check(a)?;
        if !reducible(shape, a.shape) {
            return Err(self.mismatch("broadcast_to", format!("{} to {}", a.shape, shape)));
        }
        Ok(self.push(Op::BroadcastTo(a.id), shape))
    }

    fn mask(&mut self, a: usize, kind: MaskKind) -> NodeRef {
        let shape = self.nodes[a].shape;
        self.push(Op::Mask(a, kind), shape)
    }

    fn node_ref(&self, id: usize) -> NodeRef {
        NodeRef {
            id,
            shape: self.nodes[id].shape,
        }
    }

    /// Evaluates every node. Inputs must all be bound with matching shapes.
    pub fn forward<'s, 'a: 's>(&'s self, bindings: &Bindings<'a>) -> Result<Values<'s>> {
        let mut slots: Vec<Slot<'s>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let slot = match &node.op {
                Op::Input => {
                    let v = bindings
                        .values
                        .get(&id)
                        .ok_or(AutodiffError::UnboundInput { node: id })?;
                    let got = Shape::of(v);
                    if got != node.shape {
                        return Err(AutodiffError::BindingShape {
                            node: id,
                            expected: node.shape,
                            got,
                        });
                    }
                    Slot::Bound(v.clone())
                }
                Op::Constant(_) => Slot::Constant(id),
                op => Slot::Owned(self.eval(op, node.shape, &slots)),
            };
            slots.push(slot);
        }
        // Resolve constants to borrowed views of the stored arrays.
        for slot in slots.iter_mut() {
            if let Slot::Constant(id) = *slot {
                if let Op::Constant(a) = &self.nodes[id].op {
                    *slot = Slot::Bound(a.view());
                }
            }
        }
        Ok(Values { slots })
    }

    fn eval(&self, op: &Op, shape: Shape, slots: &[Slot<'_>]) -> Array {
        let get = |id: usize| -> ArrayView2<'_, f64> {
            match &slots[id] {
                Slot::Bound(v) => v.view(),
                Slot::Owned(a) => a.view(),
                Slot::Constant(c) => match &self.nodes[*c].op {
                    Op::Constant(a) => a.view(),
                    _ => unreachable!(),
                },
            }
        };
        let zip2 = |a: usize, b: usize, f: &dyn Fn(f64, f64) -> f64| -> Array {
            let av = get(a);
            let bv = get(b);
            let av = av.broadcast(shape.dims()).expect("checked at build");
            let bv = bv.broadcast(shape.dims()).expect("checked at build");
            let mut out = Array::zeros(shape.dims());
            Zip::from(&mut out)
                .and(&av)
                .and(&bv)
                .for_each(|o, &x, &y| *o = f(x, y));
            out
        };
        match *op {
            Op::Input | Op::Constant(_) => unreachable!(),
            Op::Add(a, b) => zip2(a, b, &|x, y| x + y),
            Op::Sub(a, b) => zip2(a, b, &|x, y| x - y),
            Op::Mul(a, b) => zip2(a, b, &|x, y| x * y),
            Op::Div(a, b) => zip2(a, b, &|x, y| if y == 0.0 { 0.0 } else { x / y }),
            Op::Scale(a, k) => get(a).mapv(|x| x * k),
            Op::Offset(a, k) => get(a).mapv(|x| x + k),
            Op::MatMul(a, b) => get(a).dot(&get(b)),
            Op::Transpose(a) => get(a).t().to_owned(),
            Op::Concat(a, b) => {
                ndarray::concatenate(Axis(1), &[get(a), get(b)]).expect("checked at build")
            }
            Op::SliceCols { src, start } => {
                get(src).slice(s![.., start..start + shape.cols]).to_owned()
            }
            Op::PadCols { src, start } => {
                let v = get(src);
                let mut out = Array::zeros(shape.dims());
                out.slice_mut(s![.., start..start + v.ncols()]).assign(&v);
                out
            }
            Op::Relu(a) => get(a).mapv(|x| if x > 0.0 { x } else { 0.0 }),
            Op::LeakyRelu(a, k) => get(a).mapv(|x| if x > 0.0 { x } else { k * x }),
            Op::Clamp(a, lo, hi) => get(a).mapv(|x| x.max(lo).min(hi)),
            Op::Mask(a, MaskKind::Leaky(k)) => get(a).mapv(|x| if x > 0.0 { 1.0 } else { k }),
            Op::Mask(a, MaskKind::Between(lo, hi)) => {
                get(a).mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
            }
            Op::Sigmoid(a) => get(a).mapv(sigmoid),
            Op::Log(a) => get(a).mapv(f64::ln),
            Op::Exp(a) => get(a).mapv(f64::exp),
            Op::Square(a) => get(a).mapv(|x| x * x),
            Op::Sqrt(a) => get(a).mapv(f64::sqrt),
            Op::Sum(a) => Array::from_elem((1, 1), get(a).sum()),
            Op::Mean(a) => {
                let v = get(a);
                Array::from_elem((1, 1), v.sum() / v.len() as f64)
            }
            Op::RowNorm(a) => {
                let v = get(a);
                let mut out = Array::zeros(shape.dims());
                for (o, row) in out.iter_mut().zip(v.rows()) {
                    *o = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                }
                out
            }
            Op::LogSumExpRows(a) => {
                let v = get(a);
                let mut out = Array::zeros(shape.dims());
                for (o, row) in out.iter_mut().zip(v.rows()) {
                    *o = logsumexp(row.iter().copied());
                }
                out
            }
            Op::GatherRows(a, ref idx) => get(a).select(Axis(0), idx),
            Op::ScatterRows(a, ref idx) => {
                let v = get(a);
                let mut out = Array::zeros(shape.dims());
                for (row, &i) in v.rows().into_iter().zip(idx) {
                    let mut target = out.row_mut(i);
                    target += &row;
                }
                out
            }
            Op::SumTo(a) => {
                let v = get(a);
                let mut out = v.to_owned();
                if shape.rows == 1 && v.nrows() != 1 {
                    out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
                }
                if shape.cols == 1 && v.ncols() != 1 {
                    out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
                }
                out
            }
            Op::BroadcastTo(a) => get(a)
                .broadcast(shape.dims())
                .expect("checked at build")
                .to_owned(),
        }
    }

    /// Appends nodes computing `∂output/∂wrt[i]` and returns them.
    ///
    /// The returned nodes are ordinary graph nodes and may be differentiated
    /// again. A `wrt` node that `output` does not depend on gets a zero node.
    pub fn gradients(&mut self, output: NodeRef, wrt: &[NodeRef]) -> Result<Vec<NodeRef>> {
        self.check(output)?;
        for w in wrt {
            self.check(*w)?;
        }
        if output.shape != Shape::SCALAR {
            return Err(AutodiffError::NonScalarOutput {
                node: output.id,
                shape: output.shape,
            });
        }
        let n = output.id + 1;
        // Nodes whose value depends on at least one wrt node.
        let mut live = vec![false; n];
        for w in wrt {
            if w.id < n {
                live[w.id] = true;
            }
        }
        for id in 0..n {
            if !live[id] && self.nodes[id].op.inputs().iter().any(|&i| live[i]) {
                live[id] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeRef>> = vec![None; n];
        if live[output.id] {
            adjoint[output.id] = Some(self.scalar(1.0));
        }
        for id in (0..n).rev() {
            let Some(g) = adjoint[id] else { continue };
            if !live[id] {
                continue;
            }
            let op = match &self.nodes[id].op {
                Op::Input | Op::Constant(_) => continue,
                op => op.clone(),
            };
            for (input, contrib) in self.vjp(id, &op, g, &live)? {
                adjoint[input] = Some(match adjoint[input] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Array::zeros(w.shape.dims()))),
            })
            .collect()
    }

    fn reduce(&mut self, g: NodeRef, target: usize) -> Result<NodeRef> {
        let shape = self.nodes[target].shape;
        if g.shape == shape {
            Ok(g)
        } else {
            self.sum_to(g, shape)
        }
    }

    /// Vector-Jacobian products of node `id` with adjoint `g`, for live inputs.
    fn vjp(
        &mut self,
        id: usize,
        op: &Op,
        g: NodeRef,
        live: &[bool],
    ) -> Result<Vec<(usize, NodeRef)>> {
        let out = self.node_ref(id);
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Input | Op::Constant(_) | Op::Mask(..) => {}
            Op::Add(a, b) => {
                if live[a] {
                    res.push((a, self.reduce(g, a)?));
                }
                if live[b] {
                    res.push((b, self.reduce(g, b)?));
                }
            }
            Op::Sub(a, b) => {
                if live[a] {
                    res.push((a, self.reduce(g, a)?));
                }
                if live[b] {
                    let ng = self.neg(g)?;
                    res.push((b, self.reduce(ng, b)?));
                }
            }
            Op::Mul(a, b) => {
                let (an, bn) = (self.node_ref(a), self.node_ref(b));
                if live[a] {
                    let t = self.mul(g, bn)?;
                    res.push((a, self.reduce(t, a)?));
                }
                if live[b] {
                    let t = self.mul(g, an)?;
                    res.push((b, self.reduce(t, b)?));
                }
            }
            Op::Div(a, b) => {
                let bn = self.node_ref(b);
                if live[a] {
                    let t = self.div(g, bn)?;
                    res.push((a, self.reduce(t, a)?));
                }
                if live[b] {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g, out)?;
                    let t = self.div(t, bn)?;
                    let t = self.neg(t)?;
                    res.push((b, self.reduce(t, b)?));
                }
            }
            Op::Scale(a, k) => res.push((a, self.scale(g, k)?)),
            Op::Offset(a, _) => res.push((a, g)),
            Op::MatMul(a, b) => {
                let (an, bn) = (self.node_ref(a), self.node_ref(b));
                if live[a] {
                    let bt = self.transpose(bn)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if live[b] {
                    let at = self.transpose(an)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::Concat(a, b) => {
                let ca = self.nodes[a].shape.cols;
                let cb = self.nodes[b].shape.cols;
                if live[a] {
                    res.push((a, self.slice_cols(g, 0, ca)?));
                }
                if live[b] {
                    res.push((b, self.slice_cols(g, ca, cb)?));
                }
            }
            Op::SliceCols { src, start } => {
                let total = self.nodes[src].shape.cols;
                res.push((src, self.pad_cols(g, start, total)?));
            }
            Op::PadCols { src, start } => {
                let len = self.nodes[src].shape.cols;
                res.push((src, self.slice_cols(g, start, len)?));
            }
            Op::Relu(a) => {
                let m = self.mask(a, MaskKind::Leaky(0.0));
                res.push((a, self.mul(g, m)?));
            }
            Op::LeakyRelu(a, k) => {
                let m = self.mask(a, MaskKind::Leaky(k));
                res.push((a, self.mul(g, m)?));
            }
            Op::Clamp(a, lo, hi) => {
                let m = self.mask(a, MaskKind::Between(lo, hi));
                res.push((a, self.mul(g, m)?));
            }
            Op::Sigmoid(a) => {
                // σ' = σ(1-σ)
                let one_minus = self.neg(out)?;
                let one_minus = self.offset(one_minus, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Log(a) => {
                let an = self.node_ref(a);
                res.push((a, self.div(g, an)?));
            }
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Square(a) => {
                let an = self.node_ref(a);
                let two_a = self.scale(an, 2.0)?;
                res.push((a, self.mul(g, two_a)?));
            }
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5)?;
                res.push((a, self.div(half, out)?));
            }
            Op::Sum(a) => {
                let shape = self.nodes[a].shape;
                res.push((a, self.broadcast_to(g, shape)?));
            }
            Op::Mean(a) => {
                let shape = self.nodes[a].shape;
                let b = self.broadcast_to(g, shape)?;
                res.push((a, self.scale(b, 1.0 / shape.len() as f64)?));
            }
            Op::RowNorm(a) => {
                // x / ‖x‖, taken as 0 on zero rows
                let an = self.node_ref(a);
                let unit = self.div(an, out)?;
                res.push((a, self.mul(g, unit)?));
            }
            Op::LogSumExpRows(a) => {
                let an = self.node_ref(a);
                let shifted = self.sub(an, out)?;
                let softmax = self.exp(shifted)?;
                res.push((a, self.mul(g, softmax)?));
            }
            Op::GatherRows(a, ref idx) => {
                let rows = self.nodes[a].shape.rows;
                res.push((a, self.scatter_rows(g, idx, rows)?));
            }
            Op::ScatterRows(a, ref idx) => res.push((a, self.gather_rows(g, idx)?)),
            Op::SumTo(a) => {
                let shape = self.nodes[a].shape;
                res.push((a, self.broadcast_to(g, shape)?));
            }
            Op::BroadcastTo(a) => res.push((a, self.reduce(g, a)?)),
        }
        Ok(res)
    }

    /// Compares the analytic gradient of `output` w.r.t. the input node `wrt`
    /// with central differences and returns the largest relative error.
    ///
    /// Each component is perturbed by `step * max(1, |w|)`; the relative
    /// error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
    pub fn check_gradient(
        &mut self,
        output: NodeRef,
        wrt: NodeRef,
        bindings: &Bindings<'_>,
        step: f64,
    ) -> Result<f64> {
        if !matches!(self.nodes.get(wrt.id).map(|n| &n.op), Some(Op::Input)) {
            return Err(AutodiffError::NotAnInput { node: wrt.id });
        }
        let base = bindings
            .values
            .get(&wrt.id)
            .ok_or(AutodiffError::UnboundInput { node: wrt.id })?
            .to_owned();
        let grad_node = self.gradients(output, &[wrt])?[0];
        let analytic = {
            let b = rebind(bindings, wrt, &base);
            self.forward(&b)?.to_owned(grad_node)
        };
        fn eval_at(
            graph: &Graph,
            bindings: &Bindings<'_>,
            wrt: NodeRef,
            point: &Array,
            output: NodeRef,
        ) -> Result<f64> {
            let b = rebind(bindings, wrt, point);
            Ok(graph.forward(&b)?.scalar(output))
        }
        let mut worst = 0.0f64;
        let mut point = base.clone();
        for (idx, &w) in base.indexed_iter() {
            let h = step * w.abs().max(1.0);
            point[idx] = w + h;
            let up = eval_at(self, bindings, wrt, &point, output)?;
            point[idx] = w - h;
            let down = eval_at(self, bindings, wrt, &point, output)?;
            point[idx] = w;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        Ok(worst)
    }
}

fn rebind<'b>(bindings: &'b Bindings<'_>, node: NodeRef, value: &'b Array) -> Bindings<'b> {
    let mut values: HashMap<usize, ArrayView2<'b, f64>> = bindings
        .values
        .iter()
        .map(|(&k, v)| (k, v.view()))
        .collect();
    values.insert(node.id, value.view());
    Bindings { values }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}
