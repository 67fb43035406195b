//! Define-then-run computation record with reverse-mode differentiation.
//!
//! Nodes are appended in topological order by construction: every builder
//! method takes already-existing [`NodeId`]s. Shapes are inferred and checked
//! while building, values are computed by [`Graph::forward`], and
//! [`Graph::backward`] returns adjoints for every parameter node.
//!
//! The primitive set is closed: matmul, add (with an optional 1×n row
//! broadcast for biases), tanh, row softmax, column concatenation, row and
//! column slices, scalar multiply, per-row scaling, mean, mean squared error
//! and elementwise min.

use super::matrix::gemm_into;
use super::{Matrix, NumericsError, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols { src: NodeId, start: usize, len: usize },
    SliceRows { src: NodeId, start: usize, len: usize },
    Scale(NodeId, T),
    ScaleRows(NodeId, NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    Min(NodeId, NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Tanh(..) => "tanh",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::Min(..) => "min",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: (usize, usize),
    requires_grad: bool,
    value: Option<Matrix<T>>,
}

/// A computation record: ordered primitive nodes, cached values, and the
/// parameter leaves gradients are reported for.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    evaluated: bool,
}

/// Adjoints of the parameter nodes of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a parameter node; `None` for constants and interior nodes.
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoints for a list of parameter nodes, in the given order.
    pub fn collect(&self, ids: &[NodeId]) -> Result<Vec<Matrix<T>>, NumericsError> {
        ids.iter()
            .map(|&id| self.get(id).cloned().ok_or(NumericsError::NotAParameter { node: id.0 }))
            .collect()
    }

    /// Number of nodes that carry an adjoint.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    /// Cached value of a node; leaves always have one, interior nodes only after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&Matrix<T>> {
        let node = self.nodes.get(id.0)?;
        match node.op {
            Op::Constant | Op::Param => node.value.as_ref(),
            _ if self.evaluated => node.value.as_ref(),
            _ => None,
        }
    }

    /// Ids of all parameter leaves in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn leaf(&mut self, value: Matrix<T>, param: bool) -> Result<NodeId, NumericsError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteInput { node });
        }
        self.nodes.push(Node {
            op: if param { Op::Param } else { Op::Constant },
            shape: value.shape(),
            requires_grad: param,
            value: Some(value),
        });
        self.evaluated = false;
        Ok(NodeId(node))
    }

    /// A leaf that receives no adjoint.
    pub fn constant(&mut self, value: Matrix<T>) -> Result<NodeId, NumericsError> {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Result<NodeId, NumericsError> {
        self.leaf(value, true)
    }

    /// Replaces the value of a leaf; cached interior values become stale.
    pub fn set_value(&mut self, id: NodeId, value: Matrix<T>) -> Result<(), NumericsError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Constant | Op::Param) {
            return Err(NumericsError::NotALeaf { node: id.0 });
        }
        if value.shape() != node.shape {
            return Err(NumericsError::NodeShape {
                node: id.0,
                op: "set_value",
                left: node.shape,
                right: value.shape(),
            });
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteInput { node: id.0 });
        }
        node.value = Some(value);
        self.evaluated = false;
        Ok(())
    }

    fn push(&mut self, op: Op<T>, shape: (usize, usize)) -> NodeId {
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
            value: None,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Constant | Op::Param => vec![],
            Op::Tanh(a) | Op::SoftmaxRows(a) | Op::Scale(a, _) | Op::Mean(a) => vec![*a],
            Op::SliceCols { src, .. } | Op::SliceRows { src, .. } => vec![*src],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::ScaleRows(a, b) | Op::Mse(a, b) | Op::Min(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(parts) => parts.clone(),
        }
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> NumericsError {
        NumericsError::NodeShape {
            node: self.nodes.len(),
            op,
            left: self.shape(a),
            right: self.shape(b),
        }
    }

    fn check(&self, id: NodeId) -> Result<(), NumericsError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericsError::UnknownNode { node: id.0 })
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(self.mismatch("matmul", a, b));
        }
        Ok(self.push(Op::MatMul(a, b), (ar, bc)))
    }

    /// Elementwise sum. `b` may also be a `1×cols` row, added to every row of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb && !(sb.0 == 1 && sb.1 == sa.1) {
            return Err(self.mismatch("add", a, b));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        let s = self.shape(a);
        Ok(self.push(Op::Tanh(a), s))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        let s = self.shape(a);
        if s.1 == 0 {
            return Err(self.mismatch("softmax_rows", a, a));
        }
        Ok(self.push(Op::SoftmaxRows(a), s))
    }

    /// Joins nodes with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyConcat)?;
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
            cols += self.shape(p).1;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), (rows, cols)))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        self.check(src)?;
        let (r, c) = self.shape(src);
        if start + len > c {
            return Err(NumericsError::NodeShape {
                node: self.nodes.len(),
                op: "slice_cols",
                left: (r, c),
                right: (start, len),
            });
        }
        Ok(self.push(Op::SliceCols { src, start, len }, (r, len)))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        self.check(src)?;
        let (r, c) = self.shape(src);
        if start + len > r {
            return Err(NumericsError::NodeShape {
                node: self.nodes.len(),
                op: "slice_rows",
                left: (r, c),
                right: (start, len),
            });
        }
        Ok(self.push(Op::SliceRows { src, start, len }, (len, c)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        if !factor.is_finite() {
            return Err(NumericsError::NonFiniteInput { node: self.nodes.len() });
        }
        let s = self.shape(a);
        Ok(self.push(Op::Scale(a, factor), s))
    }

    /// Multiplies row `i` of `a` by `w[i]`, where `w` is a column vector.
    pub fn scale_rows(&mut self, a: NodeId, w: NodeId) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        self.check(w)?;
        let sa = self.shape(a);
        if self.shape(w) != (sa.0, 1) {
            return Err(self.mismatch("scale_rows", a, w));
        }
        Ok(self.push(Op::ScaleRows(a, w), sa))
    }

    /// Mean over all elements, as a 1×1 node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        if self.nodes[a.0].shape.0 * self.nodes[a.0].shape.1 == 0 {
            return Err(self.mismatch("mean", a, a));
        }
        Ok(self.push(Op::Mean(a), (1, 1)))
    }

    /// `mean((pred - target)^2)` as a 1×1 node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, NumericsError> {
        self.check(pred)?;
        self.check(target)?;
        let s = self.shape(pred);
        if s != self.shape(target) || s.0 * s.1 == 0 {
            return Err(self.mismatch("mse", pred, target));
        }
        Ok(self.push(Op::Mse(pred, target), (1, 1)))
    }

    /// Elementwise minimum; on ties the adjoint goes to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("min", a, b));
        }
        let s = self.shape(a);
        Ok(self.push(Op::Min(a, b), s))
    }

    fn val(&self, id: NodeId) -> &Matrix<T> {
        self.nodes[id.0].value.as_ref().expect("input evaluated before consumer")
    }

    /// Evaluates every node in order and returns the value of the last one.
    pub fn forward(&mut self) -> Result<&Matrix<T>, NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::EmptyGraph);
        }
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Constant | Op::Param => continue,
                op => self.eval(op)?,
            };
            if !value.is_finite() {
                return Err(NumericsError::NonFiniteValue {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        self.evaluated = true;
        Ok(self.nodes.last().and_then(|n| n.value.as_ref()).expect("evaluated"))
    }

    fn eval(&self, op: &Op<T>) -> Result<Matrix<T>, NumericsError> {
        Ok(match op {
            Op::Constant | Op::Param => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mut out = Matrix::zeros(a.rows(), b.cols());
                gemm_into(a, false, b, false, &mut out, false);
                out
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mut out = a.clone();
                if a.shape() == b.shape() {
                    for (o, &x) in out.data_mut().iter_mut().zip(b.data()) {
                        *o += x;
                    }
                } else {
                    let cols = a.cols();
                    for row in out.data_mut().chunks_mut(cols) {
                        for (o, &x) in row.iter_mut().zip(b.data()) {
                            *o += x;
                        }
                    }
                }
                out
            }
            Op::Tanh(a) => self.val(*a).map(|x| x.tanh()),
            Op::SoftmaxRows(a) => softmax_rows(self.val(*a)),
            Op::ConcatCols(parts) => {
                let rows = self.val(parts[0]).rows();
                let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.val(*p).row(r));
                    }
                }
                Matrix::new(rows, cols, data)?
            }
            Op::SliceCols { src, start, len } => {
                let m = self.val(*src);
                Matrix::from_fn(m.rows(), *len, |r, c| m.get(r, start + c))
            }
            Op::SliceRows { src, start, len } => {
                let m = self.val(*src);
                let cols = m.cols();
                Matrix::new(*len, cols, m.data()[start * cols..(start + len) * cols].to_vec())?
            }
            Op::Scale(a, f) => self.val(*a).map(|x| x * *f),
            Op::ScaleRows(a, w) => {
                let (a, w) = (self.val(*a), self.val(*w));
                Matrix::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * w.data()[r])
            }
            Op::Mean(a) => {
                let a = self.val(*a);
                Matrix::scalar(a.data().iter().copied().sum::<T>() / T::lit(a.len() as f64))
            }
            Op::Mse(p, t) => {
                let (p, t) = (self.val(*p), self.val(*t));
                let sum: T = p.data().iter().zip(t.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
                Matrix::scalar(sum / T::lit(p.len() as f64))
            }
            Op::Min(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if y < x { y } else { x }).collect();
                Matrix::new(a.rows(), a.cols(), data)?
            }
        })
    }

    /// Scalar value of `root` after `forward`.
    pub fn scalar(&self, root: NodeId) -> Result<T, NumericsError> {
        let v = self.value(root).ok_or(NumericsError::NotEvaluated)?;
        v.item().ok_or(NumericsError::NonScalarRoot { shape: v.shape() })
    }

    /// Adjoints of `root` with respect to every parameter node.
    ///
    /// Parameters that `root` does not depend on get a zero adjoint. Adjoints of
    /// nodes consumed more than once accumulate additively.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, NumericsError> {
        self.check(root)?;
        if !self.evaluated {
            return Err(NumericsError::NotEvaluated);
        }
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarRoot { shape });
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; n];
        adj[root.0] = Some(Matrix::scalar(T::one()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
        }

        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(node.shape.0, node.shape.1));
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, adj: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bv = self.val(*b);
                    let slot = slot(adj, *a, self.shape(*a));
                    gemm_into(g, false, bv, true, slot, true);
                }
                if self.wants(*b) {
                    let av = self.val(*a);
                    let slot = slot(adj, *b, self.shape(*b));
                    gemm_into(av, true, g, false, slot, true);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    slot(adj, *a, self.shape(*a)).axpy(T::one(), g);
                }
                if self.wants(*b) {
                    let sb = self.shape(*b);
                    let s = slot(adj, *b, sb);
                    if sb == g.shape() {
                        s.axpy(T::one(), g);
                    } else {
                        let cols = g.cols();
                        for row in g.data().chunks(cols) {
                            for (o, &x) in s.data_mut().iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let y = node.value.as_ref().expect("evaluated");
                    let s = slot(adj, *a, self.shape(*a));
                    for ((o, &gy), &yv) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gy * (T::one() - yv * yv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let y = node.value.as_ref().expect("evaluated");
                    let cols = y.cols();
                    let s = slot(adj, *a, self.shape(*a));
                    for ((srow, grow), yrow) in s
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(g.data().chunks(cols))
                        .zip(y.data().chunks(cols))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((o, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if self.wants(*p) {
                        let s = slot(adj, *p, (rows, cols));
                        for r in 0..rows {
                            let src = &g.data()[r * total + offset..r * total + offset + cols];
                            for (o, &x) in s.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { src, start, len } => {
                if self.wants(*src) {
                    let (rows, cols) = self.shape(*src);
                    let s = slot(adj, *src, (rows, cols));
                    for r in 0..rows {
                        for c in 0..*len {
                            s.data_mut()[r * cols + start + c] += g.get(r, c);
                        }
                    }
                }
            }
            Op::SliceRows { src, start, len } => {
                if self.wants(*src) {
                    let cols = self.shape(*src).1;
                    let s = slot(adj, *src, self.shape(*src));
                    for (o, &x) in s.data_mut()[start * cols..(start + len) * cols].iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    slot(adj, *a, self.shape(*a)).axpy(*f, g);
                }
            }
            Op::ScaleRows(a, w) => {
                let (av, wv) = (self.val(*a), self.val(*w));
                let cols = av.cols();
                if self.wants(*a) {
                    let s = slot(adj, *a, self.shape(*a));
                    for (r, (srow, grow)) in s.data_mut().chunks_mut(cols).zip(g.data().chunks(cols)).enumerate() {
                        let wr = wv.data()[r];
                        for (o, &gv) in srow.iter_mut().zip(grow) {
                            *o += gv * wr;
                        }
                    }
                }
                if self.wants(*w) {
                    let s = slot(adj, *w, self.shape(*w));
                    for (r, (grow, arow)) in g.data().chunks(cols).zip(av.data().chunks(cols)).enumerate() {
                        let dot: T = grow.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                        s.data_mut()[r] += dot;
                    }
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let s = slot(adj, *a, self.shape(*a));
                    let share = g.data()[0] / T::lit(s.len() as f64);
                    for o in s.data_mut() {
                        *o += share;
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.val(*p), self.val(*t));
                let k = T::lit(2.0) * g.data()[0] / T::lit(pv.len() as f64);
                if self.wants(*p) {
                    let s = slot(adj, *p, self.shape(*p));
                    for ((o, &x), &y) in s.data_mut().iter_mut().zip(pv.data()).zip(tv.data()) {
                        *o += k * (x - y);
                    }
                }
                if self.wants(*t) {
                    let s = slot(adj, *t, self.shape(*t));
                    for ((o, &x), &y) in s.data_mut().iter_mut().zip(pv.data()).zip(tv.data()) {
                        *o -= k * (x - y);
                    }
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let s = slot(adj, *a, self.shape(*a));
                    for (((o, &gv), &x), &y) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()).zip(bv.data()) {
                        if x <= y {
                            *o += gv;
                        }
                    }
                }
                if self.wants(*b) {
                    let s = slot(adj, *b, self.shape(*b));
                    for (((o, &gv), &x), &y) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()).zip(bv.data()) {
                        if y < x {
                            *o += gv;
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(adj: &mut [Option<Matrix<T>>], id: NodeId, shape: (usize, usize)) -> &mut Matrix<T> {
    adj[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let cols = m.cols();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}
