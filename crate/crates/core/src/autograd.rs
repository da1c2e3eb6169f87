//! Tape-based reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output and whatever
//! the adjoint rule needs; a single backward sweep walks the tape in reverse
//! and accumulates gradients into the leaves. One tape per training step.

use crate::conv::{col2im, im2col, rows_to_tensor, ConvGeometry};
use crate::error::{Error, Result};
use crate::lie::{expm_square_trace, expm_vjp, lie_to_skew, ExpmConfig, ExpmTrace, LieParams};
use crate::matrix::{Matrix, Tensor4};
use crate::weight::guarded_norm;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Row-wise softmax probabilities and mean cross-entropy loss, shared by the
/// tape op and tape-free evaluation so both compute the identical value.
pub(crate) fn softmax_probs_and_loss(z: &Matrix, labels: &[usize]) -> Result<(Matrix, f64)> {
    if labels.len() != z.rows() {
        return Err(Error::InvalidDimensions {
            what: "labels",
            detail: format!("{} labels for {} rows", labels.len(), z.rows()),
        });
    }
    let classes = z.cols();
    let mut probs = Matrix::zeros(z.rows(), classes);
    let mut loss = 0.0;
    for r in 0..z.rows() {
        let row = z.row(r);
        let label = labels[r];
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        for (c, &v) in row.iter().enumerate() {
            probs.set(r, c, (v - max).exp() / denom);
        }
        loss -= (z.get(r, label) - max) - denom.ln();
    }
    loss /= z.rows() as f64;
    Ok((probs, loss))
}

/// A forward value: matrices for flattened data, tensors for activations.
#[derive(Debug, Clone)]
pub enum Value {
    Mat(Matrix),
    T4(Tensor4),
}

impl Value {
    pub fn as_mat(&self) -> &Matrix {
        match self {
            Value::Mat(m) => m,
            Value::T4(_) => panic!("expected matrix value"),
        }
    }

    pub fn as_tensor(&self) -> &Tensor4 {
        match self {
            Value::T4(t) => t,
            Value::Mat(_) => panic!("expected tensor value"),
        }
    }

    fn accumulate(&mut self, other: &Value) {
        match (self, other) {
            (Value::Mat(a), Value::Mat(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            (Value::T4(a), Value::T4(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            _ => panic!("gradient kind mismatch"),
        }
    }
}

enum Op {
    Leaf,
    MatMul,
    Add,
    Scale(f64),
    Transpose,
    /// Packed strictly-lower-triangular values -> skew-symmetric matrix.
    SkewFromPacked { m: usize, k: usize },
    /// Matrix exponential; the trace replays the forward product sequence.
    Expm { trace: Box<ExpmTrace> },
    /// Keep the first `keep` columns.
    SliceCols { keep: usize },
    /// Divide each row by its guarded Euclidean norm.
    RowNormalize { eps: f64 },
    Im2col { geom: ConvGeometry, batch: usize },
    RowsToTensor { geom: ConvGeometry, batch: usize },
    Relu,
    GlobalAvgPool,
    /// Add a 1 x C bias row to every row.
    AddBias,
    /// Mean cross-entropy against integer labels; saves the softmax output.
    CrossEntropy { labels: Vec<usize>, probs: Matrix },
    SumAll,
    SumSquares,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Value,
}

/// The recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient of a matrix-valued node, if it received one.
    pub fn mat(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref().map(Value::as_mat)
    }

    pub fn tensor(&self, id: NodeId) -> Option<&Tensor4> {
        self.grads[id.0].as_ref().map(Value::as_tensor)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Value) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable or constant matrix leaf.
    pub fn leaf(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, vec![], Value::Mat(m))
    }

    /// Registers a tensor leaf (typically the input batch).
    pub fn leaf_tensor(&mut self, t: Tensor4) -> NodeId {
        self.push(Op::Leaf, vec![], Value::T4(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).as_mat().matmul(self.value(b).as_mat())?;
        Ok(self.push(Op::MatMul, vec![a, b], Value::Mat(out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).as_mat().add(self.value(b).as_mat())?;
        Ok(self.push(Op::Add, vec![a, b], Value::Mat(out)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).as_mat().scale(factor);
        self.push(Op::Scale(factor), vec![a], Value::Mat(out))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).as_mat().transpose();
        self.push(Op::Transpose, vec![a], Value::Mat(out))
    }

    /// Packed parameter column (len x 1) -> m x m skew-symmetric matrix.
    pub fn skew_from_packed(&mut self, packed: NodeId, m: usize, k: usize) -> Result<NodeId> {
        let p = self.value(packed).as_mat();
        if p.cols() != 1 {
            return Err(Error::InvalidDimensions {
                what: "packed parameters",
                detail: format!("expected a column vector, got {}x{}", p.rows(), p.cols()),
            });
        }
        let lp = LieParams::from_values(m, k, p.data().to_vec())?;
        let a = lie_to_skew(&lp).matrix().clone();
        Ok(self.push(Op::SkewFromPacked { m, k }, vec![packed], Value::Mat(a)))
    }

    pub fn expm(&mut self, a: NodeId, cfg: &ExpmConfig) -> Result<NodeId> {
        let trace = expm_square_trace(self.value(a).as_mat(), cfg)?;
        let out = trace.result().clone();
        Ok(self.push(Op::Expm { trace: Box::new(trace) }, vec![a], Value::Mat(out)))
    }

    pub fn slice_cols(&mut self, a: NodeId, keep: usize) -> Result<NodeId> {
        let out = self.value(a).as_mat().take_cols(keep)?;
        Ok(self.push(Op::SliceCols { keep }, vec![a], Value::Mat(out)))
    }

    /// Row-wise division by the guarded norm sqrt(sum x^2 + eps^2).
    pub fn row_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a).as_mat();
        let mut out = x.clone();
        for r in 0..out.rows() {
            let n = guarded_norm(out.row(r), eps);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        self.push(Op::RowNormalize { eps }, vec![a], Value::Mat(out))
    }

    pub fn im2col(&mut self, x: NodeId, geom: &ConvGeometry) -> Result<NodeId> {
        let t = self.value(x).as_tensor();
        let batch = t.dims().0;
        let out = im2col(t, geom)?;
        Ok(self.push(Op::Im2col { geom: *geom, batch }, vec![x], Value::Mat(out.mat)))
    }

    pub fn rows_to_tensor(
        &mut self,
        y: NodeId,
        geom: &ConvGeometry,
        batch: usize,
    ) -> Result<NodeId> {
        let out = rows_to_tensor(self.value(y).as_mat(), geom, batch)?;
        Ok(self.push(Op::RowsToTensor { geom: *geom, batch }, vec![y], Value::T4(out)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = match self.value(a) {
            Value::Mat(m) => {
                let mut o = m.clone();
                for v in o.data_mut() {
                    *v = v.max(0.0);
                }
                Value::Mat(o)
            }
            Value::T4(t) => {
                let mut o = t.clone();
                for v in o.data_mut() {
                    *v = v.max(0.0);
                }
                Value::T4(o)
            }
        };
        self.push(Op::Relu, vec![a], out)
    }

    /// (n, c, h, w) activations -> n x c matrix of spatial means.
    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).as_tensor();
        let (n, c, h, w) = t.dims();
        let mut out = Matrix::zeros(n, c);
        for img in 0..n {
            for ch in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += t.get(img, ch, y, x);
                    }
                }
                out.set(img, ch, s / (h * w) as f64);
            }
        }
        self.push(Op::GlobalAvgPool, vec![a], Value::Mat(out))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(a).as_mat();
        let b = self.value(bias).as_mat();
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::ShapeMismatch { op: "add_bias", left: x.shape(), right: b.shape() });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, bv) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                *v += bv;
            }
        }
        Ok(self.push(Op::AddBias, vec![a, bias], Value::Mat(out)))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits).as_mat();
        let (probs, loss) = softmax_probs_and_loss(z, labels)?;
        let out = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(
            Op::CrossEntropy { labels: labels.to_vec(), probs },
            vec![logits],
            Value::Mat(out),
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).as_mat().data().iter().sum();
        self.push(Op::SumAll, vec![a], Value::Mat(Matrix::from_vec(1, 1, vec![s]).unwrap()))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).as_mat().data().iter().map(|x| x * x).sum();
        self.push(Op::SumSquares, vec![a], Value::Mat(Matrix::from_vec(1, 1, vec![s]).unwrap()))
    }

    /// Backpropagates from a scalar loss node; returns the gradient of every
    /// node that influences it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_val = self.value(loss).as_mat();
        if loss_val.shape() != (1, 1) {
            return Err(Error::NonScalarLoss { rows: loss_val.rows(), cols: loss_val.cols() });
        }
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::Mat(Matrix::from_vec(1, 1, vec![1.0])?));

        for idx in (0..self.nodes.len()).rev() {
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let contributions = self.adjoint(node, &upstream)?;
            for (input, grad) in node.inputs.iter().zip(contributions) {
                match &mut grads[input.0] {
                    Some(existing) => existing.accumulate(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            // keep leaf gradients readable for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
            }
        }
        Ok(Gradients { grads })
    }

    /// Per-op adjoint: gradient contribution to each input, in input order.
    fn adjoint(&self, node: &Node, upstream: &Value) -> Result<Vec<Value>> {
        match &node.op {
            Op::Leaf => Ok(vec![]),
            Op::MatMul => {
                let g = upstream.as_mat();
                let a = self.value(node.inputs[0]).as_mat();
                let b = self.value(node.inputs[1]).as_mat();
                let da = g.matmul(&b.transpose())?;
                let db = a.transpose().matmul(g)?;
                Ok(vec![Value::Mat(da), Value::Mat(db)])
            }
            Op::Add => Ok(vec![upstream.clone(), upstream.clone()]),
            Op::Scale(c) => Ok(vec![Value::Mat(upstream.as_mat().scale(*c))]),
            Op::Transpose => Ok(vec![Value::Mat(upstream.as_mat().transpose())]),
            Op::SkewFromPacked { m, k } => {
                let g = upstream.as_mat();
                let mut packed = Vec::with_capacity(crate::lie::packed_len(*m, *k));
                for j in 0..*k {
                    for i in j + 1..*m {
                        packed.push(g.get(i, j) - g.get(j, i));
                    }
                }
                let len = packed.len();
                Ok(vec![Value::Mat(Matrix::from_vec(len, 1, packed)?)])
            }
            Op::Expm { trace } => {
                let da = expm_vjp(trace, upstream.as_mat())?;
                Ok(vec![Value::Mat(da)])
            }
            Op::SliceCols { keep } => {
                let g = upstream.as_mat();
                let full = self.value(node.inputs[0]).as_mat();
                let mut out = Matrix::zeros(full.rows(), full.cols());
                for r in 0..g.rows() {
                    for c in 0..*keep {
                        out.set(r, c, g.get(r, c));
                    }
                }
                Ok(vec![Value::Mat(out)])
            }
            Op::RowNormalize { eps } => {
                // y = x / n with n = sqrt(sum x^2 + eps^2):
                // dx = g/n - x (g . x) / n^3
                let g = upstream.as_mat();
                let x = self.value(node.inputs[0]).as_mat();
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = guarded_norm(x.row(r), *eps);
                    let dot: f64 = g.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
                    let n3 = n * n * n;
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = g.get(r, c) / n - x.get(r, c) * dot / n3;
                    }
                }
                Ok(vec![Value::Mat(out)])
            }
            Op::Im2col { geom, batch } => {
                let back = col2im(upstream.as_mat(), geom, *batch)?;
                Ok(vec![Value::T4(back)])
            }
            Op::RowsToTensor { geom, batch } => {
                let g = upstream.as_tensor();
                let rows = batch * geom.positions();
                let mut out = Matrix::zeros(rows, geom.c_out);
                for img in 0..*batch {
                    for oy in 0..geom.h_out() {
                        for ox in 0..geom.w_out() {
                            let row = (img * geom.h_out() + oy) * geom.w_out() + ox;
                            for o in 0..geom.c_out {
                                out.set(row, o, g.get(img, o, oy, ox));
                            }
                        }
                    }
                }
                Ok(vec![Value::Mat(out)])
            }
            Op::Relu => {
                let mut out = upstream.clone();
                match (&mut out, self.value(node.inputs[0])) {
                    (Value::Mat(g), Value::Mat(x)) => {
                        for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                            if *xv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    (Value::T4(g), Value::T4(x)) => {
                        for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                            if *xv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    _ => unreachable!("relu preserves the value kind"),
                }
                Ok(vec![out])
            }
            Op::GlobalAvgPool => {
                let g = upstream.as_mat();
                let t = self.value(node.inputs[0]).as_tensor();
                let (n, c, h, w) = t.dims();
                let mut out = Tensor4::zeros(n, c, h, w);
                let inv = 1.0 / (h * w) as f64;
                for img in 0..n {
                    for ch in 0..c {
                        let v = g.get(img, ch) * inv;
                        for y in 0..h {
                            for x in 0..w {
                                out.set(img, ch, y, x, v);
                            }
                        }
                    }
                }
                Ok(vec![Value::T4(out)])
            }
            Op::AddBias => {
                let g = upstream.as_mat();
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        db.set(0, c, db.get(0, c) + g.get(r, c));
                    }
                }
                Ok(vec![upstream.clone(), Value::Mat(db)])
            }
            Op::CrossEntropy { labels, probs } => {
                let go = upstream.as_mat().get(0, 0);
                let n = probs.rows() as f64;
                let mut out = probs.scale(go / n);
                for (r, &label) in labels.iter().enumerate() {
                    out.set(r, label, out.get(r, label) - go / n);
                }
                Ok(vec![Value::Mat(out)])
            }
            Op::SumAll => {
                let go = upstream.as_mat().get(0, 0);
                let x = self.value(node.inputs[0]).as_mat();
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for v in out.data_mut() {
                    *v = go;
                }
                Ok(vec![Value::Mat(out)])
            }
            Op::SumSquares => {
                let go = upstream.as_mat().get(0, 0);
                let x = self.value(node.inputs[0]).as_mat();
                Ok(vec![Value::Mat(x.scale(2.0 * go))])
            }
        }
    }
}
