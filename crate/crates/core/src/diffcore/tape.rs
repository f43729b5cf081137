//! Wengert tape with eager forward evaluation.
//!
//! Every op is evaluated when it is recorded, so values can be inspected
//! mid-graph (routing decisions are taken from logits before the modules that
//! consume them are recorded). Node ids are handed out in recording order, so
//! the tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.
//!
//! Leaves are either constants or parameters. A node requires a gradient iff
//! it is a parameter or one of its inputs requires one; `stop_grad` nodes never
//! do, which is all the stop-gradient operator needs.

use std::borrow::Cow;

use super::matrix::{gemm, Matrix, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("backward needs a scalar root, got a {0}x{1} node")]
    NonScalarRoot(usize, usize),
    #[error("frozen stop-gradient replay expected {expected} stop nodes, the builder recorded more")]
    FrozenMismatch { expected: usize },
}

/// Recorded operation. Leaves (`Constant`, `Parameter`) carry their value in
/// the node itself.
#[derive(Clone, Debug)]
pub enum Op {
    Constant,
    Parameter,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Element-wise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// `x · W + b` with `b` a `1 × out` row broadcast over the batch.
    Affine {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Row-wise softmax restricted to `mask` (row-major, same shape as the
    /// logits); unselected entries are exactly zero.
    MaskSoftmax {
        logits: NodeId,
        mask: Vec<bool>,
    },
    StopGrad(NodeId),
    /// Per-row diagonal Gaussian log-density, summed over columns.
    GaussianLogProb {
        x: NodeId,
        mean: NodeId,
        log_std: NodeId,
    },
    /// Per-row routed mixture `Σ_j probs[r,j] · sources[j][r]`, summed in
    /// ascending `j` over entries selected by `mask` only. Sources that are
    /// never selected may be absent.
    RouteMix {
        probs: NodeId,
        sources: Vec<Option<NodeId>>,
        mask: Vec<bool>,
    },
    /// Row `r` comes from `on_true` if `keep[r]`, else from `on_false`.
    RowSelect {
        keep: Vec<bool>,
        on_true: NodeId,
        on_false: NodeId,
    },
    GatherRows {
        table: NodeId,
        rows: Vec<usize>,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// `B × C → B × 1`.
    SumCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Element-wise minimum.
    Min(NodeId, NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::MaskSoftmax { .. } => "mask-softmax",
            Op::StopGrad(_) => "stop-grad",
            Op::GaussianLogProb { .. } => "gaussian-logprob",
            Op::RouteMix { .. } => "route-mix",
            Op::RowSelect { .. } => "row-select",
            Op::GatherRows { .. } => "gather-rows",
            Op::ConcatCols(..) => "concat-cols",
            Op::SliceCols { .. } => "slice-cols",
            Op::SumCols(_) => "sum-cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Min(..) => "min",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::ConcatCols(a, b) | Op::Min(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Offset(a, _) => vec![*a],
            Op::Affine { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Softmax(a)
            | Op::StopGrad(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::MaskSoftmax { logits, .. } => vec![*logits],
            Op::GaussianLogProb { x, mean, log_std } => vec![*x, *mean, *log_std],
            Op::RouteMix { probs, sources, .. } => {
                let mut v = vec![*probs];
                v.extend(sources.iter().flatten().copied());
                v
            }
            Op::RowSelect { on_true, on_false, .. } => vec![*on_true, *on_false],
            Op::GatherRows { table, .. } => vec![*table],
            Op::SliceCols { x, .. } => vec![*x],
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Matrix>,
    requires_grad: bool,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    frozen_stops: Option<Vec<Matrix>>,
    stops_seen: usize,
    kink_margin: f64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TapeError {
    TapeError::Shape {
        op,
        detail: detail.into(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen_stops: None,
            stops_seen: 0,
            kink_margin: f64::INFINITY,
        }
    }

    /// A tape whose `stop_grad` nodes output the given values (in recording
    /// order) instead of their inputs. Replaying a builder on such a tape
    /// evaluates the surrogate function in which every stopped quantity is a
    /// constant, which is what a finite-difference oracle for stop-gradient
    /// graphs has to differentiate.
    pub fn with_frozen_stops(values: Vec<Matrix>) -> Self {
        Self {
            frozen_stops: Some(values),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Values of all `stop_grad` nodes, in recording order.
    pub fn stop_values(&self) -> Vec<Matrix> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad(_)))
            .map(|n| n.value.as_ref().clone())
            .collect()
    }

    /// Smallest distance to a non-differentiable point seen so far: relu
    /// inputs, `min` operand gaps, and anything reported via
    /// [`Tape::note_kink`].
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn note_kink(&mut self, margin: f64) {
        self.kink_margin = self.kink_margin.min(margin.abs());
    }

    fn push(&mut self, op: Op, value: Cow<'a, Matrix>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Op::Constant, Cow::Borrowed(value), false)
    }

    pub fn parameter(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Parameter, Cow::Owned(value), true)
    }

    pub fn parameter_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Op::Parameter, Cow::Borrowed(value), true)
    }

    fn check(&self, id: NodeId) -> Result<&Matrix, TapeError> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.as_ref())
            .ok_or(TapeError::UnknownNode(id.0))
    }

    /// Appends a non-leaf op and evaluates it.
    pub fn record(&mut self, op: Op) -> Result<NodeId, TapeError> {
        let name = op.name();
        let inputs = op.inputs();
        for &i in &inputs {
            self.check(i)?;
        }
        let requires_grad = match op {
            Op::StopGrad(_) => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        let value = self.evaluate(&op)?;
        if let Op::StopGrad(_) = op {
            let value = match &self.frozen_stops {
                Some(frozen) => {
                    let v = frozen
                        .get(self.stops_seen)
                        .ok_or(TapeError::FrozenMismatch { expected: frozen.len() })?
                        .clone();
                    if v.shape() != value.shape() {
                        return Err(shape_err(name, "frozen value shape differs from input"));
                    }
                    v
                }
                None => value,
            };
            self.stops_seen += 1;
            return Ok(self.push(op, Cow::Owned(value), false));
        }
        Ok(self.push(op, Cow::Owned(value), requires_grad))
    }

    fn evaluate(&mut self, op: &Op) -> Result<Matrix, TapeError> {
        let name = op.name();
        let v = |id: &NodeId| -> &Matrix { &self.nodes[id.0].value };
        let same = |a: &Matrix, b: &Matrix| -> Result<(), TapeError> {
            if a.shape() == b.shape() {
                Ok(())
            } else {
                Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        };
        let out = match op {
            Op::Constant | Op::Parameter => {
                return Err(TapeError::Invalid {
                    op: name,
                    detail: "leaves are created with constant()/parameter()".into(),
                })
            }
            Op::Add(a, b) => {
                same(v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same(v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same(v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x * y)
            }
            Op::Scale(a, c) => v(a).map(|x| c * x),
            Op::Offset(a, c) => v(a).map(|x| x + c),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.cols() != b.rows() {
                    return Err(shape_err(name, format!("{:?} · {:?}", a.shape(), b.shape())));
                }
                let mut out = Matrix::zeros(a.rows(), b.cols());
                gemm(
                    a.rows(),
                    a.cols(),
                    b.cols(),
                    a.data(),
                    Trans::No,
                    b.data(),
                    Trans::No,
                    0.0,
                    out.data_mut(),
                );
                out
            }
            Op::Affine { x, weight, bias } => {
                let (x, w, b) = (v(x), v(weight), v(bias));
                if x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols() {
                    return Err(shape_err(
                        name,
                        format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                    ));
                }
                let mut out = Matrix::zeros(x.rows(), w.cols());
                for r in 0..x.rows() {
                    out.row_mut(r).copy_from_slice(b.data());
                }
                gemm(
                    x.rows(),
                    x.cols(),
                    w.cols(),
                    x.data(),
                    Trans::No,
                    w.data(),
                    Trans::No,
                    1.0,
                    out.data_mut(),
                );
                out
            }
            Op::Relu(a) => {
                let a = v(a);
                let margin = a.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
                let out = a.map(|x| if x > 0.0 { x } else { 0.0 });
                self.note_kink(margin);
                out
            }
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Softmax(a) => {
                let a = v(a);
                let mask = vec![true; a.len()];
                masked_softmax_rows(a, &mask)
            }
            Op::MaskSoftmax { logits, mask } => {
                let z = v(logits);
                if mask.len() != z.len() {
                    return Err(shape_err(
                        name,
                        format!("mask has {} entries for logits {:?}", mask.len(), z.shape()),
                    ));
                }
                for r in 0..z.rows() {
                    if !mask[r * z.cols()..(r + 1) * z.cols()].iter().any(|&m| m) {
                        return Err(TapeError::Invalid {
                            op: name,
                            detail: format!("row {r} selects no entry"),
                        });
                    }
                }
                masked_softmax_rows(z, mask)
            }
            Op::StopGrad(a) => v(a).clone(),
            Op::GaussianLogProb { x, mean, log_std } => {
                let (x, m, s) = (v(x), v(mean), v(log_std));
                same(x, m)?;
                same(x, s)?;
                let mut out = Matrix::zeros(x.rows(), 1);
                let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
                for r in 0..x.rows() {
                    let mut acc = 0.0;
                    for c in 0..x.cols() {
                        let ls = s.get(r, c);
                        let zs = (x.get(r, c) - m.get(r, c)) * (-ls).exp();
                        acc += -0.5 * zs * zs - ls - half_ln_2pi;
                    }
                    out.set(r, 0, acc);
                }
                out
            }
            Op::RouteMix { probs, sources, mask } => {
                let p = v(probs);
                if sources.len() != p.cols() || mask.len() != p.len() {
                    return Err(shape_err(
                        name,
                        format!(
                            "probs {:?}, {} sources, mask of {}",
                            p.shape(),
                            sources.len(),
                            mask.len()
                        ),
                    ));
                }
                let width = match sources.iter().flatten().next() {
                    Some(s) => v(s).cols(),
                    None => {
                        return Err(TapeError::Invalid {
                            op: name,
                            detail: "no source present".into(),
                        })
                    }
                };
                for s in sources.iter().flatten() {
                    if v(s).shape() != (p.rows(), width) {
                        return Err(shape_err(
                            name,
                            format!("source {:?} vs expected {:?}", v(s).shape(), (p.rows(), width)),
                        ));
                    }
                }
                let k = p.cols();
                let mut out = Matrix::zeros(p.rows(), width);
                for r in 0..p.rows() {
                    let row = out.row_mut(r);
                    for (j, src) in sources.iter().enumerate() {
                        if !mask[r * k + j] {
                            continue;
                        }
                        let Some(src) = src else {
                            return Err(TapeError::Invalid {
                                op: name,
                                detail: format!("row {r} selects absent source {j}"),
                            });
                        };
                        let w = p.get(r, j);
                        for (o, s) in row.iter_mut().zip(v(src).row(r)) {
                            *o += w * s;
                        }
                    }
                }
                out
            }
            Op::RowSelect {
                keep,
                on_true,
                on_false,
            } => {
                let (a, b) = (v(on_true), v(on_false));
                same(a, b)?;
                if keep.len() != a.rows() {
                    return Err(shape_err(name, format!("{} flags for {} rows", keep.len(), a.rows())));
                }
                let mut out = b.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        out.row_mut(r).copy_from_slice(a.row(r));
                    }
                }
                out
            }
            Op::GatherRows { table, rows } => {
                let t = v(table);
                let mut out = Matrix::zeros(rows.len(), t.cols());
                for (r, &src) in rows.iter().enumerate() {
                    if src >= t.rows() {
                        return Err(shape_err(name, format!("row {src} of a {:?} table", t.shape())));
                    }
                    out.row_mut(r).copy_from_slice(t.row(src));
                }
                out
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rows() != b.rows() {
                    return Err(shape_err(name, format!("{:?} | {:?}", a.shape(), b.shape())));
                }
                let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
                for r in 0..a.rows() {
                    let row = out.row_mut(r);
                    row[..a.cols()].copy_from_slice(a.row(r));
                    row[a.cols()..].copy_from_slice(b.row(r));
                }
                out
            }
            Op::SliceCols { x, start, len } => {
                let x = v(x);
                if start + len > x.cols() {
                    return Err(shape_err(
                        name,
                        format!("columns {start}..{} of {:?}", start + len, x.shape()),
                    ));
                }
                let mut out = Matrix::zeros(x.rows(), *len);
                for r in 0..x.rows() {
                    out.row_mut(r).copy_from_slice(&x.row(r)[*start..start + len]);
                }
                out
            }
            Op::SumCols(a) => {
                let a = v(a);
                let mut out = Matrix::zeros(a.rows(), 1);
                for r in 0..a.rows() {
                    out.set(r, 0, a.row(r).iter().sum());
                }
                out
            }
            Op::Sum(a) => Matrix::scalar(v(a).data().iter().sum()),
            Op::Mean(a) => {
                let a = v(a);
                if a.is_empty() {
                    return Err(TapeError::Invalid {
                        op: name,
                        detail: "mean of an empty node".into(),
                    });
                }
                Matrix::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::Min(a, b) => {
                let (a, b) = (v(a), v(b));
                same(a, b)?;
                let margin = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .fold(f64::INFINITY, |m, (x, y)| m.min((x - y).abs()));
                let out = a.zip_map(b, |x, y| if x <= y { x } else { y });
                self.note_kink(margin);
                out
            }
        };
        Ok(out)
    }

    // Convenience builders. Each is `record` with the matching op.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.record(Op::Scale(a, c))
    }
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.record(Op::Offset(a, c))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::MatMul(a, b))
    }
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Affine { x, weight, bias })
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Relu(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Tanh(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Log(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Softplus(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Softmax(a))
    }
    pub fn mask_softmax(&mut self, logits: NodeId, mask: Vec<bool>) -> Result<NodeId, TapeError> {
        self.record(Op::MaskSoftmax { logits, mask })
    }
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::StopGrad(a))
    }
    pub fn gaussian_log_prob(&mut self, x: NodeId, mean: NodeId, log_std: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::GaussianLogProb { x, mean, log_std })
    }
    pub fn route_mix(
        &mut self,
        probs: NodeId,
        sources: Vec<Option<NodeId>>,
        mask: Vec<bool>,
    ) -> Result<NodeId, TapeError> {
        self.record(Op::RouteMix { probs, sources, mask })
    }
    pub fn row_select(&mut self, keep: Vec<bool>, on_true: NodeId, on_false: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::RowSelect {
            keep,
            on_true,
            on_false,
        })
    }
    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> Result<NodeId, TapeError> {
        self.record(Op::GatherRows { table, rows })
    }
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::ConcatCols(a, b))
    }
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        self.record(Op::SliceCols { x, start, len })
    }
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::SumCols(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Mean(a))
    }
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Min(a, b))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TapeError> {
        let rv = self.check(root)?;
        if rv.shape() != (1, 1) {
            return Err(TapeError::NonScalarRoot(rv.rows(), rv.cols()));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(&node.op, id, &g, &mut adj);
            adj[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { adj, shapes })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op, id: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |n: NodeId| -> &Matrix { &self.nodes[n.0].value };
        let out = &self.nodes[id].value;
        let mut acc = |n: NodeId, m: Matrix| match &mut adj[n.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match op {
            Op::Constant | Op::Parameter | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc(*a, g.map(|x| c * x));
                }
            }
            Op::Offset(a, _) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = Matrix::zeros(m, k);
                    gemm(m, n, k, g.data(), Trans::No, bv.data(), Trans::Yes, 0.0, da.data_mut());
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(k, n);
                    gemm(k, m, n, av.data(), Trans::Yes, g.data(), Trans::No, 0.0, db.data_mut());
                    acc(*b, db);
                }
            }
            Op::Affine { x, weight, bias } => {
                let (xv, wv) = (val(*x), val(*weight));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(m, k);
                    gemm(m, n, k, g.data(), Trans::No, wv.data(), Trans::Yes, 0.0, dx.data_mut());
                    acc(*x, dx);
                }
                if self.wants(*weight) {
                    let mut dw = Matrix::zeros(k, n);
                    gemm(k, m, n, xv.data(), Trans::Yes, g.data(), Trans::No, 0.0, dw.data_mut());
                    acc(*weight, dw);
                }
                if self.wants(*bias) {
                    let mut db = Matrix::zeros(1, n);
                    for r in 0..m {
                        for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 }));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(out, |d, y| d * (1.0 - y * y)));
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(out, |d, y| d * y));
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(val(*a), |d, x| d / x));
                }
            }
            Op::Softplus(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(val(*a), |d, x| d * sigmoid(x)));
                }
            }
            Op::Softmax(a) | Op::MaskSoftmax { logits: a, .. } => {
                if self.wants(*a) {
                    let mut dz = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let p = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for (c, d) in dz.row_mut(r).iter_mut().enumerate() {
                            *d = p[c] * (gr[c] - dot);
                        }
                    }
                    acc(*a, dz);
                }
            }
            Op::GaussianLogProb { x, mean, log_std } => {
                let (xv, mv, sv) = (val(*x), val(*mean), val(*log_std));
                let (rows, cols) = xv.shape();
                let mut dx = Matrix::zeros(rows, cols);
                let mut ds = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.get(r, 0);
                    for c in 0..cols {
                        let inv_var = (-2.0 * sv.get(r, c)).exp();
                        let diff = xv.get(r, c) - mv.get(r, c);
                        dx.set(r, c, -gr * diff * inv_var);
                        ds.set(r, c, gr * (diff * diff * inv_var - 1.0));
                    }
                }
                if self.wants(*mean) {
                    acc(*mean, dx.map(|v| -v));
                }
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*log_std) {
                    acc(*log_std, ds);
                }
            }
            Op::RouteMix { probs, sources, mask } => {
                let pv = val(*probs);
                let (rows, k) = pv.shape();
                if self.wants(*probs) {
                    let mut dp = Matrix::zeros(rows, k);
                    for (j, src) in sources.iter().enumerate() {
                        let Some(src) = src else { continue };
                        let sv = val(*src);
                        for r in 0..rows {
                            if mask[r * k + j] {
                                let d: f64 = g.row(r).iter().zip(sv.row(r)).map(|(a, b)| a * b).sum();
                                dp.set(r, j, d);
                            }
                        }
                    }
                    acc(*probs, dp);
                }
                for (j, src) in sources.iter().enumerate() {
                    let Some(src) = src else { continue };
                    if !self.wants(*src) {
                        continue;
                    }
                    let mut ds = Matrix::zeros(rows, g.cols());
                    let mut any = false;
                    for r in 0..rows {
                        if mask[r * k + j] {
                            any = true;
                            let w = pv.get(r, j);
                            for (d, x) in ds.row_mut(r).iter_mut().zip(g.row(r)) {
                                *d = w * x;
                            }
                        }
                    }
                    if any {
                        acc(*src, ds);
                    }
                }
            }
            Op::RowSelect {
                keep,
                on_true,
                on_false,
            } => {
                for (target, want_keep) in [(*on_true, true), (*on_false, false)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let mut d = Matrix::zeros(g.rows(), g.cols());
                    for (r, &k) in keep.iter().enumerate() {
                        if k == want_keep {
                            d.row_mut(r).copy_from_slice(g.row(r));
                        }
                    }
                    acc(target, d);
                }
            }
            Op::GatherRows { table, rows } => {
                if self.wants(*table) {
                    let (tr, tc) = val(*table).shape();
                    let mut d = Matrix::zeros(tr, tc);
                    for (r, &src) in rows.iter().enumerate() {
                        for (o, x) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*table, d);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                if self.wants(*a) {
                    let mut d = Matrix::zeros(g.rows(), ca);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    acc(*a, d);
                }
                if self.wants(*b) {
                    let cb = val(*b).cols();
                    let mut d = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(*b, d);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.wants(*x) {
                    let (xr, xc) = val(*x).shape();
                    let mut d = Matrix::zeros(xr, xc);
                    for r in 0..xr {
                        d.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                    }
                    acc(*x, d);
                }
            }
            Op::SumCols(a) => {
                if self.wants(*a) {
                    let (ar, ac) = val(*a).shape();
                    let mut d = Matrix::zeros(ar, ac);
                    for r in 0..ar {
                        let gr = g.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                    }
                    acc(*a, d);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let (ar, ac) = val(*a).shape();
                    acc(*a, Matrix::filled(ar, ac, g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let (ar, ac) = val(*a).shape();
                    acc(*a, Matrix::filled(ar, ac, g.item() / (ar * ac) as f64));
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let mut d = g.clone();
                    for ((d, x), y) in d.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x > y {
                            *d = 0.0;
                        }
                    }
                    acc(*a, d);
                }
                if self.wants(*b) {
                    let mut d = g.clone();
                    for ((d, x), y) in d.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x <= y {
                            *d = 0.0;
                        }
                    }
                    acc(*b, d);
                }
            }
        }
    }
}

/// Adjoints from one backward sweep. Nodes that the root does not depend on
/// (or that sit behind a stop-gradient) have no entry; [`Gradients::wrt`]
/// reports those as zeros.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adj.get(id.0).and_then(|a| a.as_ref())
    }

    pub fn wrt(&self, id: NodeId) -> Matrix {
        match self.get(id) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_softmax_rows(z: &Matrix, mask: &[bool]) -> Matrix {
    let cols = z.cols();
    let mut out = Matrix::zeros(z.rows(), cols);
    for r in 0..z.rows() {
        let zr = z.row(r);
        let mr = &mask[r * cols..(r + 1) * cols];
        let max = zr
            .iter()
            .zip(mr)
            .filter(|(_, &m)| m)
            .fold(f64::NEG_INFINITY, |a, (&x, _)| a.max(x));
        let row = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..cols {
            if mr[c] {
                row[c] = (zr[c] - max).exp();
                total += row[c];
            }
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_its_gradient() {
        let mut t = Tape::new();
        let x = t.parameter(Matrix::scalar(3.0));
        let y = t.parameter(Matrix::scalar(4.0));
        let f = t.mul(x, y).unwrap();
        assert_eq!(t.value(f).item(), 12.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x).item(), 4.0);
        assert_eq!(g.wrt(y).item(), 3.0);
    }

    #[test]
    fn stop_grad_is_forward_identity() {
        let mut t = Tape::new();
        let x = t.parameter(Matrix::scalar(5.0));
        let s = t.stop_grad(x).unwrap();
        assert_eq!(t.value(s).item().to_bits(), 5.0_f64.to_bits());
        assert!(!t.requires_grad(s));
    }

    #[test]
    fn stop_grad_blocks_the_cubic_branch() {
        // f = x² + sg(x³) at 2 → value 12, df/dx = 4
        let mut t = Tape::new();
        let x = t.parameter(Matrix::scalar(2.0));
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let s = t.stop_grad(x3).unwrap();
        let f = t.add(x2, s).unwrap();
        assert_eq!(t.value(f).item(), 12.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x).item(), 4.0);
    }

    #[test]
    fn affine_value() {
        let mut t = Tape::new();
        let w = t.constant(Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = t.constant(Matrix::row_vector(&[0.5, -0.5]));
        let x = t.constant(Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[4.5, 4.5]);
        assert_eq!(t.shape(y), (1, 2));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(3, 2));
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        assert!(err.to_string().contains("(2, 3)"), "{err}");
        let err = t.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let a = t.parameter(Matrix::zeros(2, 2));
        let r = t.relu(a).unwrap();
        assert_eq!(t.backward(r).unwrap_err(), TapeError::NonScalarRoot(2, 2));
    }

    #[test]
    fn mask_softmax_rejects_empty_rows() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::row_vector(&[1.0, 2.0]));
        assert!(t.mask_softmax(z, vec![false, false]).is_err());
        let p = t.mask_softmax(z, vec![false, true]).unwrap();
        assert_eq!(t.value(p).data(), &[0.0, 1.0]);
    }

    #[test]
    fn route_mix_skips_unselected_and_absent_sources() {
        let mut t = Tape::new();
        let p = t.parameter(Matrix::row_vector(&[0.25, 0.0, 0.75]));
        let a = t.parameter(Matrix::row_vector(&[1.0, 2.0]));
        let c = t.parameter(Matrix::row_vector(&[4.0, -4.0]));
        let mix = t
            .route_mix(p, vec![Some(a), None, Some(c)], vec![true, false, true])
            .unwrap();
        assert_eq!(t.value(mix).data(), &[3.25, -2.5]);
        let s = t.sum(mix).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(p).data(), &[3.0, 0.0, 0.0]);
        assert_eq!(g.wrt(a).data(), &[0.25, 0.25]);
        assert_eq!(g.wrt(c).data(), &[0.75, 0.75]);

        let err = t
            .route_mix(p, vec![Some(a), None, Some(c)], vec![true, true, false])
            .unwrap_err();
        assert!(err.to_string().contains("absent"));
    }

    #[test]
    fn frozen_replay_substitutes_stop_values() {
        let mut t = Tape::with_frozen_stops(vec![Matrix::scalar(7.0)]);
        let x = t.parameter(Matrix::scalar(2.0));
        let s = t.stop_grad(x).unwrap();
        assert_eq!(t.value(s).item(), 7.0);
        assert!(matches!(t.stop_grad(x), Err(TapeError::FrozenMismatch { expected: 1 })));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut t = Tape::new();
        let x = t.parameter(Matrix::from_vec(2, 2, vec![0.3, -1.2, 2.0, 0.7]));
        let w = t.parameter(Matrix::from_vec(2, 2, vec![1.1, 0.4, -0.3, 0.9]));
        let y = t.matmul(x, w).unwrap();
        let y = t.tanh(y).unwrap();
        let s = t.softmax(y).unwrap();
        let l = t.log(s).unwrap();
        let f = t.mean(l).unwrap();
        let g1 = t.backward(f).unwrap();
        let g2 = t.backward(f).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
        assert_eq!(g1.wrt(w), g2.wrt(w));
    }
}
