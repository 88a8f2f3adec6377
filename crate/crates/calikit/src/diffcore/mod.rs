//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records a computation graph as it is built: every operation
//! appends a node whose value is computed eagerly, so insertion order is a
//! topological order and [`Tape::backward`] is a single reverse sweep. The
//! primitive set is deliberately small — affine maps, the elementwise
//! nonlinearities needed by the forecaster heads, reductions, softmax with
//! log-sum-exp stabilization, concatenation, and an escape hatch
//! ([`CustomOp`]) for fused operations with hand-written adjoints.
//!
//! All arithmetic is `f64`; values are `ndarray::Array2` with shapes fixed
//! at node creation. Tapes are single-threaded; independent tapes may run
//! concurrently since they share no state.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::numeric;

/// Index of a node in its [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in `{op}` at node {node}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: NodeId,
        detail: String,
    },
    #[error("backward requires a scalar loss, node {node} has shape {rows}x{cols}")]
    NonScalarLoss {
        node: NodeId,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite gradient at node {node} (`{op}`)")]
    NonFiniteGrad { op: &'static str, node: NodeId },
    #[error("non-finite gradient for parameter {index} in adam_step")]
    NonFiniteAdamGrad { index: usize },
    #[error("custom op `{op}` failed: {detail}")]
    CustomOp { op: String, detail: String },
}

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Compute the output value from the input values.
    fn forward(&self, inputs: &[&Array2<f64>]) -> Result<Array2<f64>, String>;
    /// Given d(loss)/d(output), return d(loss)/d(input) for every input,
    /// in input order and with matching shapes.
    fn backward(
        &self,
        inputs: &[&Array2<f64>],
        output: &Array2<f64>,
        grad_out: &Array2<f64>,
    ) -> Vec<Array2<f64>>;
}

enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Neg(NodeId),
    NormalCdf(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    BroadcastCols { x: NodeId, cols: usize },
    ConcatCols(Vec<NodeId>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    RowGather { x: NodeId, idx: Vec<usize> },
    SliceCols { x: NodeId, start: usize, end: usize },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<NodeId> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Neg(_) => "neg",
            Op::NormalCdf(_) => "normal_cdf",
            Op::Add(_, _) => "add",
            Op::Sub(_, _) => "sub",
            Op::Mul(_, _) => "mul",
            Op::Div(_, _) => "div",
            Op::AddScalar(_, _) => "add_scalar",
            Op::MulScalar(_, _) => "mul_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::RowGather { .. } => "row_gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
///
/// Nodes unreachable from the loss have no entry and read as zero.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient for `id`, if the node is reachable from the loss.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, materializing zeros of `shape` when unreachable.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

/// A reverse-mode tape. Nodes are appended in topological order and values
/// are computed at creation, so `backward` is a single reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Value of a scalar (1x1) node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].value[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn shape_err(&self, op: &'static str, detail: String) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    /// Introduce a leaf holding `value` (an input or parameter).
    pub fn var(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Convenience 1x1 leaf.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.var(Array2::from_elem((1, 1), v))
    }

    /// `x (n,i) · w (i,o) + b (1,o)` with the bias row broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (xs, ws, bs) = (
            self.value(x).dim(),
            self.value(w).dim(),
            self.value(b).dim(),
        );
        if xs.1 != ws.0 || bs != (1, ws.1) {
            return Err(self.shape_err(
                "affine",
                format!("x={xs:?} w={ws:?} b={bs:?} (want x=(n,i), w=(i,o), b=(1,o))"),
            ));
        }
        let mut out = self.value(x).dot(self.value(w));
        out += self.value(b);
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, x: NodeId, f: F, op: Op) -> NodeId {
        let out = self.value(x).mapv(f);
        self.push(out, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, stable_softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    /// Elementwise standard normal cdf Φ(x).
    pub fn normal_cdf(&mut self, x: NodeId) -> NodeId {
        self.unary(x, numeric::std_normal_cdf, Op::NormalCdf(x))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(self.shape_err(op.tag(), format!("lhs={sa:?} rhs={sb:?}")));
        }
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, &y| *x = f(*x, y));
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar(x, c))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    /// Sum of all entries, a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(x))
    }

    /// Mean of all entries, a 1x1 node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::Mean(x))
    }

    /// Repeat a column vector `(n,1)` into `(n, cols)`.
    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId, DiffError> {
        let dim = self.value(x).dim();
        if dim.1 != 1 || cols == 0 {
            return Err(self.shape_err(
                "broadcast_cols",
                format!("input={dim:?}, cols={cols} (want (n,1), cols>=1)"),
            ));
        }
        let n = dim.0;
        let mut out = Array2::zeros((n, cols));
        for i in 0..n {
            let v = self.value(x)[(i, 0)];
            for j in 0..cols {
                out[(i, j)] = v;
            }
        }
        Ok(self.push(out, Op::BroadcastCols { x, cols }))
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        }
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut col = 0;
        for &p in parts {
            let v = self.value(p);
            if v.nrows() != n {
                return Err(self.shape_err(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", v.nrows(), n),
                ));
            }
            out.slice_mut(ndarray::s![.., col..col + v.ncols()])
                .assign(v);
            col += v.ncols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    fn softmax_rows(v: &Array2<f64>) -> Array2<f64> {
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                denom += *x;
            }
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        out
    }

    /// Row-wise softmax with log-sum-exp stabilization.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let out = Self::softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax with log-sum-exp stabilization.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Pick one entry per row: `out[i] = x[i, idx[i]]`, an `(n,1)` node.
    pub fn row_gather(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId, DiffError> {
        let (n, m) = self.value(x).dim();
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(self.shape_err(
                "row_gather",
                format!("x=({n},{m}), {} indices, max {:?}", idx.len(), idx.iter().max()),
            ));
        }
        let mut out = Array2::zeros((n, 1));
        for (i, &j) in idx.iter().enumerate() {
            out[(i, 0)] = self.value(x)[(i, j)];
        }
        Ok(self.push(out, Op::RowGather { x, idx }))
    }

    /// Columns `[start, end)` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let (n, m) = self.value(x).dim();
        if start >= end || end > m {
            return Err(self.shape_err(
                "slice_cols",
                format!("range [{start},{end}) of ({n},{m})"),
            ));
        }
        let out = self.value(x).slice(ndarray::s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols { x, start, end }))
    }

    /// Append a fused operation with a hand-written adjoint.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: Vec<NodeId>,
    ) -> Result<NodeId, DiffError> {
        let name = op.name().to_string();
        let values: Vec<&Array2<f64>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op
            .forward(&values)
            .map_err(|detail| DiffError::CustomOp { op: name, detail })?;
        Ok(self.push(out, Op::Custom { op, inputs }))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// over fan-out; nodes unreachable from the loss get no entry.
    pub fn backward(&self, loss: NodeId) -> Result<Grads, DiffError> {
        let (r, c) = self.value(loss).dim();
        if (r, c) != (1, 1) {
            return Err(DiffError::NonScalarLoss {
                node: loss,
                rows: r,
                cols: c,
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(DiffError::NonFiniteGrad {
                        op: self.nodes[id].op.tag(),
                        node: id,
                    });
                }
            }
        }
        Ok(Grads { grads })
    }

    fn add_grad(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |n: NodeId| &self.nodes[n].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                Self::add_grad(grads, *x, g.dot(&val(*w).t()));
                Self::add_grad(grads, *w, val(*x).t().dot(g));
                Self::add_grad(
                    grads,
                    *b,
                    g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned(),
                );
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |gv, &xv| *gv = if xv > 0.0 { *gv } else { 0.0 });
                Self::add_grad(grads, *x, d);
            }
            Op::Tanh(x) => {
                let mut d = g.clone();
                d.zip_mut_with(&self.nodes[id].value, |gv, &y| *gv *= 1.0 - y * y);
                Self::add_grad(grads, *x, d);
            }
            Op::Softplus(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |gv, &xv| *gv *= sigmoid(xv));
                Self::add_grad(grads, *x, d);
            }
            Op::Exp(x) => {
                let mut d = g.clone();
                d.zip_mut_with(&self.nodes[id].value, |gv, &y| *gv *= y);
                Self::add_grad(grads, *x, d);
            }
            Op::Log(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |gv, &xv| *gv /= xv);
                Self::add_grad(grads, *x, d);
            }
            Op::Square(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |gv, &xv| *gv *= 2.0 * xv);
                Self::add_grad(grads, *x, d);
            }
            Op::Neg(x) => {
                Self::add_grad(grads, *x, g.mapv(|v| -v));
            }
            Op::NormalCdf(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |gv, &xv| *gv *= numeric::std_normal_pdf(xv));
                Self::add_grad(grads, *x, d);
            }
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                da.zip_mut_with(val(*b), |gv, &bv| *gv *= bv);
                Self::add_grad(grads, *a, da);
                let mut db = g.clone();
                db.zip_mut_with(val(*a), |gv, &av| *gv *= av);
                Self::add_grad(grads, *b, db);
            }
            Op::Div(a, b) => {
                let mut da = g.clone();
                da.zip_mut_with(val(*b), |gv, &bv| *gv /= bv);
                Self::add_grad(grads, *a, da);
                let mut db = g.clone();
                db.zip_mut_with(&self.nodes[id].value, |gv, &y| *gv *= -y);
                db.zip_mut_with(val(*b), |gv, &bv| *gv /= bv);
                Self::add_grad(grads, *b, db);
            }
            Op::AddScalar(x, _) => Self::add_grad(grads, *x, g.clone()),
            Op::MulScalar(x, c) => Self::add_grad(grads, *x, g.mapv(|v| v * c)),
            Op::Sum(x) => {
                let s = g[(0, 0)];
                Self::add_grad(grads, *x, Array2::from_elem(val(*x).dim(), s));
            }
            Op::Mean(x) => {
                let s = g[(0, 0)] / val(*x).len() as f64;
                Self::add_grad(grads, *x, Array2::from_elem(val(*x).dim(), s));
            }
            Op::BroadcastCols { x, .. } => {
                let d = g.sum_axis(Axis(1)).insert_axis(Axis(1)).to_owned();
                Self::add_grad(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    let d = g.slice(ndarray::s![.., col..col + w]).to_owned();
                    Self::add_grad(grads, p, d);
                    col += w;
                }
            }
            Op::Softmax(x) => {
                // dx = y ⊙ (g − rowsum(g ⊙ y))
                let y = &self.nodes[id].value;
                let mut d = g.clone();
                for i in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                    for j in 0..y.ncols() {
                        d[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                Self::add_grad(grads, *x, d);
            }
            Op::LogSoftmax(x) => {
                // dx = g − softmax(x) · rowsum(g)
                let soft = Self::softmax_rows(val(*x));
                let mut d = g.clone();
                for i in 0..soft.nrows() {
                    let rowsum: f64 = (0..soft.ncols()).map(|j| g[(i, j)]).sum();
                    for j in 0..soft.ncols() {
                        d[(i, j)] = g[(i, j)] - soft[(i, j)] * rowsum;
                    }
                }
                Self::add_grad(grads, *x, d);
            }
            Op::RowGather { x, idx } => {
                let mut d = Array2::zeros(val(*x).dim());
                for (i, &j) in idx.iter().enumerate() {
                    d[(i, j)] = g[(i, 0)];
                }
                Self::add_grad(grads, *x, d);
            }
            Op::SliceCols { x, start, end } => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                Self::add_grad(grads, *x, d);
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Array2<f64>> = inputs.iter().map(|&i| val(i)).collect();
                let deltas = op.backward(&values, &self.nodes[id].value, g);
                debug_assert_eq!(deltas.len(), inputs.len());
                for (&input, delta) in inputs.iter().zip(deltas) {
                    Self::add_grad(grads, input, delta);
                }
            }
        }
    }
}

/// Max relative error between analytic gradients and central finite
/// differences for a scalar-valued graph builder evaluated at `point`.
///
/// The builder is called freshly for every evaluation, with one leaf per
/// entry of `point`. Relative error is
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`, maximized
/// over all coordinates of all inputs. `eps` should lie in `[1e-7, 1e-3]`.
pub fn gradcheck<F>(build: F, point: &[Array2<f64>], eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let eval = |pt: &[Array2<f64>]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = pt.iter().map(|p| tape.var(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = point.iter().map(|p| tape.var(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Array2<f64>> = point.to_vec();
    for (pi, p) in point.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi], p.dim());
        for idx in 0..p.len() {
            let (i, j) = (idx / p.ncols(), idx % p.ncols());
            let orig = work[pi][(i, j)];
            work[pi][(i, j)] = orig + eps;
            let fp = eval(&work)?;
            work[pi][(i, j)] = orig - eps;
            let fm = eval(&work)?;
            work[pi][(i, j)] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let ana = analytic[(i, j)];
            let rel = (ana - numeric).abs() / (ana.abs() + numeric.abs() + 1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_case() {
        let mut t = Tape::new();
        let x = t.var(array![[1.0, 2.0]]);
        let w = t.var(array![[1.0, 0.0], [0.0, 1.0]]);
        let b = t.var(array![[0.0, 0.0]]);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), &array![[1.0, 2.0]]);
    }

    #[test]
    fn relu_and_softplus_values() {
        let mut t = Tape::new();
        let x = t.var(arr(&[-3.0, 3.0, 0.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r), &arr(&[0.0, 3.0, 0.0]));
        let s = t.softplus(x);
        assert_abs_diff_eq!(t.value(s)[(2, 0)], 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn square_loss_gradient() {
        let mut t = Tape::new();
        let x = t.var(arr(&[3.0]));
        let sq = t.square(x);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_abs_diff_eq!(g.get(x).unwrap()[(0, 0)], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn matmul_sum_gradient_is_ones_outer() {
        // loss = sum(x·W), x = (1,1) row, W = 2x2 ones -> dW = [[1,1],[1,1]]
        let mut t = Tape::new();
        let x = t.var(array![[1.0, 1.0]]);
        let w = t.var(array![[1.0, 1.0], [1.0, 1.0]]);
        let b = t.var(array![[0.0, 0.0]]);
        let y = t.affine(x, w, b).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.var(arr(&[0.0]));
        let y = t.tanh(x);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_abs_diff_eq!(g.get(x).unwrap()[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.var(arr(&[1.0, 2.0]));
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.var(arr(&[1.0, 2.0]));
        let b = t.var(arr(&[1.0]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "error should name the op: {msg}");
    }

    #[test]
    fn fanout_accumulates_additively() {
        // loss = x*x + x  (x used twice) -> d/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.var(arr(&[2.0]));
        let xx = t.mul(x, x).unwrap();
        let s = t.add(xx, x).unwrap();
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert_abs_diff_eq!(g.get(x).unwrap()[(0, 0)], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_is_linear_in_seed() {
        // scaling the loss by alpha scales every gradient by alpha
        let build = |alpha: f64| {
            let mut t = Tape::new();
            let x = t.var(arr(&[0.7, -1.2, 2.0]));
            let sq = t.square(x);
            let tn = t.tanh(sq);
            let s = t.sum(tn);
            let loss = t.mul_scalar(s, alpha);
            let g = t.backward(loss).unwrap();
            g.get(x).unwrap().clone()
        };
        let g1 = build(1.0);
        let g3 = build(3.0);
        for (a, b) in g1.iter().zip(g3.iter()) {
            assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_backward_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.var(arr(&[0.3, -0.8, 1.7]));
            let e = t.exp(x);
            let sp = t.softplus(e);
            let loss = t.mean(sp);
            let g = t.backward(loss).unwrap();
            (t.scalar_value(loss), g.get(x).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_stable() {
        let mut t = Tape::new();
        let x = t.var(array![[1000.0, 1001.0], [-3.0, 0.0]]);
        let s = t.softmax(x);
        for row in t.value(s).rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gradcheck_quadratic_is_exact() {
        let err = gradcheck(
            |t, ids| {
                let sq = t.square(ids[0]);
                Ok(t.sum(sq))
            },
            &[arr(&[3.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic gradcheck error {err}");
    }

    #[test]
    fn gradcheck_flags_nonsmooth_point() {
        // |x| at 0 via relu(x) + relu(-x): central differences disagree.
        let err = gradcheck(
            |t, ids| {
                let a = t.relu(ids[0]);
                let nx = t.neg(ids[0]);
                let b = t.relu(nx);
                let s = t.add(a, b)?;
                Ok(t.sum(s))
            },
            &[arr(&[0.0])],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5, "nonsmooth point should report a large error, got {err}");
    }

    #[test]
    fn gradcheck_all_primitives_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x: Array2<f64> =
                Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
            let w: Array2<f64> =
                Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
            let b: Array2<f64> =
                Array2::from_shape_fn((1, 3), |_| rng.random::<f64>() * 0.5);
            let err = gradcheck(
                |t, ids| {
                    let h = t.affine(ids[0], ids[1], ids[2])?;
                    let th = t.tanh(h);
                    let sp = t.softplus(th);
                    let e = t.exp(sp);
                    let lg = t.log(e);
                    let nc = t.normal_cdf(lg);
                    let sm = t.softmax(nc);
                    let ls = t.log_softmax(sm);
                    let g = t.row_gather(ls, vec![0, 2, 1])?;
                    let sq = t.square(g);
                    let sc = t.mul_scalar(sq, 0.7);
                    let sc2 = t.add_scalar(sc, 0.1);
                    Ok(t.mean(sc2))
                },
                &[x, w, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "primitive chain gradcheck error {err}");
        }
    }

    #[test]
    fn gradcheck_broadcast_concat_slice_div() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mu: Array2<f64> = Array2::from_shape_fn((4, 1), |_| rng.random::<f64>());
            let sigma: Array2<f64> =
                Array2::from_shape_fn((4, 1), |_| 0.5 + rng.random::<f64>());
            let err = gradcheck(
                |t, ids| {
                    let mu_b = t.broadcast_cols(ids[0], 3)?;
                    let sg_b = t.broadcast_cols(ids[1], 3)?;
                    let prod = t.mul(mu_b, sg_b)?;
                    let cat = t.concat_cols(&[prod, mu_b])?;
                    let sl = t.slice_cols(cat, 1, 5)?;
                    let den = t.add_scalar(sl, 2.0);
                    let num = t.square(sl);
                    let d = t.div(num, den)?;
                    Ok(t.sum(d))
                },
                &[mu, sigma],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "broadcast/concat/slice/div gradcheck error {err}");
        }
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut t = Tape::new();
        let x = t.var(arr(&[1.0]));
        let orphan = t.var(arr(&[5.0]));
        let sq = t.square(x);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert!(g.get(orphan).is_none());
        assert_eq!(
            g.get_or_zeros(orphan, (1, 1)),
            Array2::<f64>::zeros((1, 1))
        );
    }
}
