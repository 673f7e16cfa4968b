//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its output value and enough
//! metadata to push adjoints back to its parents. Nodes are created in
//! topological order by construction, so the backward pass is a single
//! reverse sweep that visits each node exactly once and accumulates into
//! parent gradients (sum over all consumers).
//!
//! Invariants:
//! - all stored values are finite; any primitive producing NaN/Inf fails,
//! - forward values for identical inputs are bitwise identical (the tape is
//!   single-threaded and allocation order never influences arithmetic),
//! - `backward` requires a scalar root that participates in the graph.

use crate::tensor::Tensor;
use crate::tolerances::LAYER_NORM_EPS;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: &'static str, got: (usize, usize) },
    #[error("{op}: domain violation at value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {got:?}")]
    NonScalarRoot { got: (usize, usize) },
    #[error("backward root does not depend on any parameter")]
    DetachedRoot,
    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds { op: &'static str, index: usize, bound: usize },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

pub type TapeResult<T> = Result<T, TapeError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Neg(ValueId),
    AddScalar(ValueId),
    MulScalar(ValueId, f64),
    /// Broadcast multiply by a single-element node.
    MulScalarT(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    ConcatRows(Vec<ValueId>),
    ConcatCols(Vec<ValueId>),
    SliceRows(ValueId, usize),
    SliceCols(ValueId, usize),
    GatherRows(ValueId, Vec<usize>),
    RepeatRows(ValueId, usize),
    RepeatCols(ValueId, usize),
    Tanh(ValueId),
    Sigmoid(ValueId),
    Softplus(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Cosh(ValueId),
    Sinh(ValueId),
    Atanh(ValueId),
    Sqrt(ValueId),
    Recip(ValueId),
    Abs(ValueId),
    Clamp(ValueId, f64, f64),
    RowNorms(ValueId),
    RowSums(ValueId),
    ColSums(ValueId),
    RowMeans(ValueId),
    ColMeans(ValueId),
    RowMax(ValueId, Vec<usize>),
    ReduceMax(ValueId, usize),
    Sum(ValueId),
    Mean(ValueId),
    SoftmaxRows(ValueId),
    SoftmaxCols(ValueId),
    LayerNormRows(ValueId),
    ScaleRows(ValueId, ValueId),
    ScaleCols(ValueId, ValueId),
    AddRowBroadcast(ValueId, ValueId),
    /// base^e for a constant non-negative base and a scalar exponent node.
    PowConstBase(ValueId, Tensor),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Wengert tape: an arena of nodes in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input; gradients accumulate here during `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push_unchecked(t.rows(), t.cols(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        self.push_unchecked(t.rows(), t.cols(), t.data().to_vec(), false, Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: f64) -> ValueId {
        self.push_unchecked(1, 1, vec![v], false, Op::Constant)
    }

    pub fn shape(&self, id: ValueId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: ValueId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::from_vec(n.rows, n.cols, n.data.clone())
    }

    /// Scalar payload of a 1x1 node.
    pub fn item(&self, id: ValueId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "item() on non-scalar node");
        n.data[0]
    }

    /// Gradient of the most recent `backward` root with respect to `id`.
    /// None if the node did not participate or `backward` has not run.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push_unchecked(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> ValueId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, needs_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> TapeResult<ValueId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TapeError::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(rows, cols, data, needs_grad, op))
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> TapeResult<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc {
            return Err(TapeError::ShapeMismatch { op, lhs: (ar, ac), rhs: (br, bc) });
        }
        Ok(())
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> =
            self.node(a).data.iter().zip(&self.node(b).data).map(|(x, y)| x + y).collect();
        self.push("add", r, c, data, self.needs(&[a, b]), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        self.same_shape("sub", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> =
            self.node(a).data.iter().zip(&self.node(b).data).map(|(x, y)| x - y).collect();
        self.push("sub", r, c, data, self.needs(&[a, b]), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let data: Vec<f64> =
            self.node(a).data.iter().zip(&self.node(b).data).map(|(x, y)| x * y).collect();
        self.push("mul", r, c, data, self.needs(&[a, b]), Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| -x).collect();
        self.push("neg", r, c, data, self.needs(&[a]), Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: ValueId, k: f64) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x + k).collect();
        self.push("add_scalar", r, c, data, self.needs(&[a]), Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: ValueId, k: f64) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * k).collect();
        self.push("mul_scalar", r, c, data, self.needs(&[a]), Op::MulScalar(a, k))
    }

    /// Broadcast multiply by a single-element node (for learnable scalars).
    pub fn mul_scalar_t(&mut self, a: ValueId, s: ValueId) -> TapeResult<ValueId> {
        let (sr, sc) = self.shape(s);
        if sr * sc != 1 {
            return Err(TapeError::BadShape {
                op: "mul_scalar_t",
                expected: "single-element scalar",
                got: (sr, sc),
            });
        }
        let (r, c) = self.shape(a);
        let sv = self.node(s).data[0];
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * sv).collect();
        self.push("mul_scalar_t", r, c, data, self.needs(&[a, s]), Op::MulScalarT(a, s))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(TapeError::ShapeMismatch { op: "matmul", lhs: (ar, ac), rhs: (br, bc) });
        }
        let av = &self.node(a).data;
        let bv = &self.node(b).data;
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            for k in 0..ac {
                let aik = av[i * ac + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * bc..(k + 1) * bc];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for (o, bb) in orow.iter_mut().zip(brow) {
                    *o += aik * bb;
                }
            }
        }
        self.push("matmul", ar, bc, out, self.needs(&[a, b]), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push("transpose", c, r, out, self.needs(&[a]), Op::Transpose(a))
    }

    // ---- reshaping / movement ----

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> TapeResult<ValueId> {
        if parts.is_empty() {
            return Err(TapeError::EmptyInput { op: "concat_rows" });
        }
        let (_, c) = self.shape(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: (pr, pc),
                });
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.node(p).data);
        }
        let ng = self.needs(parts);
        self.push("concat_rows", rows, c, data, ng, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> TapeResult<ValueId> {
        if parts.is_empty() {
            return Err(TapeError::EmptyInput { op: "concat_cols" });
        }
        let (r, _) = self.shape(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: (pr, pc),
                });
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let (_, pc) = self.shape(p);
                data.extend_from_slice(&self.node(p).data[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.needs(parts);
        self.push("concat_cols", r, cols, data, ng, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: ValueId, r0: usize, r1: usize) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        if r0 >= r1 || r1 > r {
            return Err(TapeError::IndexOutOfBounds { op: "slice_rows", index: r1, bound: r });
        }
        let data = self.node(a).data[r0 * c..r1 * c].to_vec();
        self.push("slice_rows", r1 - r0, c, data, self.needs(&[a]), Op::SliceRows(a, r0))
    }

    pub fn slice_cols(&mut self, a: ValueId, c0: usize, c1: usize) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        if c0 >= c1 || c1 > c {
            return Err(TapeError::IndexOutOfBounds { op: "slice_cols", index: c1, bound: c });
        }
        let av = &self.node(a).data;
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&av[i * c + c0..i * c + c1]);
        }
        self.push("slice_cols", r, w, data, self.needs(&[a]), Op::SliceCols(a, c0))
    }

    /// Output row i is input row idx[i]; indices may repeat.
    pub fn gather_rows(&mut self, a: ValueId, idx: &[usize]) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TapeError::IndexOutOfBounds { op: "gather_rows", index: bad, bound: r });
        }
        let av = &self.node(a).data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[a]);
        self.push("gather_rows", idx.len(), c, data, ng, Op::GatherRows(a, idx.to_vec()))
    }

    /// Tile a 1xc row n times into an nxc matrix.
    pub fn repeat_rows(&mut self, a: ValueId, n: usize) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(TapeError::BadShape { op: "repeat_rows", expected: "1xc row", got: (r, c) });
        }
        let row = self.node(a).data.clone();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        self.push("repeat_rows", n, c, data, self.needs(&[a]), Op::RepeatRows(a, n))
    }

    /// Tile an rx1 column n times into an rxn matrix.
    pub fn repeat_cols(&mut self, a: ValueId, n: usize) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(TapeError::BadShape {
                op: "repeat_cols",
                expected: "rx1 column",
                got: (r, c),
            });
        }
        let col = self.node(a).data.clone();
        let mut data = Vec::with_capacity(r * n);
        for i in 0..r {
            for _ in 0..n {
                data.push(col[i]);
            }
        }
        self.push("repeat_cols", r, n, data, self.needs(&[a]), Op::RepeatCols(a, n))
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| f(x)).collect();
        self.push(op_name, r, c, data, self.needs(&[a]), op)
    }

    pub fn tanh(&mut self, a: ValueId) -> TapeResult<ValueId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> TapeResult<ValueId> {
        self.unary("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: ValueId) -> TapeResult<ValueId> {
        self.unary("softplus", a, stable_softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: ValueId) -> TapeResult<ValueId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: ValueId) -> TapeResult<ValueId> {
        if let Some(&bad) = self.node(a).data.iter().find(|&&x| x <= 0.0) {
            return Err(TapeError::Domain { op: "log", value: bad });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn cosh(&mut self, a: ValueId) -> TapeResult<ValueId> {
        self.unary("cosh", a, f64::cosh, Op::Cosh(a))
    }

    pub fn sinh(&mut self, a: ValueId) -> TapeResult<ValueId> {
        self.unary("sinh", a, f64::sinh, Op::Sinh(a))
    }

    pub fn atanh(&mut self, a: ValueId) -> TapeResult<ValueId> {
        if let Some(&bad) = self.node(a).data.iter().find(|&&x| x.abs() >= 1.0) {
            return Err(TapeError::Domain { op: "atanh", value: bad });
        }
        self.unary("atanh", a, f64::atanh, Op::Atanh(a))
    }

    pub fn sqrt(&mut self, a: ValueId) -> TapeResult<ValueId> {
        if let Some(&bad) = self.node(a).data.iter().find(|&&x| x < 0.0) {
            return Err(TapeError::Domain { op: "sqrt", value: bad });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: ValueId) -> TapeResult<ValueId> {
        if let Some(&bad) = self.node(a).data.iter().find(|&&x| x.abs() < 1e-300) {
            return Err(TapeError::Domain { op: "recip", value: bad });
        }
        self.unary("recip", a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn abs(&mut self, a: ValueId) -> TapeResult<ValueId> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Clamp into [lo, hi]; the gradient is zero outside the active range.
    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> TapeResult<ValueId> {
        assert!(lo <= hi, "clamp bounds out of order");
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- reductions ----

    /// Euclidean norm of each row: rxc -> rx1.
    pub fn row_norms(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let data: Vec<f64> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push("row_norms", r, 1, data, self.needs(&[a]), Op::RowNorms(a))
    }

    pub fn row_sums(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let data: Vec<f64> = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        self.push("row_sums", r, 1, data, self.needs(&[a]), Op::RowSums(a))
    }

    pub fn col_sums(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += av[i * c + j];
            }
        }
        self.push("col_sums", 1, c, data, self.needs(&[a]), Op::ColSums(a))
    }

    pub fn row_means(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let data: Vec<f64> =
            (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect();
        self.push("row_means", r, 1, data, self.needs(&[a]), Op::RowMeans(a))
    }

    pub fn col_means(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += av[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        self.push("col_means", 1, c, data, self.needs(&[a]), Op::ColMeans(a))
    }

    /// Maximum of each row: rxc -> rx1. Ties route the gradient to the first
    /// maximal entry.
    pub fn row_max(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let mut data = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let (mut best_j, mut best) = (0usize, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_j = j;
                }
            }
            data.push(best);
            argmax.push(best_j);
        }
        self.push("row_max", r, 1, data, self.needs(&[a]), Op::RowMax(a, argmax))
    }

    /// Maximum entry of the whole tensor as a 1x1 node.
    pub fn reduce_max(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let av = &self.node(a).data;
        let (mut best_i, mut best) = (0usize, av[0]);
        for (i, &v) in av.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        self.push("reduce_max", 1, 1, vec![best], self.needs(&[a]), Op::ReduceMax(a, best_i))
    }

    pub fn sum(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let s = self.node(a).data.iter().sum();
        self.push("sum", 1, 1, vec![s], self.needs(&[a]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let n = self.node(a).data.len() as f64;
        let s: f64 = self.node(a).data.iter().sum();
        self.push("mean", 1, 1, vec![s / n], self.needs(&[a]), Op::Mean(a))
    }

    // ---- structured nonlinearities ----

    /// Softmax within each row (max-subtracted for stability).
    pub fn softmax_rows(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_slice(&av[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        self.push("softmax_rows", r, c, data, self.needs(&[a]), Op::SoftmaxRows(a))
    }

    /// Softmax within each column (max-subtracted for stability).
    pub fn softmax_cols(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        let mut col = vec![0.0; r];
        let mut out = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = av[i * c + j];
            }
            softmax_slice(&col, &mut out);
            for i in 0..r {
                data[i * c + j] = out[i];
            }
        }
        self.push("softmax_cols", r, c, data, self.needs(&[a]), Op::SoftmaxCols(a))
    }

    /// Per-row normalization (x - mean) / sqrt(var + eps) with population
    /// variance; no learned affine.
    pub fn layer_norm_rows(&mut self, a: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let av = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let denom = (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) / denom;
            }
        }
        self.push("layer_norm_rows", r, c, data, self.needs(&[a]), Op::LayerNormRows(a))
    }

    // ---- broadcasting ----

    /// out[i][j] = a[i][j] * s[i] for a column of per-row scales.
    pub fn scale_rows(&mut self, a: ValueId, s: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let (sr, sc) = self.shape(s);
        if sr != r || sc != 1 {
            return Err(TapeError::ShapeMismatch { op: "scale_rows", lhs: (r, c), rhs: (sr, sc) });
        }
        let av = &self.node(a).data;
        let sv = &self.node(s).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] * sv[i];
            }
        }
        self.push("scale_rows", r, c, data, self.needs(&[a, s]), Op::ScaleRows(a, s))
    }

    /// out[i][j] = a[i][j] * s[j] for a row of per-column scales.
    pub fn scale_cols(&mut self, a: ValueId, s: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let (sr, sc) = self.shape(s);
        if sr != 1 || sc != c {
            return Err(TapeError::ShapeMismatch { op: "scale_cols", lhs: (r, c), rhs: (sr, sc) });
        }
        let av = &self.node(a).data;
        let sv = &self.node(s).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] * sv[j];
            }
        }
        self.push("scale_cols", r, c, data, self.needs(&[a, s]), Op::ScaleCols(a, s))
    }

    /// out[i][j] = a[i][j] + row[j] (bias broadcast over rows).
    pub fn add_row_broadcast(&mut self, a: ValueId, row: ValueId) -> TapeResult<ValueId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(row);
        if br != 1 || bc != c {
            return Err(TapeError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: (r, c),
                rhs: (br, bc),
            });
        }
        let av = &self.node(a).data;
        let bv = &self.node(row).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] + bv[j];
            }
        }
        self.push("add_row_broadcast", r, c, data, self.needs(&[a, row]), Op::AddRowBroadcast(a, row))
    }

    /// base^e elementwise for a constant non-negative base and a positive
    /// scalar exponent node. A zero base yields exactly zero with zero
    /// gradient contribution, so fully-overlapping pairs drop out of losses.
    pub fn pow_const_base(&mut self, base: &Tensor, e: ValueId) -> TapeResult<ValueId> {
        let (er, ec) = self.shape(e);
        if er * ec != 1 {
            return Err(TapeError::BadShape {
                op: "pow_const_base",
                expected: "single-element scalar exponent",
                got: (er, ec),
            });
        }
        let ev = self.node(e).data[0];
        if ev <= 0.0 {
            return Err(TapeError::Domain { op: "pow_const_base", value: ev });
        }
        if let Some(&bad) = base.data().iter().find(|&&b| b < 0.0) {
            return Err(TapeError::Domain { op: "pow_const_base", value: bad });
        }
        let data: Vec<f64> = base.data().iter().map(|&b| b.powf(ev)).collect();
        let ng = self.needs(&[e]);
        self.push("pow_const_base", base.rows(), base.cols(), data, ng, Op::PowConstBase(e, base.clone()))
    }

    // ---- backward ----

    /// Reverse sweep seeding d(root)/d(root) = 1. The root must be a scalar
    /// that depends on at least one differentiable leaf. Gradients of all
    /// participating nodes are retrievable through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, root: ValueId) -> TapeResult<()> {
        let (r, c) = self.shape(root);
        if r != 1 || c != 1 {
            return Err(TapeError::NonScalarRoot { got: (r, c) });
        }
        if !self.nodes[root.0].needs_grad {
            return Err(TapeError::DetachedRoot);
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.backward_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        for g in self.grads.iter().flatten() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TapeError::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, update: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, ui) in g.iter_mut().zip(update) {
                    *gi += ui;
                }
            }
            None => *slot = Some(update.to_vec()),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) -> TapeResult<()> {
        // Clones of parent values keep the borrow checker happy; tensors at
        // this scale are small enough that the copies are immaterial.
        let op = self.nodes[i].op.clone();
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        let out = self.nodes[i].data.clone();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let nb: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(b, &nb);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(&av).map(|(gi, ai)| gi * ai).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(a, &da);
            }
            Op::AddScalar(a) => self.accumulate(a, g),
            Op::MulScalar(a, k) => {
                let da: Vec<f64> = g.iter().map(|x| x * k).collect();
                self.accumulate(a, &da);
            }
            Op::MulScalarT(a, s) => {
                let sv = self.nodes[s.0].data[0];
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                let ds: f64 = g.iter().zip(&av).map(|(gi, ai)| gi * ai).sum();
                self.accumulate(a, &da);
                self.accumulate(s, &[ds]);
            }
            Op::MatMul(a, b) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let bc = self.nodes[b.0].cols;
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                // da = g . b^T
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..ar {
                    for k in 0..ac {
                        let mut acc = 0.0;
                        for j in 0..bc {
                            acc += g[i2 * bc + j] * bv[k * bc + j];
                        }
                        da[i2 * ac + k] = acc;
                    }
                }
                // db = a^T . g
                let mut db = vec![0.0; ac * bc];
                for k in 0..ac {
                    for i2 in 0..ar {
                        let aik = av[i2 * ac + k];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..bc {
                            db[k * bc + j] += aik * g[i2 * bc + j];
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(a) => {
                // out is cxr of an rxc input; g has out's layout.
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..ar {
                    for j in 0..ac {
                        da[i2 * ac + j] = g[j * ar + i2];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut row0 = 0;
                for p in parts {
                    let (pr, pc) = (self.nodes[p.0].rows, self.nodes[p.0].cols);
                    let seg = g[row0 * cols..(row0 + pr) * cols].to_vec();
                    debug_assert_eq!(pc, cols);
                    self.accumulate(p, &seg);
                    row0 += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for p in parts {
                    let (pr, pc) = (self.nodes[p.0].rows, self.nodes[p.0].cols);
                    debug_assert_eq!(pr, rows);
                    let mut seg = vec![0.0; pr * pc];
                    for i2 in 0..pr {
                        seg[i2 * pc..(i2 + 1) * pc]
                            .copy_from_slice(&g[i2 * cols + col0..i2 * cols + col0 + pc]);
                    }
                    self.accumulate(p, &seg);
                    col0 += pc;
                }
            }
            Op::SliceRows(a, r0) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                da[r0 * ac..r0 * ac + g.len()].copy_from_slice(g);
                self.accumulate(a, &da);
            }
            Op::SliceCols(a, c0) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..rows {
                    for j in 0..cols {
                        da[i2 * ac + c0 + j] = g[i2 * cols + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::GatherRows(a, idx) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..ac {
                        da[src * ac + j] += g[o * ac + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::RepeatRows(a, n) => {
                let ac = self.nodes[a.0].cols;
                let mut da = vec![0.0; ac];
                for i2 in 0..n {
                    for j in 0..ac {
                        da[j] += g[i2 * ac + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::RepeatCols(a, n) => {
                let ar = self.nodes[a.0].rows;
                let mut da = vec![0.0; ar];
                for i2 in 0..ar {
                    for j in 0..n {
                        da[i2] += g[i2 * n + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g.iter().zip(&out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.iter().zip(&out).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                self.accumulate(a, &da);
            }
            Op::Softplus(a) => {
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> =
                    g.iter().zip(&av).map(|(gi, x)| gi * stable_sigmoid(*x)).collect();
                self.accumulate(a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g.iter().zip(&out).map(|(gi, y)| gi * y).collect();
                self.accumulate(a, &da);
            }
            Op::Log(a) => {
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g.iter().zip(&av).map(|(gi, x)| gi / x).collect();
                self.accumulate(a, &da);
            }
            Op::Cosh(a) => {
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g.iter().zip(&av).map(|(gi, x)| gi * x.sinh()).collect();
                self.accumulate(a, &da);
            }
            Op::Sinh(a) => {
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g.iter().zip(&av).map(|(gi, x)| gi * x.cosh()).collect();
                self.accumulate(a, &da);
            }
            Op::Atanh(a) => {
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> =
                    g.iter().zip(&av).map(|(gi, x)| gi / (1.0 - x * x)).collect();
                self.accumulate(a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> =
                    g.iter().zip(&out).map(|(gi, y)| gi / (2.0 * y.max(1e-150))).collect();
                self.accumulate(a, &da);
            }
            Op::Recip(a) => {
                let da: Vec<f64> = g.iter().zip(&out).map(|(gi, y)| -gi * y * y).collect();
                self.accumulate(a, &da);
            }
            Op::Abs(a) => {
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(gi, x)| gi * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(gi, x)| if *x >= lo && *x <= hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::RowNorms(a) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let av = self.nodes[a.0].data.clone();
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..ar {
                    let norm = out[i2].max(1e-12);
                    for j in 0..ac {
                        da[i2 * ac + j] = g[i2] * av[i2 * ac + j] / norm;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::RowSums(a) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..ar {
                    for j in 0..ac {
                        da[i2 * ac + j] = g[i2];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ColSums(a) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..ar {
                    da[i2 * ac..(i2 + 1) * ac].copy_from_slice(g);
                }
                self.accumulate(a, &da);
            }
            Op::RowMeans(a) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..ar {
                    for j in 0..ac {
                        da[i2 * ac + j] = g[i2] / ac as f64;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ColMeans(a) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for i2 in 0..ar {
                    for j in 0..ac {
                        da[i2 * ac + j] = g[j] / ar as f64;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::RowMax(a, argmax) => {
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let mut da = vec![0.0; ar * ac];
                for (i2, &j) in argmax.iter().enumerate() {
                    da[i2 * ac + j] = g[i2];
                }
                self.accumulate(a, &da);
            }
            Op::ReduceMax(a, arg) => {
                let n = self.nodes[a.0].data.len();
                let mut da = vec![0.0; n];
                da[arg] = g[0];
                self.accumulate(a, &da);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].data.len();
                self.accumulate(a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len();
                self.accumulate(a, &vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxRows(a) => {
                let mut da = vec![0.0; rows * cols];
                for i2 in 0..rows {
                    let y = &out[i2 * cols..(i2 + 1) * cols];
                    let gi = &g[i2 * cols..(i2 + 1) * cols];
                    let dot: f64 = y.iter().zip(gi).map(|(yj, gj)| yj * gj).sum();
                    for j in 0..cols {
                        da[i2 * cols + j] = y[j] * (gi[j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::SoftmaxCols(a) => {
                let mut da = vec![0.0; rows * cols];
                for j in 0..cols {
                    let mut dot = 0.0;
                    for i2 in 0..rows {
                        dot += out[i2 * cols + j] * g[i2 * cols + j];
                    }
                    for i2 in 0..rows {
                        da[i2 * cols + j] = out[i2 * cols + j] * (g[i2 * cols + j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNormRows(a) => {
                let av = self.nodes[a.0].data.clone();
                let mut da = vec![0.0; rows * cols];
                let cf = cols as f64;
                for i2 in 0..rows {
                    let row = &av[i2 * cols..(i2 + 1) * cols];
                    let y = &out[i2 * cols..(i2 + 1) * cols];
                    let gi = &g[i2 * cols..(i2 + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cf;
                    let denom = (var + LAYER_NORM_EPS).sqrt();
                    let g_mean: f64 = gi.iter().sum::<f64>() / cf;
                    let gy_mean: f64 = gi.iter().zip(y).map(|(gj, yj)| gj * yj).sum::<f64>() / cf;
                    for j in 0..cols {
                        da[i2 * cols + j] = (gi[j] - g_mean - y[j] * gy_mean) / denom;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ScaleRows(a, s) => {
                let av = self.nodes[a.0].data.clone();
                let sv = self.nodes[s.0].data.clone();
                let mut da = vec![0.0; rows * cols];
                let mut ds = vec![0.0; rows];
                for i2 in 0..rows {
                    for j in 0..cols {
                        da[i2 * cols + j] = g[i2 * cols + j] * sv[i2];
                        ds[i2] += g[i2 * cols + j] * av[i2 * cols + j];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(s, &ds);
            }
            Op::ScaleCols(a, s) => {
                let av = self.nodes[a.0].data.clone();
                let sv = self.nodes[s.0].data.clone();
                let mut da = vec![0.0; rows * cols];
                let mut ds = vec![0.0; cols];
                for i2 in 0..rows {
                    for j in 0..cols {
                        da[i2 * cols + j] = g[i2 * cols + j] * sv[j];
                        ds[j] += g[i2 * cols + j] * av[i2 * cols + j];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(s, &ds);
            }
            Op::AddRowBroadcast(a, row) => {
                self.accumulate(a, g);
                let mut dr = vec![0.0; cols];
                for i2 in 0..rows {
                    for j in 0..cols {
                        dr[j] += g[i2 * cols + j];
                    }
                }
                self.accumulate(row, &dr);
            }
            Op::PowConstBase(e, base) => {
                // d(b^e)/de = b^e * ln b, with the convention that a zero
                // base contributes zero (its output is identically zero for
                // every positive exponent).
                let mut ds = 0.0;
                for (k, &b) in base.data().iter().enumerate() {
                    if b > 0.0 {
                        ds += g[k] * out[k] * b.ln();
                    }
                }
                self.accumulate(e, &[ds]);
            }
        }
        Ok(())
    }
}

fn softmax_slice(input: &[f64], out: &mut [f64]) {
    let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(input) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
