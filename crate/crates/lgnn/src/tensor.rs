//! Dense-matrix reverse-mode automatic differentiation.
//!
//! The engine is a flat tape of operation nodes. A [`Tensor`] is an index into
//! the tape; parameters enter as leaves and the tape is rebuilt for every
//! training step. Besides the usual dense ops, the tape provides the sparse
//! graph primitives every layer here is built from: `gather_rows`,
//! `scatter_sum` / `scatter_mean` and `segment_softmax`.

use crate::real::Real;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("log of non-positive entry")]
    LogDomain,
    #[error("backward requires a 1x1 loss, got {0}")]
    NonScalarLoss(Shape),
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("invalid matrix data: {0} entries for {1}")]
    BadData(usize, Shape),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Plain row-major dense matrix. Holds values outside the tape (parameters,
/// gradients, frozen inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::BadData(data.len(), Shape { rows, cols }));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadData(row.len(), Shape { rows: r, cols: c }));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn scalar(x: F) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape {
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: F) {
        self.data[i * self.cols + j] = x;
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element type, e.g. f32 parameters to f64 for gradient checks.
    pub fn cast<G: Real>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }
}

/// C += A * B
fn mm_nn<F: Real>(a: &Matrix<F>, b: &Matrix<F>, c: &mut Matrix<F>) {
    debug_assert_eq!(a.cols, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = &mut c.data[i * c.cols..(i + 1) * c.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (cj, &bkj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bkj;
            }
        }
    }
}

/// C += A * B^T
fn mm_nt<F: Real>(a: &Matrix<F>, b: &Matrix<F>, c: &mut Matrix<F>) {
    debug_assert_eq!(a.cols, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c.data[i * c.cols + j] = c.data[i * c.cols + j] + acc;
        }
    }
}

/// C += A^T * B
fn mm_tn<F: Real>(a: &Matrix<F>, b: &Matrix<F>, c: &mut Matrix<F>) {
    debug_assert_eq!(a.rows, b.rows);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            if aki == F::zero() {
                continue;
            }
            let crow = &mut c.data[i * c.cols..(i + 1) * c.cols];
            for (cj, &bkj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aki * bkj;
            }
        }
    }
}

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Tensor, Tensor),
    /// A * B^T
    MatMulNT(Tensor, Tensor),
    Binary(Elementwise, Tensor, Tensor),
    /// Row vector (1 x n) broadcast-added to each row of an m x n matrix.
    AddRow(Tensor, Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, F),
    Tanh(Tensor),
    Exp(Tensor),
    Log(Tensor),
    ClampMin(Tensor, F),
    Scale(Tensor, F),
    AddScalar(Tensor, F),
    SoftmaxRows(Tensor),
    SumAll(Tensor),
    RowSum(Tensor),
    Gather(Tensor, Vec<usize>),
    ScatterSum(Tensor, Vec<usize>),
    ScatterMean(Tensor, Vec<usize>, Vec<usize>),
    SegmentSoftmax(Tensor, Vec<usize>),
    /// Elementwise multiply of an m x n matrix by an m x 1 column.
    MulCol(Tensor, Tensor),
    /// Broadcast-add an m x 1 column to each column of an m x n matrix.
    AddCol(Tensor, Tensor),
    ConcatCols(Tensor, Tensor),
    Dropout(Tensor, Vec<F>),
}

struct Node<F> {
    value: Matrix<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Recorded computation. Rebuilt for every forward pass; `backward` may run
/// once per tape.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Matrix<F>>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tensor) -> &Matrix<F> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> Shape {
        self.nodes[t.0].value.shape()
    }

    /// Gradient buffer populated by `backward`, if this tensor required one.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix<F>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Matrix<F>, requires_grad: bool, op: Op<F>, opname: &'static str) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: opname });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn requires(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix<F>, requires_grad: bool) -> Result<Tensor> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Matrix<F>) -> Result<Tensor> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols != vb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = Matrix::zeros(va.rows, vb.cols);
        mm_nn(va, vb, &mut out);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`; the natural orientation for `x * W^T` with row-major data.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols != vb.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = Matrix::zeros(va.rows, vb.rows);
        mm_nt(va, vb, &mut out);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::MatMulNT(a, b), "matmul_nt")
    }

    pub fn binary(&mut self, op: Elementwise, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        va.same_shape(vb, "binary")?;
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| match op {
                Elementwise::Add => x + y,
                Elementwise::Sub => x - y,
                Elementwise::Mul => x * y,
            })
            .collect();
        let out = Matrix {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::Binary(op, a, b), "binary")
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(Elementwise::Mul, a, b)
    }

    /// Broadcast a `1 x n` row vector across the rows of an `m x n` matrix.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if vr.rows != 1 || vr.cols != va.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: va.shape(),
                rhs: vr.shape(),
            });
        }
        let mut out = va.clone();
        for i in 0..out.rows {
            for (o, &r) in out.row_mut(i).iter_mut().zip(&vr.data) {
                *o = *o + r;
            }
        }
        let rg = self.requires(a) || self.requires(row);
        self.push(out, rg, Op::AddRow(a, row), "add_row")
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.nodes[a.0]
            .value
            .map(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.requires(a);
        self.push(out, rg, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: F) -> Result<Tensor> {
        let out = self.nodes[a.0]
            .value
            .map(|x| if x > F::zero() { x } else { slope * x });
        let rg = self.requires(a);
        self.push(out, rg, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.nodes[a.0].value.map(|x| x.tanh());
        let rg = self.requires(a);
        self.push(out, rg, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.nodes[a.0].value.map(|x| x.exp());
        let rg = self.requires(a);
        self.push(out, rg, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        if self.nodes[a.0].value.data.iter().any(|&x| x <= F::zero()) {
            return Err(TensorError::LogDomain);
        }
        let out = self.nodes[a.0].value.map(|x| x.ln());
        let rg = self.requires(a);
        self.push(out, rg, Op::Log(a), "log")
    }

    pub fn clamp_min(&mut self, a: Tensor, floor: F) -> Result<Tensor> {
        let out = self.nodes[a.0].value.map(|x| if x < floor { floor } else { x });
        let rg = self.requires(a);
        self.push(out, rg, Op::ClampMin(a, floor), "clamp_min")
    }

    pub fn scale(&mut self, a: Tensor, c: F) -> Result<Tensor> {
        let out = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.requires(a);
        self.push(out, rg, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Tensor, c: F) -> Result<Tensor> {
        let out = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.requires(a);
        self.push(out, rg, Op::AddScalar(a, c), "add_scalar")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(va.rows, va.cols);
        for i in 0..va.rows {
            softmax_slice(va.row(i), out.row_mut(i));
        }
        let rg = self.requires(a);
        self.push(out, rg, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn sum_all(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.nodes[a.0].value.data.iter().fold(F::zero(), |acc, &x| acc + x);
        let rg = self.requires(a);
        self.push(Matrix::scalar(s), rg, Op::SumAll(a), "sum_all")
    }

    /// `m x n` -> `m x 1` row sums.
    pub fn row_sum(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(va.rows, 1);
        for i in 0..va.rows {
            out.data[i] = va.row(i).iter().fold(F::zero(), |acc, &x| acc + x);
        }
        let rg = self.requires(a);
        self.push(out, rg, Op::RowSum(a), "row_sum")
    }

    /// Row `e` of the output is row `idx[e]` of the input. Backward
    /// scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: Tensor, idx: &[usize]) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(idx.len(), va.cols);
        for (e, &i) in idx.iter().enumerate() {
            if i >= va.rows {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: va.rows,
                });
            }
            out.row_mut(e).copy_from_slice(va.row(i));
        }
        let rg = self.requires(a);
        self.push(out, rg, Op::Gather(a, idx.to_vec()), "gather_rows")
    }

    pub fn scatter_sum(&mut self, a: Tensor, targets: &[usize], segments: usize) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        check_targets(targets, va.rows, segments)?;
        let mut out = Matrix::zeros(segments, va.cols);
        for (e, &v) in targets.iter().enumerate() {
            let src = va.row(e);
            for (o, &x) in out.row_mut(v).iter_mut().zip(src) {
                *o = *o + x;
            }
        }
        let rg = self.requires(a);
        self.push(out, rg, Op::ScatterSum(a, targets.to_vec()), "scatter_sum")
    }

    /// Segment mean; empty segments yield zero rows.
    pub fn scatter_mean(&mut self, a: Tensor, targets: &[usize], segments: usize) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        check_targets(targets, va.rows, segments)?;
        let mut counts = vec![0usize; segments];
        for &v in targets {
            counts[v] += 1;
        }
        let mut out = Matrix::zeros(segments, va.cols);
        for (e, &v) in targets.iter().enumerate() {
            let src = va.row(e);
            for (o, &x) in out.row_mut(v).iter_mut().zip(src) {
                *o = *o + x;
            }
        }
        for v in 0..segments {
            if counts[v] > 0 {
                let inv = F::one() / F::from_usize(counts[v]);
                for o in out.row_mut(v) {
                    *o = *o * inv;
                }
            }
        }
        let rg = self.requires(a);
        self.push(
            out,
            rg,
            Op::ScatterMean(a, targets.to_vec(), counts),
            "scatter_mean",
        )
    }

    /// Softmax over `E x 1` scores within each target segment, with per-segment
    /// max subtraction.
    pub fn segment_softmax(&mut self, a: Tensor, targets: &[usize], segments: usize) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if va.cols != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                lhs: va.shape(),
                rhs: Shape { rows: va.rows, cols: 1 },
            });
        }
        check_targets(targets, va.rows, segments)?;
        let mut maxes = vec![F::neg_infinity(); segments];
        for (e, &v) in targets.iter().enumerate() {
            if va.data[e] > maxes[v] {
                maxes[v] = va.data[e];
            }
        }
        let mut sums = vec![F::zero(); segments];
        let mut out = Matrix::zeros(va.rows, 1);
        for (e, &v) in targets.iter().enumerate() {
            let x = (va.data[e] - maxes[v]).exp();
            out.data[e] = x;
            sums[v] = sums[v] + x;
        }
        for (e, &v) in targets.iter().enumerate() {
            out.data[e] = out.data[e] / sums[v];
        }
        let rg = self.requires(a);
        self.push(
            out,
            rg,
            Op::SegmentSoftmax(a, targets.to_vec()),
            "segment_softmax",
        )
    }

    /// Multiply each row of an `m x n` matrix by the matching entry of an
    /// `m x 1` column.
    pub fn mul_col(&mut self, a: Tensor, col: Tensor) -> Result<Tensor> {
        let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        if vc.rows != va.rows || vc.cols != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: va.shape(),
                rhs: vc.shape(),
            });
        }
        let mut out = va.clone();
        for i in 0..out.rows {
            let c = vc.data[i];
            for o in out.row_mut(i) {
                *o = *o * c;
            }
        }
        let rg = self.requires(a) || self.requires(col);
        self.push(out, rg, Op::MulCol(a, col), "mul_col")
    }

    /// Add an `m x 1` column to every column of an `m x n` matrix.
    pub fn add_col(&mut self, a: Tensor, col: Tensor) -> Result<Tensor> {
        let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        if vc.rows != va.rows || vc.cols != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_col",
                lhs: va.shape(),
                rhs: vc.shape(),
            });
        }
        let mut out = va.clone();
        for i in 0..out.rows {
            let c = vc.data[i];
            for o in out.row_mut(i) {
                *o = *o + c;
            }
        }
        let rg = self.requires(a) || self.requires(col);
        self.push(out, rg, Op::AddCol(a, col), "add_col")
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rows != vb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = Matrix::zeros(va.rows, va.cols + vb.cols);
        for i in 0..va.rows {
            out.row_mut(i)[..va.cols].copy_from_slice(va.row(i));
            out.row_mut(i)[va.cols..].copy_from_slice(vb.row(i));
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Inverted dropout with a caller-provided keep mask already scaled by
    /// `1/keep`. Entries are either `0` or `1/keep`.
    pub fn dropout(&mut self, a: Tensor, mask: Vec<F>) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if mask.len() != va.data.len() {
            return Err(TensorError::BadData(mask.len(), va.shape()));
        }
        let data = va.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Matrix {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        let rg = self.requires(a);
        self.push(out, rg, Op::Dropout(a, mask), "dropout")
    }

    /// Reverse sweep from a scalar loss. Populates gradient buffers for every
    /// `requires_grad` tensor reachable from `loss`; a second call on the same
    /// tape is an error.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape.rows != 1 || shape.cols != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Matrix::scalar(F::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            self.accumulate(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, t: Tensor, delta: &Matrix<F>) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[t.0];
        match slot {
            Some(g) => {
                for (gi, &d) in g.data.iter_mut().zip(&delta.data) {
                    *gi = *gi + d;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }

    fn add_grad_owned(&mut self, t: Tensor, delta: Matrix<F>) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[t.0];
        match slot {
            Some(g) => {
                for (gi, d) in g.data.iter_mut().zip(delta.data) {
                    *gi = *gi + d;
                }
            }
            None => *slot = Some(delta),
        }
    }

    fn accumulate(&mut self, id: usize, gout: &Matrix<F>) {
        // Safe to borrow values immutably while mutating grads: split via ptr
        // is avoided by cloning the small descriptors we need.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let vb = &self.nodes[b.0].value;
                    let mut da = Matrix::zeros(self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
                    mm_nt(gout, vb, &mut da);
                    self.add_grad_owned(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let va = &self.nodes[a.0].value;
                    let mut db = Matrix::zeros(self.nodes[b.0].value.rows, self.nodes[b.0].value.cols);
                    mm_tn(va, gout, &mut db);
                    self.add_grad_owned(b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let vb = &self.nodes[b.0].value;
                    let mut da = Matrix::zeros(self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
                    mm_nn(gout, vb, &mut da);
                    self.add_grad_owned(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let va = &self.nodes[a.0].value;
                    let mut db = Matrix::zeros(self.nodes[b.0].value.rows, self.nodes[b.0].value.cols);
                    mm_tn(gout, va, &mut db);
                    self.add_grad_owned(b, db);
                }
            }
            Op::Binary(op, a, b) => {
                let (op, a, b) = (*op, *a, *b);
                match op {
                    Elementwise::Add => {
                        self.add_grad(a, gout);
                        self.add_grad(b, gout);
                    }
                    Elementwise::Sub => {
                        self.add_grad(a, gout);
                        let neg = gout.map(|x| -x);
                        self.add_grad_owned(b, neg);
                    }
                    Elementwise::Mul => {
                        if self.nodes[a.0].requires_grad {
                            let vb = &self.nodes[b.0].value;
                            let da = elem_mul(gout, vb);
                            self.add_grad_owned(a, da);
                        }
                        if self.nodes[b.0].requires_grad {
                            let va = &self.nodes[a.0].value;
                            let db = elem_mul(gout, va);
                            self.add_grad_owned(b, db);
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                self.add_grad(a, gout);
                if self.nodes[row.0].requires_grad {
                    let mut dr = Matrix::zeros(1, gout.cols);
                    for i in 0..gout.rows {
                        for (d, &g) in dr.data.iter_mut().zip(gout.row(i)) {
                            *d = *d + g;
                        }
                    }
                    self.add_grad_owned(row, dr);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let va = &self.nodes[a.0].value;
                let da = zip_map(gout, va, |g, x| if x > F::zero() { g } else { F::zero() });
                self.add_grad_owned(a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let va = &self.nodes[a.0].value;
                let da = zip_map(gout, va, |g, x| if x > F::zero() { g } else { g * slope });
                self.add_grad_owned(a, da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                let da = zip_map(gout, y, |g, t| g * (F::one() - t * t));
                self.add_grad_owned(a, da);
            }
            Op::Exp(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                let da = elem_mul(gout, y);
                self.add_grad_owned(a, da);
            }
            Op::Log(a) => {
                let a = *a;
                let va = &self.nodes[a.0].value;
                let da = zip_map(gout, va, |g, x| g / x);
                self.add_grad_owned(a, da);
            }
            Op::ClampMin(a, floor) => {
                let (a, floor) = (*a, *floor);
                let va = &self.nodes[a.0].value;
                let da = zip_map(gout, va, |g, x| if x >= floor { g } else { F::zero() });
                self.add_grad_owned(a, da);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da = gout.map(|g| g * c);
                self.add_grad_owned(a, da);
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.add_grad(a, gout);
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                let mut da = Matrix::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let yi = y.row(i);
                    let gi = gout.row(i);
                    let dot = yi
                        .iter()
                        .zip(gi)
                        .fold(F::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for (d, (&yv, &gv)) in da.row_mut(i).iter_mut().zip(yi.iter().zip(gi)) {
                        *d = yv * (gv - dot);
                    }
                }
                self.add_grad_owned(a, da);
            }
            Op::SumAll(a) => {
                let a = *a;
                let g = gout.data[0];
                let va = &self.nodes[a.0].value;
                let da = Matrix {
                    rows: va.rows,
                    cols: va.cols,
                    data: vec![g; va.data.len()],
                };
                self.add_grad_owned(a, da);
            }
            Op::RowSum(a) => {
                let a = *a;
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                for i in 0..va.rows {
                    let g = gout.data[i];
                    for d in da.row_mut(i) {
                        *d = g;
                    }
                }
                self.add_grad_owned(a, da);
            }
            Op::Gather(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                for (e, &i) in idx.iter().enumerate() {
                    let g = gout.row(e);
                    for (d, &gv) in da.row_mut(i).iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                self.add_grad_owned(a, da);
            }
            Op::ScatterSum(a, targets) => {
                let (a, targets) = (*a, targets.clone());
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                for (e, &v) in targets.iter().enumerate() {
                    da.row_mut(e).copy_from_slice(gout.row(v));
                }
                self.add_grad_owned(a, da);
            }
            Op::ScatterMean(a, targets, counts) => {
                let (a, targets, counts) = (*a, targets.clone(), counts.clone());
                let va = &self.nodes[a.0].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                for (e, &v) in targets.iter().enumerate() {
                    let inv = F::one() / F::from_usize(counts[v]);
                    for (d, &g) in da.row_mut(e).iter_mut().zip(gout.row(v)) {
                        *d = g * inv;
                    }
                }
                self.add_grad_owned(a, da);
            }
            Op::SegmentSoftmax(a, targets) => {
                let (a, targets) = (*a, targets.clone());
                let y = &self.nodes[id].value;
                let segments = targets.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![F::zero(); segments];
                for (e, &v) in targets.iter().enumerate() {
                    dots[v] = dots[v] + y.data[e] * gout.data[e];
                }
                let mut da = Matrix::zeros(y.rows, 1);
                for (e, &v) in targets.iter().enumerate() {
                    da.data[e] = y.data[e] * (gout.data[e] - dots[v]);
                }
                self.add_grad_owned(a, da);
            }
            Op::MulCol(a, col) => {
                let (a, col) = (*a, *col);
                if self.nodes[a.0].requires_grad {
                    let vc = &self.nodes[col.0].value;
                    let mut da = gout.clone();
                    for i in 0..da.rows {
                        let c = vc.data[i];
                        for d in da.row_mut(i) {
                            *d = *d * c;
                        }
                    }
                    self.add_grad_owned(a, da);
                }
                if self.nodes[col.0].requires_grad {
                    let va = &self.nodes[a.0].value;
                    let mut dc = Matrix::zeros(va.rows, 1);
                    for i in 0..va.rows {
                        let acc = va
                            .row(i)
                            .iter()
                            .zip(gout.row(i))
                            .fold(F::zero(), |s, (&x, &g)| s + x * g);
                        dc.data[i] = acc;
                    }
                    self.add_grad_owned(col, dc);
                }
            }
            Op::AddCol(a, col) => {
                let (a, col) = (*a, *col);
                self.add_grad(a, gout);
                if self.nodes[col.0].requires_grad {
                    let mut dc = Matrix::zeros(gout.rows, 1);
                    for i in 0..gout.rows {
                        dc.data[i] = gout.row(i).iter().fold(F::zero(), |s, &g| s + g);
                    }
                    self.add_grad_owned(col, dc);
                }
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a.0].value.cols;
                if self.nodes[a.0].requires_grad {
                    let mut da = Matrix::zeros(gout.rows, ca);
                    for i in 0..gout.rows {
                        da.row_mut(i).copy_from_slice(&gout.row(i)[..ca]);
                    }
                    self.add_grad_owned(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let cb = self.nodes[b.0].value.cols;
                    let mut db = Matrix::zeros(gout.rows, cb);
                    for i in 0..gout.rows {
                        db.row_mut(i).copy_from_slice(&gout.row(i)[ca..]);
                    }
                    self.add_grad_owned(b, db);
                }
            }
            Op::Dropout(a, mask) => {
                let (a, mask) = (*a, mask.clone());
                let da = Matrix {
                    rows: gout.rows,
                    cols: gout.cols,
                    data: gout.data.iter().zip(&mask).map(|(&g, &m)| g * m).collect(),
                };
                self.add_grad_owned(a, da);
            }
        }
    }
}

fn softmax_slice<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn check_targets(targets: &[usize], rows: usize, segments: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(TensorError::BadData(
            targets.len(),
            Shape { rows, cols: 1 },
        ));
    }
    for &v in targets {
        if v >= segments {
            return Err(TensorError::IndexOutOfRange {
                index: v,
                len: segments,
            });
        }
    }
    Ok(())
}

fn elem_mul<F: Real>(a: &Matrix<F>, b: &Matrix<F>) -> Matrix<F> {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    }
}

fn zip_map<F: Real>(a: &Matrix<F>, b: &Matrix<F>, f: impl Fn(F, F) -> F) -> Matrix<F> {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false).unwrap();
        let b = t.leaf(m(&[vec![1.0], vec![1.0]]), false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t
            .leaf(m(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false)
            .unwrap();
        let b = t.leaf(m(&[vec![5.0], vec![6.0]]), false).unwrap();
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[5.0, 6.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Matrix::zeros(2, 3), false).unwrap();
        let b = t.leaf(Matrix::zeros(2, 2), false).unwrap();
        assert!(matches!(
            t.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_and_tanh_anchors() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![-1.0, 0.0, 2.0]]), false).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = t.leaf(Matrix::scalar(0.0), false).unwrap();
        let th = t.tanh(z).unwrap();
        assert_eq!(t.value(th).data(), &[0.0]);
    }

    #[test]
    fn mul_backward_swaps_operands() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(2.0), true).unwrap();
        let y = t.leaf(Matrix::scalar(3.0), true).unwrap();
        let p = t.mul(x, y).unwrap();
        let loss = t.sum_all(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0]);
        assert_eq!(t.grad(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_rows_uniform_and_stable() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![0.0, 0.0], vec![1000.0, 0.0]]), false).unwrap();
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-9);
        assert!((v.get(0, 1) - 0.5).abs() < 1e-9);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-6);
        assert!(v.get(1, 1).abs() < 1e-6);
    }

    #[test]
    fn gather_rows_examples() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0], vec![2.0], vec![3.0]]), false).unwrap();
        let y = t.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 1.0]);
        let id = t.gather_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(t.value(id).data(), t.value(x).data());
        assert!(matches!(
            t.gather_rows(x, &[3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gather_duplicate_index_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0], vec![2.0]]), true).unwrap();
        let g = t.gather_rows(x, &[0, 0]).unwrap();
        let loss = t.sum_all(g).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn scatter_sum_and_mean_examples() {
        let mut t = Tape::new();
        let v = t
            .leaf(m(&[vec![1.0], vec![2.0], vec![3.0]]), false)
            .unwrap();
        let mean = t.scatter_mean(v, &[1, 1, 1], 2).unwrap();
        assert_eq!(t.value(mean).data(), &[0.0, 2.0]);
        let sum = t.scatter_sum(v, &[1, 1, 1], 2).unwrap();
        assert_eq!(t.value(sum).data(), &[0.0, 6.0]);
    }

    #[test]
    fn scatter_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (e, d, n) = (20, 3, 5);
        let vals: Vec<f64> = (0..e * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<usize> = (0..e).map(|_| rng.gen_range(0..n)).collect();
        let mut t = Tape::new();
        let v = t.leaf(Matrix::from_vec(e, d, vals.clone()).unwrap(), false).unwrap();
        let s = t.scatter_sum(v, &targets, n).unwrap();
        // brute-force per-segment loop
        let mut expect = vec![0.0; n * d];
        for (row, &tv) in targets.iter().enumerate() {
            for j in 0..d {
                expect[tv * d + j] += vals[row * d + j];
            }
        }
        assert_eq!(t.value(s).data(), &expect[..]);
    }

    #[test]
    fn segment_softmax_examples() {
        let mut t = Tape::new();
        let s = t
            .leaf(m(&[vec![0.3], vec![0.3], vec![7.0]]), false)
            .unwrap();
        let y = t.segment_softmax(s, &[0, 0, 1], 2).unwrap();
        let v = t.value(y);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-9);
        assert!((v.get(1, 0) - 0.5).abs() < 1e-9);
        assert!((v.get(2, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_x() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, -2.0], vec![0.5, 3.0]]), true).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, -2.0], vec![0.5, 3.0]]), true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        let loss = t.scale(s, 0.5).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, 2.0]]), true).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, 0.0]]), false).unwrap();
        assert!(matches!(t.log(x), Err(TensorError::LogDomain)));
    }
}
