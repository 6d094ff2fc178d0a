//! Dense matrices and a reverse-mode tape.
//!
//! Everything is `f64`. A [`Tape`] records primitive operations as they are
//! evaluated; [`Tape::backward`] replays them in reverse and accumulates
//! gradients on every node that requires one. Parameters are copied onto the
//! tape with [`Tape::param`]; their gradients are read back with
//! [`Tape::grad`] and folded into the owning [`Matrix`] by the caller.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(m: MatrixRepr) -> Result<Self> {
        Matrix::from_vec(m.rows, m.cols, m.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols], grad: None }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data, grad: None })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self { rows: 1, cols: values.len(), data: values, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for a {}x{} matrix",
                g.len(),
                self.rows,
                self.cols
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Copy of the values without the gradient slot.
    pub fn clone_value(&self) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.clone(), grad: None }
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!("matmul of {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(false, false, a, b, 0.0, &mut out.data);
    Ok(out)
}

/// `c = beta·c + op(a)·op(b)` where `op` optionally transposes.
fn gemm(ta: bool, tb: bool, a: &Matrix, b: &Matrix, beta: f64, c: &mut [f64]) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`,
    // whose lengths were checked against the shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax of a non-empty slice.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-ln(max(p[target], PROB_FLOOR))`.
pub fn cross_entropy(predicted: &[f64], target: usize) -> Result<f64> {
    let p = predicted.get(target).ok_or_else(|| {
        Error::Argument(format!("target index {target} out of range for {} classes", predicted.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a fixed mask (dropout).
    Mask(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    /// Summed cross-entropy of each row against an optional target.
    CrossEntropy(Var, Vec<Option<usize>>),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Flatten(Var),
    /// Unfold `L x C` into `(L-k+1) x (k*C)` sliding windows.
    Im2Col(Var),
    /// Per-column max over non-overlapping row windows; stores argmax rows.
    MaxPool(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Ordered record of evaluated operations.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, trainable: false });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        let mut m = m;
        m.grad = None;
        self.push(m, Op::Leaf, false)
    }

    /// A borrowed value that receives no gradient.
    pub fn constant_ref(&mut self, m: &'a Matrix) -> Var {
        self.push_cow(Cow::Borrowed(m), Op::Leaf, false)
    }

    /// A trainable leaf. Any gradient stored on `m` itself is ignored.
    pub fn param(&mut self, m: &'a Matrix) -> Var {
        let v = self.push_cow(Cow::Borrowed(m), Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn trainable_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.trainable).map(|(i, _)| Var(i))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone_value();
        out.data.iter_mut().zip(&self.value(b).data).for_each(|(x, y)| *x += y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, rr) = (self.value(a), self.value(row));
        if rr.rows != 1 || rr.cols != ar.cols {
            return Err(Error::Shape(format!("row bias {:?} for {:?}", rr.shape(), ar.shape())));
        }
        let mut out = ar.clone_value();
        for chunk in out.data.chunks_mut(rr.cols.max(1)) {
            chunk.iter_mut().zip(&rr.data).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone_value();
        out.data.iter_mut().zip(&self.value(b).data).for_each(|(x, y)| *x *= y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone_value();
        out.data.iter_mut().for_each(|x| *x *= k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape("mask length differs from operand".into()));
        }
        let mut out = self.value(a).clone_value();
        out.data.iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mask(a, mask), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(a).clone_value();
        out.data.iter_mut().for_each(|x| *x = f(*x));
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.cols == 0 {
            return Err(Error::Argument("softmax of an empty row".into()));
        }
        if !m.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = m.clone_value();
        for row in out.data.chunks_mut(m.cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Sum over rows of `-ln(max(p[row, target], PROB_FLOOR))`; rows whose
    /// target is `None` are masked out. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, probs: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let m = self.value(probs);
        if targets.len() != m.rows {
            return Err(Error::Shape(format!("{} targets for {} prediction rows", targets.len(), m.rows)));
        }
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                loss += cross_entropy(m.row(r), t)?;
            }
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy(probs, targets), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Matrix::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |v| self.value(*v).rows);
        if parts.iter().any(|v| self.value(*v).rows != rows) {
            return Err(Error::Shape("concat_cols of differing row counts".into()));
        }
        let cols: usize = parts.iter().map(|v| self.value(*v).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for v in parts {
            let m = self.value(*v);
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |v| self.value(*v).cols);
        if parts.iter().any(|v| self.value(*v).cols != cols) {
            return Err(Error::Shape("concat_rows of differing column counts".into()));
        }
        let mut data = Vec::new();
        for v in parts {
            data.extend_from_slice(&self.value(*v).data);
        }
        let rows = data.len() / cols.max(1);
        let rg = self.rg(parts);
        Ok(self.push(Matrix::from_vec(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.cols {
            return Err(Error::Shape(format!("column slice {start}..{end} of {:?}", m.shape())));
        }
        let w = end - start;
        let mut out = Matrix::zeros(m.rows, w);
        for r in 0..m.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&m.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start, end), rg))
    }

    /// Builds a matrix from the listed rows of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let m = self.value(a);
        if let Some(bad) = rows.iter().find(|&&r| r >= m.rows) {
            return Err(Error::Shape(format!("row {bad} of {:?}", m.shape())));
        }
        let mut data = Vec::with_capacity(rows.len() * m.cols);
        for &r in &rows {
            data.extend_from_slice(m.row(r));
        }
        let out = Matrix::from_vec(rows.len(), m.cols, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, rows), rg))
    }

    /// Reshapes to a single row.
    pub fn flatten(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Matrix::row_vector(m.data.clone());
        let rg = self.rg(&[a]);
        self.push(out, Op::Flatten(a), rg)
    }

    pub fn im2col(&mut self, a: Var, width: usize) -> Result<Var> {
        let m = self.value(a);
        if width == 0 || m.rows < width {
            return Err(Error::Shape(format!("window of width {width} over {} rows", m.rows)));
        }
        let out_rows = m.rows - width + 1;
        let span = width * m.cols;
        let mut out = Matrix::zeros(out_rows, span);
        for t in 0..out_rows {
            // Rows t..t+width are contiguous in row-major storage.
            out.data[t * span..(t + 1) * span].copy_from_slice(&m.data[t * m.cols..t * m.cols + span]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Im2Col(a), rg))
    }

    pub fn max_pool(&mut self, a: Var, window: usize) -> Result<Var> {
        if window < 1 {
            return Err(Error::Argument("pooling window must be at least 1".into()));
        }
        let m = self.value(a);
        if m.rows < 1 {
            return Err(Error::Shape("pooling over zero rows".into()));
        }
        let out_rows = m.rows.div_ceil(window);
        let mut out = Matrix::zeros(out_rows, m.cols);
        let mut arg = vec![0usize; out_rows * m.cols];
        for w in 0..out_rows {
            let lo = w * window;
            let hi = (lo + window).min(m.rows);
            for c in 0..m.cols {
                let mut best = lo;
                for r in lo + 1..hi {
                    if m.get(r, c) > m.get(best, c) {
                        best = r;
                    }
                }
                out.data[w * m.cols + c] = m.get(best, c);
                arg[w * m.cols + c] = best;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaxPool(a, arg), rg))
    }

    /// Valid 1-D convolution followed by ReLU.
    ///
    /// `kernel` is `(width * C) x F` with row `i * C + c` holding the weights
    /// for offset `i` and input channel `c`; `bias` is `1 x F`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, width: usize) -> Result<Var> {
        let channels = self.value(input).cols;
        if self.value(kernel).rows != width * channels {
            return Err(Error::Shape(format!(
                "kernel with {} rows for width {width} over {channels} channels",
                self.value(kernel).rows
            )));
        }
        let cols = self.im2col(input, width)?;
        let z = self.matmul(cols, kernel)?;
        let z = self.add_row(z, bias)?;
        Ok(self.relu(z))
    }

    /// Reverse sweep from a scalar node. Gradients are added to whatever
    /// previous backward calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward from a non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut local: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local)?;
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = local[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gm = Matrix { rows: out.rows, cols: out.cols, data: g.to_vec(), grad: None };
                let (am, bm): (&Matrix, &Matrix) = (&nodes[a.0].value, &nodes[b.0].value);
                if needs(a) {
                    send(*a, &mut |s| gemm(false, true, &gm, bm, 1.0, s));
                }
                if needs(b) {
                    send(*b, &mut |s| gemm(true, false, am, &gm, 1.0, s));
                }
            }
            Op::Add(a, b) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(a, row) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let cols = out.cols.max(1);
                send(*row, &mut |s| {
                    for chunk in g.chunks(cols) {
                        s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                send(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                send(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, k) => send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::Mask(a, mask) => send(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * mask[k];
                }
            }),
            Op::Sigmoid(a) => send(*a, &mut |s| {
                for k in 0..s.len() {
                    let y = out.data[k];
                    s[k] += g[k] * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => send(*a, &mut |s| {
                for k in 0..s.len() {
                    let y = out.data[k];
                    s[k] += g[k] * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => send(*a, &mut |s| {
                for k in 0..s.len() {
                    if out.data[k] > 0.0 {
                        s[k] += g[k];
                    }
                }
            }),
            Op::Softmax(a) => {
                let cols = out.cols;
                send(*a, &mut |s| {
                    for r in 0..out.rows {
                        let y = &out.data[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            s[r * cols + c] += y[c] * (gy[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy(p, targets) => {
                let pm = &nodes[p.0].value;
                send(*p, &mut |s| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let v = pm.get(r, t);
                            // Below the floor the loss is constant in p.
                            if v > PROB_FLOOR {
                                s[r * pm.cols + t] -= g[0] / v;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for v in parts {
                    let w = nodes[v.0].value.cols;
                    send(*v, &mut |s| {
                        for r in 0..out.rows {
                            let src = &g[r * out.cols + offset..r * out.cols + offset + w];
                            s[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let n = nodes[v.0].value.len();
                    send(*v, &mut |s| s.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y));
                    offset += n;
                }
            }
            Op::SliceCols(a, start, end) => {
                let src_cols = nodes[a.0].value.cols;
                let w = end - start;
                send(*a, &mut |s| {
                    for r in 0..out.rows {
                        let dst = &mut s[r * src_cols + start..r * src_cols + end];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let cols = out.cols;
                send(*a, &mut |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut s[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(&g[k * cols..(k + 1) * cols]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Flatten(a) => send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Im2Col(a) => {
                let src_cols = nodes[a.0].value.cols;
                let span = out.cols;
                send(*a, &mut |s| {
                    for t in 0..out.rows {
                        let dst = &mut s[t * src_cols..t * src_cols + span];
                        dst.iter_mut().zip(&g[t * span..(t + 1) * span]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MaxPool(a, arg) => {
                let cols = out.cols;
                send(*a, &mut |s| {
                    for (k, &r) in arg.iter().enumerate() {
                        s[r * cols + k % cols] += g[k];
                    }
                });
            }
        }
        Ok(())
    }
}

/// Central-difference gradient check.
///
/// `f` builds a scalar loss on a fresh tape from the given parameter values
/// (registered with [`Tape::param`] in order) and returns the loss node.
/// Returns the largest relative error
/// `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)` over every parameter entry.
pub fn grad_check<F>(f: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).data[0];
        if !v.is_finite() {
            return Err(Error::Numeric("gradient check evaluation is not finite".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for k in 0..params[pi].len() {
            let orig = params[pi].data[k];
            work[pi].data[k] = orig + h;
            let up = eval(&work)?;
            work[pi].data[k] = orig - h;
            let down = eval(&work)?;
            work[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[k];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
