//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends an entry to the [`Tape`] holding its output value
//! and enough of its inputs to run the backward kernel. A fresh tape is built
//! for every batch because each sentence brings its own tree-shaped graph.

use super::tensor::{dot, norm, Tensor};
use crate::error::{Error, Result};

/// Added to every norm product in cosine kernels.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Tanh(Var),
    HCat(Var, Var),
    Cols { src: Var, start: usize },
    Reshape(Var),
    GatherRow(Var, usize),
    StackRows(Vec<Var>),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log { src: Var, floor: f64 },
    Diag(Var),
    Pick(Var, Vec<usize>),
    FillDiag(Var),
    Sum(Var),
    Mean(Var),
    Cosine { u: Var, d: Var, unorm: Vec<f64>, dnorm: Vec<f64> },
    RowCosine { u: Var, d: Var, unorm: Vec<f64>, dnorm: Vec<f64> },
    DiagNll { src: Var, row_probs: Tensor, col_probs: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Tanh(_) => "tanh",
            Op::HCat(..) => "hcat",
            Op::Cols { .. } => "cols",
            Op::Reshape(_) => "reshape",
            Op::GatherRow(..) => "gather_row",
            Op::StackRows(_) => "stack_rows",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log { .. } => "log",
            Op::Diag(_) => "diag",
            Op::Pick(..) => "pick",
            Op::FillDiag(_) => "fill_diag",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Cosine { .. } => "cosine_matrix",
            Op::RowCosine { .. } => "row_cosine",
            Op::DiagNll { .. } => "symmetric_diag_nll",
        }
    }
}

struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    non_finite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::StackRows(vs) => vs.iter().any(|v| self.entries[v.0].requires_grad),
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::HCat(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                self.entries[a.0].requires_grad || self.entries[b.0].requires_grad
            }
            Op::Cosine { u, d, .. } | Op::RowCosine { u, d, .. } => {
                self.entries[u.0].requires_grad || self.entries[d.0].requires_grad
            }
            Op::Tanh(a)
            | Op::Cols { src: a, .. }
            | Op::Reshape(a)
            | Op::GatherRow(a, _)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Log { src: a, .. }
            | Op::Diag(a)
            | Op::Pick(a, _)
            | Op::FillDiag(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::DiagNll { src: a, .. } => self.entries[a.0].requires_grad,
        };
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((self.entries.len(), op.name()));
        }
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    /// A trainable input; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.entries[v.0].requires_grad = true;
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.entries[var.0].value
    }

    pub fn shape(&self, var: Var) -> [usize; 2] {
        self.entries[var.0].value.shape()
    }

    /// Fails if any forward operation so far produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((index, name)) => Err(Error::NonFinite(format!("{name} (tape entry {index})"))),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(value, Op::MatMulBt(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        self.push(value, Op::Tanh(a))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("hcat", format!("{:?} | {:?}", ta.shape(), tb.shape())));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let value = Tensor::new(rows, ca + cb, data)?;
        Ok(self.push(value, Op::HCat(a, b)))
    }

    /// Columns `[start, start + width)`.
    pub fn cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(src);
        if start + width > t.cols() {
            return Err(shape_err("cols", format!("[{start}, {}) of {:?}", start + width, t.shape())));
        }
        let mut data = Vec::with_capacity(t.rows() * width);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..start + width]);
        }
        let value = Tensor::new(t.rows(), width, data)?;
        Ok(self.push(value, Op::Cols { src, start }))
    }

    /// Splits an `r × 2k` matrix down the middle.
    pub fn hsplit(&mut self, src: Var) -> Result<(Var, Var)> {
        let cols = self.value(src).cols();
        if !cols.is_multiple_of(2) {
            return Err(shape_err("hsplit", format!("odd column count {cols}")));
        }
        Ok((self.cols(src, 0, cols / 2)?, self.cols(src, cols / 2, cols / 2)?))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `n² → n × n`, row-major.
    pub fn square(&mut self, a: Var) -> Result<Var> {
        let len = self.value(a).len();
        let n = (len as f64).sqrt().round() as usize;
        if n * n != len {
            return Err(shape_err("square", format!("{len} is not a perfect square")));
        }
        self.reshape(a, n, n)
    }

    /// Any matrix to a `1 × len` row, row-major.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let len = self.value(a).len();
        self.reshape(a, 1, len)
    }

    pub fn gather_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let t = self.value(a);
        if row >= t.rows() {
            return Err(shape_err("gather_row", format!("row {row} of {:?}", t.shape())));
        }
        let value = Tensor::row(t.row_slice(row).to_vec());
        Ok(self.push(value, Op::GatherRow(a, row)))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("stack_rows", "no inputs".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("stack_rows", format!("{} vs {cols} columns", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut value = ta.clone();
        let c = ta.cols();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += tb.data()[i % c];
        }
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise log-softmax computed in log space.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(value, Op::LogSoftmax(a))
    }

    /// Elementwise `ln(max(x, floor))`.
    pub fn log(&mut self, src: Var, floor: f64) -> Var {
        let mut value = self.value(src).clone();
        value.data_mut().iter_mut().for_each(|x| *x = x.max(floor).ln());
        self.push(value, Op::Log { src, floor })
    }

    /// Diagonal of a square matrix as a `1 × n` row.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return Err(shape_err("diag", format!("non-square {:?}", t.shape())));
        }
        let value = Tensor::row((0..t.rows()).map(|i| t.get(i, i)).collect());
        Ok(self.push(value, Op::Diag(a)))
    }

    /// Picks `a[i, index[i]]` from every row into an `r × 1` column.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if index.len() != t.rows() || index.iter().any(|&j| j >= t.cols()) {
            return Err(shape_err("pick", format!("{} indices into {:?}", index.len(), t.shape())));
        }
        let data = index.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let value = Tensor::new(index.len(), 1, data)?;
        Ok(self.push(value, Op::Pick(a, index.to_vec())))
    }

    /// Copy of a square matrix with its diagonal replaced by a constant.
    pub fn fill_diag(&mut self, a: Var, fill: f64) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return Err(shape_err("fill_diag", format!("non-square {:?}", t.shape())));
        }
        let mut value = t.clone();
        for i in 0..value.rows() {
            value.set(i, i, fill);
        }
        Ok(self.push(value, Op::FillDiag(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// `A[i][j] = ⟨u_i, d_j⟩ / (‖u_i‖‖d_j‖ + ε)` for `u`, `d` of shape `m × k`.
    pub fn cosine_matrix(&mut self, u: Var, d: Var) -> Result<Var> {
        let (tu, td) = (self.value(u), self.value(d));
        if tu.cols() != td.cols() {
            return Err(shape_err("cosine_matrix", format!("{:?} vs {:?}", tu.shape(), td.shape())));
        }
        let unorm: Vec<f64> = (0..tu.rows()).map(|i| norm(tu.row_slice(i))).collect();
        let dnorm: Vec<f64> = (0..td.rows()).map(|j| norm(td.row_slice(j))).collect();
        let mut value = tu.matmul_bt(td)?;
        let n = td.rows();
        for (row, &nu) in value.data_mut().chunks_mut(n.max(1)).zip(&unorm) {
            for (x, &nd) in row.iter_mut().zip(&dnorm) {
                *x /= nu * nd + COSINE_EPS;
            }
        }
        Ok(self.push(value, Op::Cosine { u, d, unorm, dnorm }))
    }

    /// `−(1/2m) [Σ_i ln softmax(L_i•)_i + Σ_j ln softmax(L_•j)_j]` for a
    /// square `m × m` logit matrix: the mean negative log-likelihood of the
    /// diagonal under row and column softmaxes, as one fused node.
    pub fn symmetric_diag_nll(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let m = t.rows();
        if m == 0 || t.cols() != m {
            return Err(shape_err("symmetric_diag_nll", format!("needs a non-empty square matrix, got {:?}", t.shape())));
        }
        let mut row_probs = t.clone();
        let mut total = 0.0;
        for (i, row) in row_probs.data_mut().chunks_mut(m).enumerate() {
            let lse = log_sum_exp(row);
            total += row[i] - lse;
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let mut col_max = vec![f64::NEG_INFINITY; m];
        for row in t.data().chunks(m) {
            for (c, &x) in col_max.iter_mut().zip(row) {
                *c = c.max(x);
            }
        }
        let mut col_probs = Tensor::zeros(m, m);
        let mut col_sum = vec![0.0; m];
        for (out, row) in col_probs.data_mut().chunks_mut(m).zip(t.data().chunks(m)) {
            for (((o, &x), &c), s) in out.iter_mut().zip(row).zip(&col_max).zip(col_sum.iter_mut()) {
                *o = (x - c).exp();
                *s += *o;
            }
        }
        for (j, (&c, &s)) in col_max.iter().zip(&col_sum).enumerate() {
            total += t.get(j, j) - c - s.ln();
        }
        for row in col_probs.data_mut().chunks_mut(m) {
            row.iter_mut().zip(&col_sum).for_each(|(x, s)| *x /= s);
        }
        let value = Tensor::scalar(-total / (2.0 * m as f64));
        Ok(self.push(
            value,
            Op::DiagNll {
                src: logits,
                row_probs,
                col_probs,
            },
        ))
    }

    /// Cosine between corresponding rows, as an `m × 1` column.
    pub fn row_cosine(&mut self, u: Var, d: Var) -> Result<Var> {
        let (tu, td) = (self.value(u), self.value(d));
        if tu.shape() != td.shape() {
            return Err(shape_err("row_cosine", format!("{:?} vs {:?}", tu.shape(), td.shape())));
        }
        let unorm: Vec<f64> = (0..tu.rows()).map(|i| norm(tu.row_slice(i))).collect();
        let dnorm: Vec<f64> = (0..td.rows()).map(|i| norm(td.row_slice(i))).collect();
        let data = (0..tu.rows())
            .map(|i| dot(tu.row_slice(i), td.row_slice(i)) / (unorm[i] * dnorm[i] + COSINE_EPS))
            .collect();
        let value = Tensor::new(tu.rows(), 1, data)?;
        Ok(self.push(value, Op::RowCosine { u, d, unorm, dnorm }))
    }

    /// Reverse sweep from a `1 × 1` loss, in exact reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for index in (0..=loss.0).rev() {
            let entry = &self.entries[index];
            if !entry.requires_grad || matches!(entry.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[index].take() else { continue };
            self.backward_entry(entry, &g, &mut grads)?;
            grads[index] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    fn backward_entry(&self, entry: &Entry, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor| accumulate(grads, v, delta);
        let y = &entry.value;
        match &entry.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul_bt(self.value(*b))?);
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).matmul_at(g)?);
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul(self.value(*b))?);
                }
                if self.needs(*b) {
                    acc(*b, g.matmul_at(self.value(*a))?);
                }
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                for (dx, &t) in d.data_mut().iter_mut().zip(y.data()) {
                    *dx *= 1.0 - t * t;
                }
                acc(*a, d);
            }
            Op::HCat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Tensor::zeros(g.rows(), ca);
                let mut db = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[..ca]);
                    db.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[ca..]);
                }
                if self.needs(*a) {
                    acc(*a, da);
                }
                if self.needs(*b) {
                    acc(*b, db);
                }
            }
            Op::Cols { src, start } => {
                let [rows, cols] = self.shape(*src);
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                acc(*src, d);
            }
            Op::Reshape(a) => {
                let [rows, cols] = self.shape(*a);
                acc(*a, g.clone().reshaped(rows, cols)?);
            }
            Op::GatherRow(a, row) => {
                let [rows, cols] = self.shape(*a);
                let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
                slot.row_slice_mut(*row).iter_mut().zip(g.data()).for_each(|(d, x)| *d += x);
            }
            Op::StackRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(p, Tensor::new(rows, cols, slice)?);
                    }
                    offset += rows;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*bias) {
                    let mut d = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in d.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    acc(*bias, d);
                }
            }
            Op::Scale(a, factor) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().for_each(|x| *x *= factor);
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Softmax(a) => {
                let mut d = g.clone();
                let c = y.cols();
                for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let inner = dot(drow, yrow);
                    for (dx, &p) in drow.iter_mut().zip(yrow) {
                        *dx = p * (*dx - inner);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                let c = y.cols();
                for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let total: f64 = drow.iter().sum();
                    for (dx, &ly) in drow.iter_mut().zip(yrow) {
                        *dx -= ly.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::Log { src, floor } => {
                let mut d = g.clone();
                for (dx, &x) in d.data_mut().iter_mut().zip(self.value(*src).data()) {
                    *dx = if x > *floor { *dx / x } else { 0.0 };
                }
                acc(*src, d);
            }
            Op::Diag(a) => {
                let n = g.cols();
                let mut d = Tensor::zeros(n, n);
                for i in 0..n {
                    d.set(i, i, g.data()[i]);
                }
                acc(*a, d);
            }
            Op::Pick(a, index) => {
                let [rows, cols] = self.shape(*a);
                let mut d = Tensor::zeros(rows, cols);
                for (i, &j) in index.iter().enumerate() {
                    d.set(i, j, g.data()[i]);
                }
                acc(*a, d);
            }
            Op::FillDiag(a) => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    d.set(i, i, 0.0);
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let [rows, cols] = self.shape(*a);
                acc(*a, Tensor::filled(rows, cols, g.scalar_value()));
            }
            Op::Mean(a) => {
                let [rows, cols] = self.shape(*a);
                let n = (rows * cols) as f64;
                acc(*a, Tensor::filled(rows, cols, g.scalar_value() / n));
            }
            Op::Cosine { u, d, unorm, dnorm } => {
                let (tu, td) = (self.value(*u), self.value(*d));
                let (du, dd) = cosine_matrix_grads(g, y, tu, td, unorm, dnorm)?;
                if self.needs(*u) {
                    acc(*u, du);
                }
                if self.needs(*d) {
                    acc(*d, dd);
                }
            }
            Op::DiagNll {
                src,
                row_probs,
                col_probs,
            } => {
                let m = row_probs.rows();
                let w = g.scalar_value() / (2.0 * m as f64);
                let mut d = row_probs.clone();
                for (dx, &p) in d.data_mut().iter_mut().zip(col_probs.data()) {
                    *dx = w * (*dx + p);
                }
                for i in 0..m {
                    let x = d.get(i, i);
                    d.set(i, i, x - 2.0 * w);
                }
                acc(*src, d);
            }
            Op::RowCosine { u, d, unorm, dnorm } => {
                let (tu, td) = (self.value(*u), self.value(*d));
                let [rows, cols] = tu.shape();
                let mut du = Tensor::zeros(rows, cols);
                let mut dd = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    let gi = g.data()[i];
                    let p = unorm[i] * dnorm[i] + COSINE_EPS;
                    let c = y.data()[i];
                    let (ui, di) = (tu.row_slice(i), td.row_slice(i));
                    // ∂c/∂u = d/p − c·‖d‖·u/(‖u‖·p), and symmetrically for d.
                    let cu = if unorm[i] > 0.0 { c * dnorm[i] / (unorm[i] * p) } else { 0.0 };
                    let cd = if dnorm[i] > 0.0 { c * unorm[i] / (dnorm[i] * p) } else { 0.0 };
                    for k in 0..cols {
                        du.row_slice_mut(i)[k] = gi * (di[k] / p - cu * ui[k]);
                        dd.row_slice_mut(i)[k] = gi * (ui[k] / p - cd * di[k]);
                    }
                }
                if self.needs(*u) {
                    acc(*u, du);
                }
                if self.needs(*d) {
                    acc(*d, dd);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradients of the cosine matrix with respect to `u` and `d`. For
/// `A = S / P` with `P_ij = ‖u_i‖‖d_j‖ + ε` and `W = G / P`:
/// `∂L/∂u_i = (W·D)_i − u_i Σ_j W_ij A_ij ‖d_j‖ / ‖u_i‖`, and symmetrically
/// for `d` with `Wᵀ`.
fn cosine_matrix_grads(
    g: &Tensor,
    a: &Tensor,
    tu: &Tensor,
    td: &Tensor,
    unorm: &[f64],
    dnorm: &[f64],
) -> Result<(Tensor, Tensor)> {
    let n = td.rows().max(1);
    let mut w = g.clone();
    let mut u_coef = vec![0.0; tu.rows()];
    let mut d_coef = vec![0.0; td.rows()];
    for (i, (wrow, arow)) in w.data_mut().chunks_mut(n).zip(a.data().chunks(n)).enumerate() {
        for (j, (x, &aij)) in wrow.iter_mut().zip(arow).enumerate() {
            *x /= unorm[i] * dnorm[j] + COSINE_EPS;
            let wa = *x * aij;
            u_coef[i] += wa * dnorm[j];
            d_coef[j] += wa * unorm[i];
        }
    }
    let finish = |mut grad: Tensor, own: &Tensor, coef: &[f64], own_norm: &[f64]| {
        for (i, row) in (0..own.rows()).zip(grad.data_mut().chunks_mut(own.cols().max(1))) {
            if own_norm[i] > 0.0 {
                let scale = coef[i] / own_norm[i];
                for (o, x) in row.iter_mut().zip(own.row_slice(i)) {
                    *o -= scale * x;
                }
            }
        }
        grad
    };
    let du = finish(w.matmul(td)?, tu, &u_coef, unorm);
    let dd = finish(w.matmul_at(tu)?, td, &d_coef, dnorm);
    Ok((du, dd))
}
