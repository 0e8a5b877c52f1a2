//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes in exact reverse order, so gradient accumulation order is fixed by
//! the order of the forward pass.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{gemm, Matrix};
use crate::error::{DuplexError, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator kinds, used for diagnostics and gradient-check selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    AddRow,
    MulCol,
    ScalarMul,
    AddScalar,
    Hadamard,
    RowGather,
    SegmentSum,
    SegmentSoftmax,
    ConcatCols,
    Relu,
    LeakyRelu,
    Exp,
    Log,
    Sigmoid,
    LogSigmoid,
    Sin,
    Cos,
    Abs,
    Sqrt,
    SoftmaxRows,
    LogSoftmaxRows,
    Dropout,
    Sum,
    Mean,
    SumCols,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 28] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::AddRow,
        OpKind::MulCol,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::Hadamard,
        OpKind::RowGather,
        OpKind::SegmentSum,
        OpKind::SegmentSoftmax,
        OpKind::ConcatCols,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sigmoid,
        OpKind::LogSigmoid,
        OpKind::Sin,
        OpKind::Cos,
        OpKind::Abs,
        OpKind::Sqrt,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumCols,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::AddRow => "add_row",
            OpKind::MulCol => "mul_col",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Hadamard => "hadamard",
            OpKind::RowGather => "row_gather",
            OpKind::SegmentSum => "segment_sum",
            OpKind::SegmentSoftmax => "segment_softmax",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Abs => "abs",
            OpKind::Sqrt => "sqrt",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumCols => "sum_cols",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Hadamard(Var, Var),
    RowGather(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    ConcatCols(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::RowGather(..) => OpKind::RowGather,
            Op::SegmentSum(..) => OpKind::SegmentSum,
            Op::SegmentSoftmax(..) => OpKind::SegmentSoftmax,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Relu(..) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::LogSigmoid(..) => OpKind::LogSigmoid,
            Op::Sin(..) => OpKind::Sin,
            Op::Cos(..) => OpKind::Cos,
            Op::Abs(..) => OpKind::Abs,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::Dropout(..) => OpKind::Dropout,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumCols(..) => OpKind::SumCols,
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_segments(op: &'static str, ids: &[usize], rows: usize, num_segments: usize) -> Result<()> {
    if ids.len() != rows {
        return Err(DuplexError::shape(
            op,
            format!("{} segment ids for {rows} rows", ids.len()),
        ));
    }
    if let Some(w) = ids.windows(2).find(|w| w[0] > w[1]) {
        return Err(DuplexError::shape(
            op,
            format!("segment ids not sorted ({} after {})", w[1], w[0]),
        ));
    }
    if let Some(&last) = ids.last() {
        if last >= num_segments {
            return Err(DuplexError::shape(
                op,
                format!("segment id {last} >= {num_segments} segments"),
            ));
        }
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Test hook: the backward rule of `kind` is deliberately corrupted
    /// (upstream gradient doubled) so gradient checks can be shown to fail.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DuplexError::shape(
                op,
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Adds a `1×c` row vector to every row of an `m×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ma, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != ma.cols() {
            return Err(DuplexError::shape(
                "add_row",
                format!("{}x{} + row {}x{}", ma.rows(), ma.cols(), rv.rows(), rv.cols()),
            ));
        }
        let mut value = ma.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of an `m×c` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ma, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != ma.rows() {
            return Err(DuplexError::shape(
                "mul_col",
                format!("{}x{} * col {}x{}", ma.rows(), ma.cols(), cv.rows(), cv.cols()),
            ));
        }
        let mut value = ma.clone();
        for r in 0..value.rows() {
            let s = cv.data()[r];
            value.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::ScalarMul(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    /// `out[r] = a[index[r]]`.
    pub fn row_gather(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let ma = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= ma.rows()) {
            return Err(DuplexError::shape(
                "row_gather",
                format!("index {bad} >= {} rows", ma.rows()),
            ));
        }
        let value = ma.select_rows(&index);
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowGather(a, index), rg))
    }

    /// `out[s] = Σ_{r: ids[r] = s} a[r]`, with `ids` sorted.
    pub fn segment_sum(&mut self, a: Var, ids: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let ma = self.value(a);
        check_segments("segment_sum", &ids, ma.rows(), num_segments)?;
        let mut value = Matrix::zeros(num_segments, ma.cols());
        for (r, &s) in ids.iter().enumerate() {
            for (o, x) in value.row_mut(s).iter_mut().zip(ma.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SegmentSum(a, ids), rg))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, ids: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let ma = self.value(a);
        check_segments("segment_softmax", &ids, ma.rows(), num_segments)?;
        let cols = ma.cols();
        let mut value = Matrix::zeros(ma.rows(), cols);
        let mut start = 0;
        while start < ids.len() {
            let mut end = start + 1;
            while end < ids.len() && ids[end] == ids[start] {
                end += 1;
            }
            for c in 0..cols {
                let max = (start..end).map(|r| ma.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in start..end {
                    let e = (ma.get(r, c) - max).exp();
                    value.set(r, c, e);
                    z += e;
                }
                for r in start..end {
                    value.set(r, c, value.get(r, c) / z);
                }
            }
            start = end;
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SegmentSoftmax(a, ids, num_segments), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::hcat(&mats)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut value = ma.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut value = ma.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Inverted dropout. Identity (and no node) when not training or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(DuplexError::config(format!("dropout p={p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let ma = self.value(a);
        let mask: Vec<f64> = (0..ma.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = ma.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Matrix::from_vec(ma.rows(), ma.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout(a, mask), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Row sums: `m×c → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::column((0..m.rows()).map(|r| m.row(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Fills gradients of every node reachable from `loss`.
    /// First node (in creation order) whose value has a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, OpKind)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.kind()))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(DuplexError::Autodiff(
                "backward already ran on this tape".into(),
            ));
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(DuplexError::Autodiff(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.scale(2.0);
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, contrib: Matrix| {
            debug_assert!(v.0 < i, "tape is topologically ordered");
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |a: Var, f: &dyn Fn(f64, f64) -> f64| -> Matrix {
            // f(x, y) with x the input and y the output value
            let x = val(a);
            Matrix::from_vec(
                x.rows(),
                x.cols(),
                x.data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &gi)| gi * f(x, y))
                    .collect(),
            )
            .expect("elementwise backward shape")
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].requires_grad {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm(g, false, val(*b), true, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if nodes[b.0].requires_grad {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm(val(*a), true, g, false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*row, gr);
            }
            Op::MulCol(a, col) => {
                let (ma, cv) = (val(*a), val(*col));
                let mut ga = g.clone();
                let mut gc = Matrix::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    gc.data_mut()[r] = g.row(r).iter().zip(ma.row(r)).map(|(x, y)| x * y).sum();
                }
                acc(*a, ga);
                acc(*col, gc);
            }
            Op::ScalarMul(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Hadamard(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::RowGather(a, index) => {
                let ma = val(*a);
                let mut ga = Matrix::zeros(ma.rows(), ma.cols());
                for (r, &src) in index.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentSum(a, ids) => {
                let ga = g.select_rows(ids);
                acc(*a, ga);
            }
            Op::SegmentSoftmax(a, ids, num_segments) => {
                // ga = y ⊙ (g − Σ_segment g⊙y)
                let cols = out.cols();
                let mut dot = Matrix::zeros(*num_segments, cols);
                for (r, &s) in ids.iter().enumerate() {
                    for c in 0..cols {
                        let v = dot.get(s, c) + g.get(r, c) * out.get(r, c);
                        dot.set(s, c, v);
                    }
                }
                let ga = Matrix::from_fn(out.rows(), cols, |r, c| {
                    out.get(r, c) * (g.get(r, c) - dot.get(ids[r], c))
                });
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let gp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                    off += w;
                    acc(p, gp);
                }
            }
            Op::Relu(a) => acc(*a, elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                acc(*a, elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { s }))
            }
            Op::Exp(a) => acc(*a, elementwise(*a, &|_, y| y)),
            Op::Log(a) => acc(*a, elementwise(*a, &|x, _| 1.0 / x)),
            Op::Sigmoid(a) => acc(*a, elementwise(*a, &|_, y| y * (1.0 - y))),
            Op::LogSigmoid(a) => acc(*a, elementwise(*a, &|x, _| sigmoid(-x))),
            Op::Sin(a) => acc(*a, elementwise(*a, &|x, _| x.cos())),
            Op::Cos(a) => acc(*a, elementwise(*a, &|x, _| -x.sin())),
            Op::Abs(a) => acc(*a, elementwise(*a, &|x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })),
            Op::Sqrt(a) => acc(*a, elementwise(*a, &|_, y| if y > 0.0 { 0.5 / y } else { 0.0 })),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(x, y)| x * y).sum();
                    for ((o, &y), &gi) in ga.row_mut(r).iter_mut().zip(out.row(r)).zip(g.row(r)) {
                        *o = y * (gi - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((o, &y), &gi) in ga.row_mut(r).iter_mut().zip(out.row(r)).zip(g.row(r)) {
                        *o = gi - y.exp() * gsum;
                    }
                }
                acc(*a, ga);
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                acc(*a, Matrix::from_vec(g.rows(), g.cols(), data).expect("dropout shape"));
            }
            Op::Sum(a) => {
                let ma = val(*a);
                acc(*a, Matrix::filled(ma.rows(), ma.cols(), g.data()[0]));
            }
            Op::Mean(a) => {
                let ma = val(*a);
                let n = ma.len().max(1) as f64;
                acc(*a, Matrix::filled(ma.rows(), ma.cols(), g.data()[0] / n));
            }
            Op::SumCols(a) => {
                let ma = val(*a);
                acc(*a, Matrix::from_fn(ma.rows(), ma.cols(), |r, _| g.data()[r]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.constant(row(&[-1.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn segment_sum_forward() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let y = t.segment_sum(x, vec![0, 0, 1].into(), 2).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn segment_ids_must_be_sorted_and_in_range() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(3, 1));
        assert!(t.segment_sum(x, vec![1, 0, 1].into(), 2).is_err());
        assert!(t.segment_sum(x, vec![0, 1, 2].into(), 2).is_err());
        assert!(t.segment_softmax(x, vec![0, 0].into(), 2).is_err());
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.scalar_value(y), 0.5);
    }

    #[test]
    fn grad_of_linear_map_is_outer_product() {
        // loss = sum(W·x)  ⇒  dW = 1 xᵀ
        let mut t = Tape::new();
        let w = t.param(Matrix::from_fn(2, 3, |i, j| (i + j) as f64));
        let x = t.constant(Matrix::column(vec![1.0, -2.0, 0.5]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let g = t.grad(w).unwrap();
        for i in 0..2 {
            assert_eq!(g.row(i), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn dead_relu_has_zero_grad() {
        let mut t = Tape::new();
        let c = t.param(Matrix::scalar(0.7));
        let neg = t.scalar_mul(c, -1.0);
        let r = t.relu(neg);
        let loss = t.scalar_mul(r, 3.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(row(&[0.0, -2.0, 3.0]));
        let y = t.abs(x);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut t = Tape::new();
        let x = t.param(row(&[1.0, 2.0]));
        let y = t.exp(x);
        assert!(t.backward(y).is_err());
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn multi_consumer_grads_accumulate() {
        // loss = sum(x ⊙ x) + sum(x) ⇒ grad = 2x + 1
        let mut t = Tape::new();
        let x = t.param(row(&[1.0, -3.0]));
        let sq = t.hadamard(x, x).unwrap();
        let a = t.sum(sq);
        let b = t.sum(x);
        let loss = t.add(a, b).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, -5.0]);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_fn(4, 5, |i, j| (i * 7 + j * 3) as f64 * 0.37 - 4.0));
        let y = t.softmax_rows(x);
        for r in 0..4 {
            let s: f64 = t.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropout_contract() {
        let mut t = Tape::new();
        let x = t.param(Matrix::filled(50, 40, 1.0));
        assert_eq!(t.dropout(x, 0.5, false, 1).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, 1).is_err());
        assert!(t.dropout(x, -0.1, true, 1).is_err());
        let y1 = t.dropout(x, 0.5, true, 9).unwrap();
        let y2 = t.dropout(x, 0.5, true, 9).unwrap();
        assert_eq!(t.value(y1), t.value(y2));
        assert!(t.value(y1).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = t.value(y1).data().iter().filter(|&&v| v > 0.0).count();
        assert!((800..1200).contains(&kept), "kept {kept}");
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
        assert_eq!(OpKind::from_name("nope"), None);
    }
}
