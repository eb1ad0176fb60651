//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node to the tape, so node order is a topological
//! order of the graph. [`Tape::backward`] walks the nodes once, last to
//! first, and returns gradients for every leaf created with
//! `requires_grad`.

use std::borrow::Cow;

use super::dense::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Floor applied to the gold probability inside [`Tape::nll_of_index`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Factor applied to input gradients of a corrupted op kind.
const CORRUPTION: f64 = 1.5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op families, used for reporting and for deliberate gradient corruption
/// in mutation tests of the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Mul,
    AddRow,
    Scale,
    RowSoftmax,
    ConcatCols,
    SliceCols,
    LayerNorm,
    Gelu,
    Gather,
    Sum,
    MeanRows,
    Nll,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::RowSoftmax,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Gather,
        OpKind::Sum,
        OpKind::MeanRows,
        OpKind::Nll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Gather => "gather_rows",
            OpKind::Sum => "sum",
            OpKind::MeanRows => "mean_rows",
            OpKind::Nll => "nll",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RowSoftmax(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var, usize, usize),
    Nll(Var, usize),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) | Op::MatMulT(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::RowSoftmax(_) => OpKind::RowSoftmax,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Gather(..) => OpKind::Gather,
            Op::Sum(_) => OpKind::Sum,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Nll(..) => OpKind::Nll,
        })
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of executed ops. Parameters can be borrowed (`'a`) so a
/// forward pass does not copy them.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    corrupt: Option<OpKind>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
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

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Makes the backward rule of `kind` emit wrong gradients. Only meant for
    /// checking that the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + row`, with the `1×n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).row_softmax();
        let rg = self.rg(a);
        self.push(out, Op::RowSoftmax(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::shape("concat_cols", x.shape(), y.shape()));
        }
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row_slice(r));
            data.extend_from_slice(y.row_slice(r));
        }
        let out = Tensor::new(x.rows(), cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, width)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Per-row standardization (population variance plus `eps`) followed by
    /// `gain * x + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (x, g, b) = (self.value(a), self.value(gain), self.value(bias));
        let n = x.cols();
        if n == 0 || g.shape() != (1, n) || b.shape() != (1, n) {
            return Err(Error::shape("layer_norm", x.shape(), g.shape()));
        }
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g.data()[j] * h + b.data()[j]);
            }
        }
        let out = Tensor::new(x.rows(), n, out)?;
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `x·w + b` with `b` a broadcast bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Rows `ids` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: id,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::new(ids.len(), t.cols(), data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Mean of rows `start..=end` as a `1×n` node.
    pub fn mean_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end >= x.rows() {
            return Err(Error::InvalidSpan {
                start,
                end,
                len: x.rows(),
            });
        }
        let count = (end - start + 1) as f64;
        let mut acc = vec![0.0; x.cols()];
        for r in start..=end {
            for (s, v) in acc.iter_mut().zip(x.row_slice(r)) {
                *s += v;
            }
        }
        for s in &mut acc {
            *s /= count;
        }
        let out = Tensor::row(&acc);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a, start, end), rg))
    }

    /// `-ln(max(p[gold], PROB_FLOOR))` for a `1×n` distribution.
    pub fn nll_of_index(&mut self, probs: Var, gold: usize) -> Result<Var> {
        let p = self.value(probs);
        if p.rows() != 1 {
            return Err(Error::shape("nll_of_index", p.shape(), (1, p.cols())));
        }
        if gold >= p.cols() {
            return Err(Error::Index {
                op: "nll_of_index",
                index: gold,
                len: p.cols(),
            });
        }
        let out = Tensor::scalar(-p.data()[gold].max(PROB_FLOOR).ln());
        let rg = self.rg(probs);
        Ok(self.push(out, Op::Nll(probs, gold), rg))
    }

    /// Gradients of the `1×1` node `loss` with respect to every leaf that
    /// requires a gradient. The tape is left untouched, so repeated calls
    /// give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_seeded(loss, 1.0)
    }

    /// As [`Tape::backward`], with the upstream gradient of `loss` set to `seed`.
    pub fn backward_seeded(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(seed));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let factor = if self.corrupt.is_some() && self.corrupt == node.op.kind() {
                CORRUPTION
            } else {
                1.0
            };
            self.propagate(node, &g, factor, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<'a>,
        g: &Tensor,
        factor: f64,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut send = |var: Var, mut grad: Tensor| {
            if !self.rg(var) {
                return;
            }
            if factor != 1.0 {
                grad.scale_in_place(factor);
            }
            match &mut grads[var.0] {
                Some(acc) => acc.add_assign(&grad),
                slot => *slot = Some(grad),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_t(self.value(*b))?);
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul(self.value(*b))?);
                }
                if self.rg(*b) {
                    send(*b, g.t_matmul(self.value(*a))?);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                let gb = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                send(*a, Tensor::new(g.rows(), g.cols(), ga)?);
                send(*b, Tensor::new(g.rows(), g.cols(), gb)?);
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                let mut acc = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, v) in acc.iter_mut().zip(g.row_slice(r)) {
                        *s += v;
                    }
                }
                send(*row, Tensor::row(&acc));
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in out.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - inner);
                    }
                }
                send(*a, out);
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                send(*a, g.slice_cols(0, p)?);
                send(*b, g.slice_cols(p, q)?);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let width = g.cols();
                let mut out = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    out.row_slice_mut(r)[*start..start + width].copy_from_slice(g.row_slice(r));
                }
                send(*a, out);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gain_v = self.value(*gain).data();
                let mut gx = Tensor::zeros(g.rows(), n);
                let mut g_gain = vec![0.0; n];
                let mut g_bias = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..g.rows() {
                    let gr = g.row_slice(r);
                    let hr = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        g_gain[j] += gr[j] * hr[j];
                        g_bias[j] += gr[j];
                        dxhat[j] = gr[j] * gain_v[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    let inv = inv_std[r];
                    for (j, o) in gx.row_slice_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                send(*input, gx);
                send(*gain, Tensor::row(&g_gain));
                send(*bias, Tensor::row(&g_bias));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                send(*a, Tensor::new(x.rows(), x.cols(), data)?);
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut out = Tensor::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in out.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                send(*table, out);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.value(*a).shape();
                send(*a, Tensor::full(rows, cols, g.data()[0]));
            }
            Op::MeanRows(a, start, end) => {
                let (rows, cols) = self.value(*a).shape();
                let scale = 1.0 / (end - start + 1) as f64;
                let mut out = Tensor::zeros(rows, cols);
                for r in *start..=*end {
                    for (o, v) in out.row_slice_mut(r).iter_mut().zip(g.data()) {
                        *o = v * scale;
                    }
                }
                send(*a, out);
            }
            Op::Nll(p, gold) => {
                let probs = self.value(*p);
                let mut out = Tensor::zeros(1, probs.cols());
                let pg = probs.data()[*gold];
                if pg > PROB_FLOOR {
                    out.data_mut()[*gold] = -g.data()[0] / pg;
                }
                send(*p, out);
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

/// Row softmax applied in place to a plain tensor (no tape).
pub fn softmax_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        softmax_in_place(t.row_slice_mut(r));
    }
}
