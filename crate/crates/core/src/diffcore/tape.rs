//! Wengert tape for reverse-mode differentiation.
//!
//! Every forward op evaluates eagerly and appends a record holding its value,
//! its input node ids, and whatever it needs for the pullback. `backward`
//! walks the records in reverse and accumulates gradients. A tape is rebuilt
//! for every training step; `clear` bumps the generation so ids handed out
//! before the clear are rejected afterwards.

use super::linalg::{gemm, transpose};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    index: usize,
    generation: u64,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// The operations the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Scale(ordered::F64Bits),
    Mul,
    MatMul,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    Sum,
    MeanSquaredError,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    Transpose,
}

/// `f64` wrapper so `OpKind` can stay `Eq`.
pub mod ordered {
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct F64Bits(u64);

    impl F64Bits {
        pub fn new(v: f64) -> Self {
            F64Bits(v.to_bits())
        }
        pub fn get(self) -> f64 {
            f64::from_bits(self.0)
        }
    }
}

#[derive(Debug, Clone)]
enum Record {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    MatMul(usize, usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Sum(usize),
    Mse(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows { src: usize, start: usize },
    Transpose(usize),
    AddBias(usize, usize),
    ScaleRows(usize, Vec<f64>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    record: Record,
    needs_grad: bool,
}

/// Operation log plus the values it produced.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    generation: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros if the loss does not reach it.
    pub fn get(&self, id: NodeId) -> Result<Tensor> {
        if id.generation != self.generation || id.index >= self.shapes.len() {
            return Err(Error::Contract("gradient requested for a foreign node".into()));
        }
        let shape = self.shapes[id.index].clone();
        match &self.grads[id.index] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops every record. Ids issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// When set, new nodes are stored as constants and nothing is differentiable.
    pub fn set_no_grad(&mut self, no_grad: bool) {
        self.no_grad = no_grad;
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let needs_grad = !self.no_grad;
        self.push_unchecked(value, Record::Leaf, needs_grad)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Record::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(id)?].value)
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.generation != self.generation || id.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} is not on the active tape",
                id.index
            )));
        }
        Ok(id.index)
    }

    fn push_unchecked(&mut self, value: Tensor, record: Record, needs_grad: bool) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            record,
            needs_grad,
        });
        NodeId {
            index,
            generation: self.generation,
        }
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        record: Record,
        inputs: &[usize],
    ) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric { op });
        }
        let needs_grad = !self.no_grad && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let record = if needs_grad { record } else { Record::Leaf };
        Ok(self.push_unchecked(value, record, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn matrix_shape(&self, op: &'static str, a: usize) -> Result<(usize, usize)> {
        let s = self.nodes[a].value.shape();
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Dispatches one of the generic op kinds.
    pub fn apply(&mut self, kind: OpKind, operands: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::MeanSquaredError => 2,
            OpKind::LayerNorm => 3,
            OpKind::ConcatRows => operands.len().max(1),
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} operands, got {}",
                operands.len()
            )));
        }
        let o = operands;
        match kind {
            OpKind::Add => self.add(o[0], o[1]),
            OpKind::Sub => self.sub(o[0], o[1]),
            OpKind::Scale(c) => self.scale(o[0], c.get()),
            OpKind::Mul => self.mul(o[0], o[1]),
            OpKind::MatMul => self.matmul(o[0], o[1]),
            OpKind::SoftmaxRows => self.softmax_rows(o[0]),
            OpKind::LayerNorm => self.layer_norm(o[0], o[1], o[2]),
            OpKind::Gelu => self.gelu(o[0]),
            OpKind::Sum => self.sum(o[0]),
            OpKind::MeanSquaredError => self.mse(o[0], o[1]),
            OpKind::ConcatRows => self.concat_rows(o),
            OpKind::SliceRows { start, end } => self.slice_rows(o[0], start, end),
            OpKind::Transpose => self.transpose(o[0]),
        }
    }

    fn zip(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape(op, a, b)?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((a, b, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, out) = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", out, Record::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, out) = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Record::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, out) = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Record::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let a = self.check(a)?;
        let out = self.nodes[a].value.map(|x| x * c);
        self.push("scale", out, Record::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_shape("matmul", a)?;
        let (k2, n) = self.matrix_shape("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a].value.data(),
            false,
            self.nodes[b].value.data(),
            false,
            &mut out,
            false,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Record::MatMul(a, b), &[a, b])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.check(a)?;
        let v = &self.nodes[a].value;
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = v.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax_rows", out, Record::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalisation with learned gain and bias of the row width.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (x, gamma, beta) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let v = &self.nodes[x].value;
        let (rows, cols) = (v.rows(), v.cols());
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        if g.len() != cols || b.len() != cols {
            return Err(Error::dim(
                "layer_norm",
                format!("row width {cols}, gain {}, bias {}", g.len(), b.len()),
            ));
        }
        let mut normed = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                normed[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Record::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.check(a)?;
        let out = self.nodes[a].value.map(gelu);
        self.push("gelu", out, Record::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Record::Sum(a), &[a])
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("mean_squared_error", a, b)?;
        let va = self.nodes[a].value.data();
        let vb = self.nodes[b].value.data();
        let s = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        self.push("mean_squared_error", Tensor::scalar(s), Record::Mse(a, b), &[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no operands"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let cols = self.nodes[idx[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::dim("concat_rows", format!("row width {cols} vs {:?}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", out, Record::ConcatRows(idx.clone()), &idx)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let a = self.check(a)?;
        let (rows, cols) = self.matrix_shape("slice_rows", a)?;
        if start >= end || end > rows {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {rows} rows")));
        }
        let data = self.nodes[a].value.data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        self.push("slice_rows", out, Record::SliceRows { src: a, start }, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.check(a)?;
        let (rows, cols) = self.matrix_shape("transpose", a)?;
        let data = transpose(rows, cols, self.nodes[a].value.data());
        let out = Tensor::new(vec![cols, rows], data)?;
        self.push("transpose", out, Record::Transpose(a), &[a])
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, bias) = (self.check(x)?, self.check(bias)?);
        let (rows, cols) = self.matrix_shape("add_bias", x)?;
        let b = self.nodes[bias].value.data();
        if b.len() != cols {
            return Err(Error::dim("add_bias", format!("row width {cols}, bias {}", b.len())));
        }
        let mut data = self.nodes[x].value.data().to_vec();
        for r in 0..rows {
            for (o, bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("add_bias", out, Record::AddBias(x, bias), &[x, bias])
    }

    /// Multiplies row `r` by the constant `weights[r]`.
    pub fn scale_rows(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        let x = self.check(x)?;
        let v = &self.nodes[x].value;
        let (rows, cols) = (v.rows(), v.cols());
        if weights.len() != rows {
            return Err(Error::dim("scale_rows", format!("{rows} rows, {} weights", weights.len())));
        }
        let mut data = v.data().to_vec();
        for (r, w) in weights.iter().enumerate() {
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o *= w;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("scale_rows", out, Record::ScaleRows(x, weights.to_vec()), &[x])
    }

    /// Scaled dot-product attention within independent groups of `seq` tokens.
    ///
    /// Rows are token-major: token `j` of group `g` lives at row `j * groups + g`.
    /// Each of `heads` heads attends over its own contiguous column block.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (q, k, v) = (self.check(q)?, self.check(k)?, self.check(v)?);
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = self.matrix_shape("attention", q)?;
        if rows != groups * seq || heads == 0 || width % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("[{rows}, {width}] with {groups} groups x {seq} tokens, {heads} heads"),
            ));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q].value.data(),
            self.nodes[k].value.data(),
            self.nodes[v].value.data(),
        );
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for g in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(i * groups + g) * width + col..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(j * groups + g) * width + col..][..dh];
                        *s = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores);
                    let p = &mut probs[((g * heads + h) * seq + i) * seq..][..seq];
                    p.copy_from_slice(&scores);
                    let o = &mut out[(i * groups + g) * width + col..][..dh];
                    for (j, &pj) in scores.iter().enumerate() {
                        let vj = &vd[(j * groups + g) * width + col..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, width], out)?;
        self.push(
            "attention",
            out,
            Record::Attention {
                q,
                k,
                v,
                groups,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pullback(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            generation: self.generation,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn pullback(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        match &self.nodes[i].record {
            Record::Leaf => {}
            Record::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, 1.0, g));
            }
            Record::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, -1.0, g));
            }
            Record::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, *c, g)),
            Record::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((o, gi), y) in d.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((o, gi), x) in d.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Record::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].value.shape()[0], self.nodes[*a].value.shape()[1]);
                let n = self.nodes[*b].value.shape()[1];
                self.acc(grads, *a, |d| gemm(m, n, k, g, false, val(*b), true, d, true));
                self.acc(grads, *b, |d| gemm(k, m, n, val(*a), true, g, false, d, true));
            }
            Record::SoftmaxRows(a) => {
                let y = self.nodes[i].value.data();
                let cols = self.nodes[i].value.cols();
                self.acc(grads, *a, |d| {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            d[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Record::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let cols = self.nodes[*x].value.cols();
                let rows = rstd.len();
                let gm = val(*gamma);
                self.acc(grads, *gamma, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * normed[r * cols + c];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for c in 0..cols {
                            let gh = g[r * cols + c] * gm[c];
                            mean_gh += gh;
                            mean_ghx += gh * normed[r * cols + c];
                        }
                        mean_gh /= n;
                        mean_ghx /= n;
                        for c in 0..cols {
                            let gh = g[r * cols + c] * gm[c];
                            d[r * cols + c] +=
                                rstd[r] * (gh - mean_gh - normed[r * cols + c] * mean_ghx);
                        }
                    }
                });
            }
            Record::Gelu(a) => {
                let x = val(*a);
                self.acc(grads, *a, |d| {
                    for ((o, gi), &xv) in d.iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_grad(xv);
                    }
                });
            }
            Record::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|o| *o += g[0])),
            Record::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let f = 2.0 * g[0] / va.len() as f64;
                self.acc(grads, *a, |d| {
                    for ((o, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *o += f * (x - y);
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((o, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *o -= f * (x - y);
                    }
                });
            }
            Record::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    self.acc(grads, p, |d| axpy(d, 1.0, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Record::SliceRows { src, start } => {
                let cols = self.nodes[*src].value.cols();
                let off = start * cols;
                self.acc(grads, *src, |d| axpy(&mut d[off..off + g.len()], 1.0, g));
            }
            Record::Transpose(a) => {
                let (rows, cols) = (self.nodes[*a].value.shape()[0], self.nodes[*a].value.shape()[1]);
                let gt = transpose(cols, rows, g);
                self.acc(grads, *a, |d| axpy(d, 1.0, &gt));
            }
            Record::AddBias(x, bias) => {
                let cols = self.nodes[*x].value.cols();
                self.acc(grads, *x, |d| axpy(d, 1.0, g));
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(cols) {
                        axpy(d, 1.0, row);
                    }
                });
            }
            Record::ScaleRows(x, w) => {
                let cols = self.nodes[*x].value.cols();
                self.acc(grads, *x, |d| {
                    for (r, wr) in w.iter().enumerate() {
                        axpy(&mut d[r * cols..(r + 1) * cols], *wr, &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Record::Attention {
                q,
                k,
                v,
                groups,
                seq,
                heads,
                probs,
            } => self.attention_pullback(g, grads, (*q, *k, *v), *groups, *seq, *heads, probs),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_pullback(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (usize, usize, usize),
        groups: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let width = self.nodes[q].value.cols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q].value.data(),
            self.nodes[k].value.data(),
            self.nodes[v].value.data(),
        );
        let n = qd.len();
        let mut gq = vec![0.0; n];
        let mut gk = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let mut gp = vec![0.0; seq];
        for grp in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                let row = |t: usize| (t * groups + grp) * width + col;
                for i in 0..seq {
                    let p = &probs[((grp * heads + h) * seq + i) * seq..][..seq];
                    let go = &g[row(i)..][..dh];
                    for j in 0..seq {
                        gp[j] = dot(go, &vd[row(j)..][..dh]);
                        axpy(&mut gv[row(j)..row(j) + dh], p[j], go);
                    }
                    let s = dot(p, &gp);
                    for j in 0..seq {
                        let gs = p[j] * (gp[j] - s) * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        axpy(&mut gq[row(i)..row(i) + dh], gs, &kd[row(j)..][..dh]);
                        axpy(&mut gk[row(j)..row(j) + dh], gs, &qd[row(i)..][..dh]);
                    }
                }
            }
        }
        self.acc(grads, q, |d| axpy(d, 1.0, &gq));
        self.acc(grads, k, |d| axpy(d, 1.0, &gk));
        self.acc(grads, v, |d| axpy(d, 1.0, &gv));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], j: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[j].needs_grad {
            return;
        }
        let slot = grads[j].get_or_insert_with(|| vec![0.0; self.nodes[j].value.len()]);
        f(slot);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
