//! Operation tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, stores its output on the tape and
//! remembers which earlier entries it read. [`Tape::backward`] walks the
//! entries from the loss back to index 0 and pushes adjoints to the inputs.

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// tanh approximation of GELU
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

/// Work counters accumulated while recording.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates performed by matrix products.
    pub macs: u64,
    /// Attention score entries materialized.
    pub score_entries: u64,
    /// Elementwise work in nonlinearities, softmax and normalization.
    pub elem_ops: u64,
    /// Largest attention score matrix (rows * cols) seen.
    pub max_score_matrix: u64,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Activate(Var, Activation),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowNormalizeL1(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Mean(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Activate(..) => "activation",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::RowNormalizeL1(_) => "row_normalize_l1",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Tape indices in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Single-threaded recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: Counters,
    bytes: usize,
    stage: &'static str,
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

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Bytes held by recorded values. Nothing is freed before the tape is
    /// dropped, so this is also the peak.
    pub fn live_bytes(&self) -> usize {
        self.bytes
    }

    /// Labels subsequent errors with a pipeline stage name.
    pub fn set_stage(&mut self, stage: &'static str) {
        self.stage = stage;
    }

    /// Adds externally counted attention scores (`rows x cols`).
    pub fn record_scores(&mut self, rows: usize, cols: usize) {
        let n = (rows * cols) as u64;
        self.counters.score_entries += n;
        self.counters.max_score_matrix = self.counters.max_score_matrix.max(n);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            let stage = if self.stage.is_empty() {
                op.name().to_string()
            } else {
                format!("{}/{}", self.stage, op.name())
            };
            return Err(Error::NonFinite { stage });
        }
        self.bytes += value.byte_size();
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf; its gradient flows back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id))
            .expect("parameters are finite")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(vb)?;
        self.counters.macs += (va.rows() * va.cols() * vb.cols()) as u64;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        if vr.len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for r in out.data_mut().chunks_mut(n) {
            for (o, b) in r.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows();
        self.counters.elem_ops += out.len() as u64;
        self.push(out, Op::Softmax(a))
    }

    /// Normalizes each row over the last axis, then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.len() != d || vb.len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let (xhat, inv_std) = normalize_rows(vx, eps);
        let mut out = xhat.clone();
        for r in out.data_mut().chunks_mut(d) {
            for ((o, g), b) in r.iter_mut().zip(vg.data()).zip(vb.data()) {
                *o = *o * g + b;
            }
        }
        self.counters.elem_ops += out.len() as u64;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = self.value(a).map(|v| act.apply(v));
        if act != Activation::Identity {
            self.counters.elem_ops += out.len() as u64;
        }
        self.push(out, Op::Activate(a, act))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Divides each row by the sum of its absolute values.
    pub fn row_normalize_l1(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = va.cols();
        let mut out = va.clone();
        for r in out.data_mut().chunks_mut(n) {
            let s: f64 = r.iter().map(|v| v.abs()).sum();
            if s == 0.0 {
                return Err(Error::NonFinite {
                    stage: "row_normalize_l1 (zero row)".into(),
                });
            }
            r.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::RowNormalizeL1(a))
    }

    /// Mean softmax cross-entropy of `m x C` logits against `m` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let c = vl.cols();
        if vl.rows() != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: t, len: c });
        }
        let probs = vl.softmax_rows();
        let m = targets.len() as f64;
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = vl.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / m;
        self.counters.elem_ops += vl.len() as u64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, store)?;
            grads[i] = Some(g);
        }

        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) -> Result<()> {
        let mut send = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.accumulate(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.get_mut(*id).grad.accumulate(g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, g.matmul(&vb.transpose())?.reshape(va.shape().to_vec())?);
                send(*b, va.transpose().matmul(g)?.reshape(vb.shape().to_vec())?);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                let vr = self.value(*row);
                let n = vr.len();
                let mut acc = vec![0.0; n];
                for r in g.data().chunks(n) {
                    for (s, v) in acc.iter_mut().zip(r) {
                        *s += v;
                    }
                }
                send(*row, Tensor::new(vr.shape().to_vec(), acc)?);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, g.zip_map(vb, "mul", |x, y| x * y)?);
                send(*b, g.zip_map(va, "mul", |x, y| x * y)?);
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Transpose(a) => {
                let shape = self.value(*a).shape().to_vec();
                send(*a, g.transpose().reshape(shape)?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut out = g.clone();
                for (orow, yrow) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = orow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                    for (o, yi) in orow.iter_mut().zip(yrow) {
                        *o = yi * (*o - dot);
                    }
                }
                send(*a, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.cols();
                let vg = self.value(*gain);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let rows = g.data().chunks(d).zip(xhat.data().chunks(d));
                for (r, (grow, hrow)) in rows.enumerate() {
                    let mut sum_gp = 0.0;
                    let mut sum_gph = 0.0;
                    for k in 0..d {
                        let gp = grow[k] * vg.data()[k];
                        sum_gp += gp;
                        sum_gph += gp * hrow[k];
                        ggain[k] += grow[k] * hrow[k];
                        gbias[k] += grow[k];
                    }
                    let dn = d as f64;
                    let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for k in 0..d {
                        let gp = grow[k] * vg.data()[k];
                        out[k] = inv_std[r] / dn * (dn * gp - sum_gp - hrow[k] * sum_gph);
                    }
                }
                send(*x, gx);
                send(*gain, Tensor::new(vg.shape().to_vec(), ggain)?);
                send(*bias, Tensor::new(self.value(*bias).shape().to_vec(), gbias)?);
            }
            Op::Activate(a, act) => {
                let va = self.value(*a);
                send(*a, g.zip_map(va, "activation", |gi, x| gi * act.derivative(x))?);
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (n, w) = (va.cols(), g.cols());
                let mut out = Tensor::zeros(va.shape());
                for (orow, grow) in out.data_mut().chunks_mut(n).zip(g.data().chunks(w)) {
                    orow[*start..start + w].copy_from_slice(grow);
                }
                send(*a, out);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut out = Tensor::zeros(va.shape());
                out.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                send(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    send(p, g.slice_cols(offset, w)?.reshape(self.value(p).shape().to_vec())?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.len();
                    let part = Tensor::new(vp.shape().to_vec(), g.data()[offset..offset + len].to_vec())?;
                    send(p, part);
                    offset += len;
                }
            }
            Op::RowNormalizeL1(a) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut out = Tensor::zeros(va.shape());
                let rows = va.data().chunks(n).zip(g.data().chunks(n)).zip(out.data_mut().chunks_mut(n));
                for ((mrow, grow), orow) in rows {
                    let s: f64 = mrow.iter().map(|v| v.abs()).sum();
                    let dot: f64 = grow.iter().zip(mrow).map(|(gi, mi)| gi * mi).sum();
                    for k in 0..n {
                        let sign = if mrow[k] > 0.0 {
                            1.0
                        } else if mrow[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        orow[k] = grow[k] / s - sign * dot / (s * s);
                    }
                }
                send(*a, out);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = probs.cols();
                let m = targets.len() as f64;
                let upstream = g.data()[0];
                let mut out = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    out.data_mut()[r * c + t] -= 1.0;
                }
                send(*logits, out.scale(upstream / m));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                send(*a, Tensor::filled(va.shape(), g.data()[0] / va.len() as f64));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                send(*a, Tensor::filled(va.shape(), g.data()[0]));
            }
        }
        Ok(())
    }
}

/// Per-row standardization; returns `(xhat, 1/sqrt(var + eps))`.
fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = x.cols();
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in xhat.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
    }
    (xhat, inv)
}
