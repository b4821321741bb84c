//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly: each call computes the
//! output value immediately and appends a node whose inputs are earlier
//! nodes, so insertion order is a valid topological order. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the leaves that were
//! registered as trainable with [`Graph::param`].
//!
//! Broadcasting is limited to adding a bias row to every row of a matrix.

use crate::activation::Nonlinearity;
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Activation(NodeId, Nonlinearity),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Slice {
        src: NodeId,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSquaredError {
        pred: NodeId,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    trainable_leaf: bool,
}

/// Recorded computation. Build it on one thread, then call
/// [`Graph::backward`] once per loss node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if it is not a trainable leaf.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[])),
    }
}

fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    // Intermediate values may go non-finite when training diverges; the
    // trainer inspects the loss instead of failing deep inside an op.
    Tensor::new_allow_nonfinite(shape, data).expect("op produced consistent shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            trainable_leaf: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            trainable_leaf: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            trainable_leaf: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "matmul")?;
        let (k2, n) = dims2(bv, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), raw(vec![m, n], out), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v, &[a]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    /// `a[i, :] + bias` for every row `i`. `bias` may be rank-1 or `1×n`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (m, n) = dims2(av, "add_row")?;
        let (br, bc) = bv.as_matrix_dims();
        if br != 1 || bc != n || bv.rank() > 2 {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), raw(vec![m, n], out), &[a, bias]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    pub fn activation(&mut self, a: NodeId, f: Nonlinearity) -> NodeId {
        let v = f.apply_tensor(self.value(a));
        self.push(Op::Activation(a, f), v, &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = dims2(av, "softmax_rows")?;
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(Op::SoftmaxRows(a), raw(vec![m, n], out), &[a]))
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (rank-1, length n).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = dims2(xv, "layer_norm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                let h = (row[j] - mean) * istd;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(op, raw(vec![m, n], out), &[x, gamma, beta]))
    }

    /// Row lookup: output row `i` is `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (rows, n) = dims2(tv, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!("row id {id} out of range for {rows} rows")));
            }
            out.extend_from_slice(&tv.data()[id * n..(id + 1) * n]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(op, raw(vec![ids.len(), n], out), &[table]))
    }

    /// Rectangular block `[row0, row0+rows) × [col0, col0+cols)` of a matrix.
    pub fn slice(&mut self, src: NodeId, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<NodeId> {
        let sv = self.value(src);
        let (m, n) = dims2(sv, "slice")?;
        if rows == 0 || cols == 0 || row0 + rows > m || col0 + cols > n {
            return Err(Error::shape("slice", sv.shape(), &[row0, rows, col0, cols]));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&sv.data()[i * n + col0..i * n + col0 + cols]);
        }
        Ok(self.push(Op::Slice { src, row0, col0 }, raw(vec![rows, cols], out), &[src]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, n) = dims2(self.value(*first), "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, c) = dims2(v, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), v.shape()));
            }
            out.extend_from_slice(v.data());
            m += r;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), raw(vec![m, n], out), parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = dims2(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            let (r, c) = dims2(v, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), v.shape()));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), raw(vec![m, n], out), parts))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(Error::shape("reshape", av.shape(), shape));
        }
        let v = av.reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    /// Mean softmax cross-entropy of `logits` (`batch×classes`) against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (m, c) = dims2(lv, "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let y = labels[i];
            if y >= c {
                return Err(Error::Contract(format!("label {y} out of range for {c} classes")));
            }
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss / m as f64), &[logits]))
    }

    /// Mean squared error of a `batch×1` prediction column against targets.
    pub fn mean_squared_error(&mut self, pred: NodeId, targets: &[f64]) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape("mean_squared_error", pv.shape(), &[targets.len()]));
        }
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / targets.len() as f64;
        let op = Op::MeanSquaredError {
            pred,
            targets: targets.to_vec(),
        };
        Ok(self.push(op, Tensor::scalar(loss), &[pred]))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // Keep the buffer only if a caller could ask for it.
            if node.trainable_leaf {
                grads[idx] = Some(g);
            }
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !n.trainable_leaf {
                    return None;
                }
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.len()]);
                Some(raw(n.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let buf = grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix_dims();
                let n = node.value.shape()[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.accumulate(grads, *a, |buf| matmul_nt_into(g, bv, buf, m, n, k));
                self.accumulate(grads, *b, |buf| matmul_tn_into(av, g, buf, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |buf| add_into(buf, g));
                self.accumulate(grads, *b, |buf| add_into(buf, g));
            }
            Op::AddRow(a, bias) => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *a, |buf| add_into(buf, g));
                self.accumulate(grads, *bias, |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |buf| {
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                });
            }
            Op::Activation(a, f) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |buf| {
                    for ((o, gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                        *o += gi * f.derivative(xi);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                self.accumulate(grads, *a, |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            brow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.shape()[1];
                let gv = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |buf| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |buf| {
                    for grow in g.chunks(n) {
                        add_into(buf, grow);
                    }
                });
                self.accumulate(grads, *x, |buf| {
                    let nf = n as f64;
                    for (i, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        let brow = &mut buf[i * n..(i + 1) * n];
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            brow[j] += inv_std[i] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *table, |buf| {
                    for (grow, &id) in g.chunks(n).zip(ids) {
                        add_into(&mut buf[id * n..(id + 1) * n], grow);
                    }
                });
            }
            Op::Slice { src, row0, col0 } => {
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                let n = self.value(*src).shape()[1];
                self.accumulate(grads, *src, |buf| {
                    for i in 0..rows {
                        let dst = &mut buf[(row0 + i) * n + col0..(row0 + i) * n + col0 + cols];
                        add_into(dst, &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |buf| {
                        for i in 0..m {
                            add_into(&mut buf[i * w..(i + 1) * w], &g[i * n + off..i * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |buf| add_into(buf, g));
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(grads, *a, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |buf| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            buf[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::MeanSquaredError { pred, targets } => {
                let p = self.value(*pred).data();
                let scale = 2.0 * g[0] / targets.len() as f64;
                self.accumulate(grads, *pred, |buf| {
                    for ((o, pi), ti) in buf.iter_mut().zip(p).zip(targets) {
                        *o += scale * (pi - ti);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
