//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! Every forward pass appends nodes to a fresh [`Graph`]; `backward` walks the
//! nodes in reverse insertion order, which is a valid topological order since a
//! node can only reference nodes created before it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{
    gelu, gelu_grad, layer_norm_forward, log_softmax_f64, matmul, matmul_nt, matmul_tn,
    softmax_into,
};
use crate::numerics::{ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConstRow(Var),
    Scale(Var, f32),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowPrefix {
        x: Var,
        row: usize,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<f32>,
        probs: Vec<f32>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass. Owned by one training step at a time.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records (once per graph) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a [m,k] · b [n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.cols() != tb.cols() {
            return Err(Error::shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = ta.cols();
        if tb.len() != cols {
            return Err(Error::shape(format!(
                "add_row {:?} + bias {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    /// Adds a constant row (no gradient) to every row of `a`; used for attention masks.
    pub fn add_const_row(&mut self, a: Var, row: &[f32]) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        if row.len() != cols {
            return Err(Error::shape(format!("add_const_row width {} vs {cols}", row.len())));
        }
        let mut data = ta.data().to_vec();
        for r in data.chunks_mut(cols) {
            for (v, b) in r.iter_mut().zip(row) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::AddConstRow(a), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape(format!(
                "layer_norm axis {cols} vs gain {:?}",
                self.value(gain).shape()
            )));
        }
        let (out, xhat, rstd) =
            layer_norm_forward(tx, self.value(gain).data(), self.value(bias).data(), eps);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = vec![0.0f32; ta.len()];
        for (src, dst) in ta.data().chunks(cols).zip(data.chunks_mut(cols)) {
            softmax_into(src, dst);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x));
        if width == 0 || start + width > cols {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of {cols}",
                start + width
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], data),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows column mismatch"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = dims2(self.value(table));
        if ids.is_empty() {
            return Err(Error::shape("gather with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(format!("gather id {bad} >= table rows {vocab}")));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(x).rows();
        if rows.is_empty() {
            return Err(Error::shape("select_rows with no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(format!("select_rows index {bad} >= {n}")));
        }
        let src = self.value(x);
        let cols = src.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), cols], data),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// The first `len` entries of row `row`, as a `[1, len]` matrix.
    pub fn row_prefix(&mut self, x: Var, row: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x));
        if row >= rows || len == 0 || len > cols {
            return Err(Error::shape(format!(
                "row_prefix row {row} len {len} of [{rows},{cols}]"
            )));
        }
        let data = self.value(x).row(row)[..len].to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![1, len], data),
            Op::RowPrefix { x, row },
            ng,
        ))
    }

    /// `Σ_j weights[j] · inputs[j]` where `weights` is a `[1, n]` row.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        if inputs.is_empty() || self.value(weights).len() != inputs.len() {
            return Err(Error::shape(format!(
                "weighted_sum of {} inputs with {} weights",
                inputs.len(),
                self.value(weights).len()
            )));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        if inputs.iter().any(|&v| self.value(v).shape() != shape.as_slice()) {
            return Err(Error::shape("weighted_sum inputs differ in shape"));
        }
        let w = self.value(weights).data().to_vec();
        let mut data = vec![0.0f32; self.value(inputs[0]).len()];
        for (&v, &wj) in inputs.iter().zip(&w) {
            for (o, x) in data.iter_mut().zip(self.value(v).data()) {
                *o += wj * x;
            }
        }
        let ng = self.ng(weights) || inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.value(logits));
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy {rows} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::shape(format!("target {bad} >= classes {cols}")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0f32; rows * cols];
        let mut loss = 0.0f64;
        for r in 0..rows {
            let ls = log_softmax_f64(z.row(r));
            loss -= ls[targets[r]];
            for c in 0..cols {
                probs[r * cols + c] = ls[c].exp() as f32;
            }
        }
        let value = Tensor::scalar((loss / rows as f64) as f32);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of `-Σ_c target[c] · log softmax(logits)[c]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() || z.cols() != targets.cols() {
            return Err(Error::shape(format!(
                "soft_cross_entropy logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        let (rows, cols) = dims2(z);
        let mut probs = vec![0.0f32; rows * cols];
        let mut loss = 0.0f64;
        for r in 0..rows {
            let ls = log_softmax_f64(z.row(r));
            let t = targets.row(r);
            for c in 0..cols {
                loss -= t[c] as f64 * ls[c];
                probs[r * cols + c] = ls[c].exp() as f32;
            }
        }
        let value = Tensor::scalar((loss / rows as f64) as f32);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), ng)
    }

    /// Back-propagates from the scalar `loss`, accumulating into `store`'s gradients.
    ///
    /// Gradients are added to whatever `store` already holds; call
    /// [`ParamStore::zero_grads`] first for a fresh step.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let mut send = |v: Var, delta: Tensor, graph: &Graph| {
            if !graph.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => store.accumulate_grad(name, g)?,
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                if self.ng(*a) {
                    let da = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    send(*a, Tensor::from_parts(vec![m, k], da), self);
                }
                if self.ng(*b) {
                    let db = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    send(*b, Tensor::from_parts(vec![k, n], db), self);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).rows();
                if self.ng(*a) {
                    let da = matmul(g.data(), self.value(*b).data(), m, n, k);
                    send(*a, Tensor::from_parts(vec![m, k], da), self);
                }
                if self.ng(*b) {
                    let db = matmul_tn(g.data(), self.value(*a).data(), m, n, k);
                    send(*b, Tensor::from_parts(vec![n, k], db), self);
                }
            }
            Op::Add(a, b) => {
                send(*a, reshape_like(g, self.value(*a)), self);
                send(*b, reshape_like(g, self.value(*b)), self);
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone(), self);
                if self.ng(*bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0f32; cols];
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    send(*bias, Tensor::from_parts(shape, db), self);
                }
            }
            Op::AddConstRow(a) => send(*a, g.clone(), self),
            Op::Scale(a, s) => send(*a, g.map(|v| v * s), self),
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                send(*a, Tensor::from_parts(ta.shape().to_vec(), da), self);
                send(*b, Tensor::from_parts(tb.shape().to_vec(), db), self);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                send(*a, Tensor::from_parts(x.shape().to_vec(), d), self);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let rows = tx.rows();
                let gamma = self.value(*gain).data();
                let mut dgain = vec![0.0f64; cols];
                let mut dbias = vec![0.0f64; cols];
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_dh = 0.0f64;
                    let mut sum_dh_h = 0.0f64;
                    for c in 0..cols {
                        dgain[c] += gr[c] as f64 * hr[c] as f64;
                        dbias[c] += gr[c] as f64;
                        let dh = gr[c] as f64 * gamma[c] as f64;
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c] as f64;
                    }
                    let inv_n = 1.0 / cols as f64;
                    for c in 0..cols {
                        let dh = gr[c] as f64 * gamma[c] as f64;
                        dx[r * cols + c] = (rstd[r] as f64
                            * (dh - inv_n * sum_dh - hr[c] as f64 * inv_n * sum_dh_h))
                            as f32;
                    }
                }
                send(*x, Tensor::from_parts(tx.shape().to_vec(), dx), self);
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                send(
                    *gain,
                    Tensor::from_parts(gshape, dgain.into_iter().map(|v| v as f32).collect()),
                    self,
                );
                send(
                    *bias,
                    Tensor::from_parts(bshape, dbias.into_iter().map(|v| v as f32).collect()),
                    self,
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| *a as f64 * *b as f64).sum();
                    for c in 0..cols {
                        dr[c] = (yr[c] as f64 * (gr[c] as f64 - dot)) as f32;
                    }
                }
                send(*a, Tensor::from_parts(y.shape().to_vec(), dx), self);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = dims2(self.value(*x));
                let width = g.cols();
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
                }
                send(*x, Tensor::from_parts(vec![rows, cols], dx), self);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    send(p, Tensor::from_parts(self.value(p).shape().to_vec(), dp), self);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let dp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    send(p, Tensor::from_parts(self.value(p).shape().to_vec(), dp), self);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut dt = vec![0.0f32; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for (d, v) in dt[id * cols..(id + 1) * cols].iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                send(*table, Tensor::from_parts(t.shape().to_vec(), dt), self);
            }
            Op::SelectRows { x, rows } => {
                let t = self.value(*x);
                let cols = t.cols();
                let mut dx = vec![0.0f32; t.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                send(*x, Tensor::from_parts(t.shape().to_vec(), dx), self);
            }
            Op::RowPrefix { x, row } => {
                let t = self.value(*x);
                let cols = t.cols();
                let mut dx = vec![0.0f32; t.len()];
                dx[row * cols..row * cols + g.len()].copy_from_slice(g.data());
                send(*x, Tensor::from_parts(t.shape().to_vec(), dx), self);
            }
            Op::WeightedSum { inputs, weights } => {
                let w = self.value(*weights).data();
                if self.ng(*weights) {
                    let dw: Vec<f32> = inputs
                        .iter()
                        .map(|&v| {
                            self.value(v)
                                .data()
                                .iter()
                                .zip(g.data())
                                .map(|(a, b)| *a as f64 * *b as f64)
                                .sum::<f64>() as f32
                        })
                        .collect();
                    let shape = self.value(*weights).shape().to_vec();
                    send(*weights, Tensor::from_parts(shape, dw), self);
                }
                for (&v, &wj) in inputs.iter().zip(w) {
                    send(v, g.map(|x| x * wj), self);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let z = self.value(*logits);
                let cols = z.cols();
                let scale = g.item() / targets.len() as f32;
                let mut dz: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dz[r * cols + t] -= scale;
                }
                send(*logits, Tensor::from_parts(z.shape().to_vec(), dz), self);
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let z = self.value(*logits);
                let cols = z.cols();
                let rows = z.rows();
                let scale = g.item() as f64 / rows as f64;
                let mut dz = vec![0.0f32; z.len()];
                for r in 0..rows {
                    let t = &targets[r * cols..(r + 1) * cols];
                    let mass: f64 = t.iter().map(|&v| v as f64).sum();
                    for c in 0..cols {
                        dz[r * cols + c] = ((probs[r * cols + c] as f64 * mass
                            - t[c] as f64)
                            * scale) as f32;
                    }
                }
                send(*logits, Tensor::from_parts(z.shape().to_vec(), dz), self);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                send(*a, Tensor::full(t.shape(), g.item()), self);
            }
        }
        Ok(())
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), g.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = sum(W·x) with x fixed -> dL/dW[i][j] = x[i]
        let mut store = store_with(
            "w",
            Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap(),
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, -3.0]).unwrap());
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(
            store.grad("w").unwrap().data(),
            &[1.0, 1.0, 2.0, 2.0, -3.0, -3.0]
        );
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut store = store_with("used", Tensor::scalar(2.0));
        store.insert("unused", Tensor::scalar(5.0)).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, "used").unwrap();
        let _ = g.param(&store, "unused").unwrap();
        let sq = g.mul(u, u).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("used").unwrap().item(), 4.0);
        assert_eq!(store.grad("unused").unwrap().item(), 0.0);
    }

    #[test]
    fn backward_before_forward_fails() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        assert!(matches!(g.backward(Var(0), &mut store), Err(Error::EmptyGraph)));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        let l = g.cross_entropy(z, &[1, 3]).unwrap();
        assert!((g.value(l).item() - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn weighted_sum_with_one_hot_is_selection() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::row_vector(vec![0.0, 1.0]).unwrap());
        let out = g.weighted_sum(&[a, b], w).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0]);
    }
}
