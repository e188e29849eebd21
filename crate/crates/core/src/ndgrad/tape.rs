//! Append-only computation tape with reverse-mode gradients.
//!
//! Every op evaluates eagerly, stores its output on the tape and returns a
//! [`Var`] handle. [`Tape::backward`] sweeps the nodes in reverse insertion
//! order, so fan-out gradients are always summed in the same order and a
//! rerun is bit-reproducible.
//!
//! Leaves come in two kinds: learnable ([`Tape::param`]) and frozen
//! ([`Tape::constant`]). Nodes that do not depend on a learnable leaf never
//! get a gradient buffer.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice {
        src: Var,
        row0: usize,
        col0: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Sum(Var),
    MaskedCe {
        logits: Var,
        allowed: Vec<bool>,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    learnable: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every learnable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU, shared with finite-difference oracles.
/// Uses `(1 + tanh u) / 2 = σ(2u)`, which needs a single `exp`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c = a · b`; each output accumulates over `k` in increasing order.
/// Rows are processed four at a time so each row of `b` is loaded once per
/// block; every output still sums its terms in the same order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let blocked = m - m % 4;
    if n > 0 {
        for (blk, cblk) in c[..blocked * n].chunks_exact_mut(4 * n).enumerate() {
            let i = 4 * blk;
            let (c0, rest) = cblk.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in 0..k {
                let (a0, a1, a2, a3) = (
                    a[i * k + p],
                    a[(i + 1) * k + p],
                    a[(i + 2) * k + p],
                    a[(i + 3) * k + p],
                );
                let brow = &b[p * n..(p + 1) * n];
                for ((((x0, x1), x2), x3), &bj) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(brow)
                {
                    *x0 += a0 * bj;
                    *x1 += a1 * bj;
                    *x2 += a2 * bj;
                    *x3 += a3 * bj;
                }
            }
        }
    }
    for i in blocked..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_learnable(&self, v: Var) -> bool {
        self.nodes[v.0].learnable
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            learnable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::dim(op, format!("expected a matrix, got {:?}", self.value(v).shape())))
    }

    /// Learnable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, t, true);
        self.nodes[v.0].learnable = true;
        v
    }

    /// Frozen leaf: never allocates gradient storage.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let c = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], c), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "transpose")?;
        let t = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Tensor::from_parts(vec![c, r], t), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Tensor::from_parts(shape, data), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), Tensor::from_parts(shape, data), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + s).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), out, rg)
    }

    /// Adds a length-`d` vector to every row of an `n × d` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims(x, "add_row")?;
        if self.value(bias).len() != d {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, bj) in data[i * d..(i + 1) * d].iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRow(x, bias), Tensor::from_parts(vec![n, d], data), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "softmax_rows")?;
        if c == 0 {
            return Err(Error::dim("softmax_rows", "zero columns"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SoftmaxRows(x), Tensor::from_parts(vec![r, c], out), rg))
    }

    /// Per-row standardization (population variance) followed by `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (n, d) = self.dims(x, "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Tensor::from_parts(vec![n, d], out),
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(Op::Gelu(x), out, rg)
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_rows_many(&[a, b])
    }

    pub fn concat_rows_many(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, d) = self.dims(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != d {
                return Err(Error::dim(
                    "concat_rows",
                    format!(
                        "column mismatch {:?} vs {:?}",
                        self.value(first).shape(),
                        self.value(p).shape()
                    ),
                ));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_parts(vec![rows, d], data),
            rg,
        ))
    }

    /// Places matrices side by side.
    pub fn concat_cols_many(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (n, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != n {
                return Err(Error::dim(
                    "concat_cols",
                    format!(
                        "row mismatch {:?} vs {:?}",
                        self.value(first).shape(),
                        self.value(p).shape()
                    ),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_parts(vec![n, total], data),
            rg,
        ))
    }

    /// Sub-matrix `rows × cols` (half-open ranges).
    pub fn slice(
        &mut self,
        src: Var,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Var> {
        let (n, d) = self.dims(src, "slice")?;
        if rows.end > n || cols.end > d || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::dim(
                "slice",
                format!("{rows:?} x {cols:?} out of {:?}", self.value(src).shape()),
            ));
        }
        let w = cols.end - cols.start;
        let mut data = Vec::with_capacity(rows.len() * w);
        let s = self.value(src).data();
        for i in rows.clone() {
            data.extend_from_slice(&s[i * d + cols.start..i * d + cols.end]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            Op::Slice {
                src,
                row0: rows.start,
                col0: cols.start,
            },
            Tensor::from_parts(vec![rows.len(), w], data),
            rg,
        ))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x, "normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for j in 0..d {
                out[i * d + j] = row[j] / denom;
            }
            norms.push(norm);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Op::NormalizeRows { x, norms, eps },
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::from_parts(Vec::new(), vec![s]), rg)
    }

    /// Mean cross-entropy over rows of `logits`, with the log-sum-exp taken
    /// only over classes where `allowed[c]` is true. Excluded classes get a
    /// probability of exactly 0 and an exactly-zero gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        allowed: &[bool],
        labels: &[usize],
    ) -> Result<Var> {
        let (b, c) = self.dims(logits, "masked_cross_entropy")?;
        if allowed.len() != c {
            return Err(Error::dim(
                "masked_cross_entropy",
                format!("mask length {} for {c} classes", allowed.len()),
            ));
        }
        if labels.len() != b {
            return Err(Error::dim(
                "masked_cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if b == 0 {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        for &y in labels {
            if y >= c {
                return Err(Error::Label {
                    label: y,
                    classes: c,
                });
            }
            if !allowed[y] {
                return Err(Error::Contract(format!(
                    "label {y} is masked out; mask does not match the batch"
                )));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let (argmax, max) = row
                .iter()
                .enumerate()
                .filter(|(j, _)| allowed[*j])
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                });
            // Sum of exp(z - max) over allowed classes other than the argmax,
            // so log-sum-exp = max + ln_1p(rest) keeps full precision.
            let mut rest = 0.0;
            for j in 0..c {
                if allowed[j] && j != argmax {
                    rest += (row[j] - max).exp();
                }
            }
            let denom = 1.0 + rest;
            for j in 0..c {
                if allowed[j] {
                    probs[i * c + j] = (row[j] - max).exp() / denom;
                }
            }
            total += (max - row[labels[i]]) + rest.ln_1p();
        }
        let loss = total / b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::MaskedCe {
                logits,
                allowed: allowed.to_vec(),
                labels: labels.to_vec(),
                probs,
            },
            Tensor::from_parts(Vec::new(), vec![loss]),
            rg,
        ))
    }

    /// Softmax probabilities recorded by a [`Tape::masked_cross_entropy`] node.
    pub fn ce_probabilities(&self, loss: Var) -> Option<Tensor> {
        match &self.nodes[loss.0].op {
            Op::MaskedCe { logits, probs, .. } => Some(Tensor::from_parts(
                self.value(*logits).shape().to_vec(),
                probs.clone(),
            )),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar node. Returns a gradient for every
    /// learnable leaf on the tape; leaves the loss does not depend on get
    /// exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        }
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.learnable {
                out.by_leaf.insert(Var(i), g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.learnable {
                out.by_leaf
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let da = matmul_raw(gd, &bt, m, n, k);
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::from_parts(shape, da));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let db = matmul_raw(&at, gd, k, m, n);
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let da = transpose_raw(gd, c, r);
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, da));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let (n, d) = g.dims2().unwrap();
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for (acc, v) in db.iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_parts(shape, db));
                }
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = node.value.dims2().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![r, c], dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = node.value.dims2().unwrap();
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let gr = &gd[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![n, d], dx));
                }
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gd[i * d + j] * xhat[i * d + j];
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::from_parts(shape, dg));
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += gd[i * d + j];
                        }
                    }
                    let shape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::from_parts(shape, db));
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let d = gd.iter().zip(xs).map(|(g, &v)| g * gelu_grad_scalar(v)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let shape = self.value(p).shape().to_vec();
                        let part = gd[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(shape, part));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    if self.rg(p) {
                        let mut part = Vec::with_capacity(n * w);
                        for i in 0..n {
                            part.extend_from_slice(&gd[i * total + col..i * total + col + w]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(shape, part));
                    }
                    col += w;
                }
            }
            Op::Slice { src, row0, col0 } => {
                if !self.rg(*src) {
                    return;
                }
                let (_, d) = self.value(*src).dims2().unwrap();
                let (r, w) = node.value.dims2().unwrap();
                // Added straight into the source gradient: slices of large
                // activations would otherwise cost a full-size buffer each.
                let full = grads[src.0].get_or_insert_with(|| Tensor::zeros(self.value(*src).shape()));
                let fd = full.data_mut();
                for i in 0..r {
                    let dst = (row0 + i) * d + col0;
                    for (a, b) in fd[dst..dst + w].iter_mut().zip(&gd[i * w..(i + 1) * w]) {
                        *a += *b;
                    }
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                let (n, d) = node.value.dims2().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let gr = &gd[i * d..(i + 1) * d];
                    if norms[i] > *eps {
                        let yr = &y[i * d..(i + 1) * d];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[i * d + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..d {
                            dx[i * d + j] = gr[j] / eps;
                        }
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(shape, gd[0]));
            }
            Op::MaskedCe {
                logits,
                allowed,
                labels,
                probs,
            } => {
                let (b, c) = self.value(*logits).dims2().unwrap();
                let scale = gd[0] / b as f64;
                let mut dz = vec![0.0; b * c];
                for i in 0..b {
                    for j in 0..c {
                        if allowed[j] {
                            let target = if labels[i] == j { 1.0 } else { 0.0 };
                            dz[i * c + j] = (probs[i * c + j] - target) * scale;
                        }
                    }
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::from_parts(shape, dz));
            }
        }
    }
}
