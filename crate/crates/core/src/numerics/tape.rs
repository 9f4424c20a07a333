//! Minimal reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every registered parameter. Parameters that the
//! forward pass never reached come back as exact zeros.
//!
//! Leaf values are held as `Cow` so that large parameter matrices (the
//! embedding table in particular) are borrowed rather than copied.

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::{log_sum_exp, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter, stable across tapes.
pub type ParamId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
/// Rows with a smaller norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmaxRows {
        x: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropyRows {
        logits: Var,
        probs: Tensor,
        targets: Vec<usize>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Operation record for one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by parameter id.
#[derive(Debug, Default)]
pub struct GradTape {
    grads: HashMap<ParamId, Tensor>,
}

impl GradTape {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, or zeros of `shape` when the parameter was untouched.
    pub fn get_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn into_map(self) -> HashMap<ParamId, Tensor> {
        self.grads
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul shape")
}

/// `a · bᵀ`
fn matmul_t(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.push(super::tensor::dot(ar, b.row(j)));
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul_t shape")
}

/// `aᵀ · b`
fn t_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let ar = a.row(i);
        let br = b.row(i);
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![k, m], out).expect("t_matmul shape")
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, v: Var, what: &str) -> Result<&Tensor> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::shape(format!("{what}: expected a matrix, got {:?}", t.shape())));
        }
        Ok(t)
    }

    /// Constant input; receives no gradient bookkeeping outside the tape.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register a parameter by borrowing its storage. Registering the same id
    /// twice returns the original node.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x [n×m] + bias [1×m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.matrix(x, "add_row")?;
        let tb = self.matrix(bias, "add_row bias")?;
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::shape(format!("add_row {:?} + {:?}", tx.shape(), tb.shape())));
        }
        let m = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % m])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.matrix(a, "matmul lhs")?;
        let tb = self.matrix(b, "matmul rhs")?;
        if ta.cols() != tb.rows() {
            return Err(Error::shape(format!("matmul {:?} · {:?}", ta.shape(), tb.shape())));
        }
        let out = matmul(ta, tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.matrix(a, "matmul_t lhs")?;
        let tb = self.matrix(b, "matmul_t rhs")?;
        if ta.cols() != tb.cols() {
            return Err(Error::shape(format!("matmul_t {:?} · {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let out = matmul_t(ta, tb);
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, factor))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalization with `[1×m]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.matrix(x, "layer_norm")?;
        let tg = self.matrix(gain, "layer_norm gain")?;
        let tb = self.matrix(bias, "layer_norm bias")?;
        let m = tx.cols();
        if tg.shape() != [1, m] || tb.shape() != [1, m] {
            return Err(Error::shape(format!(
                "layer_norm {:?} with gain {:?}, bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let mut normalized = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                normalized.push(xh);
                out.push(xh * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Softmax over each row, restricted to columns where `keep[j]` is true.
    /// Excluded columns get probability exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.matrix(x, "masked_softmax_rows")?;
        if keep.len() != tx.cols() {
            return Err(Error::shape(format!(
                "softmax mask of length {} for {:?}",
                keep.len(),
                tx.shape()
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::invalid("softmax with every column masked"));
        }
        let m = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..m {
                if keep[j] {
                    let e = (row[j] - max).exp();
                    out[i * m + j] = e;
                    total += e;
                }
            }
            for v in &mut out[i * m..(i + 1) * m] {
                *v /= total;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::MaskedSoftmaxRows { x }))
    }

    /// Rows of `table` at `ids`, stacked. Gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.matrix(table, "gather_rows")?;
        let out = t.gather_rows(ids)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.matrix(x, "slice_cols")?;
        if start >= end || end > tx.cols() {
            return Err(Error::shape(format!("slice cols {start}..{end} of {:?}", tx.shape())));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(tx.rows() * w);
        for i in 0..tx.rows() {
            data.extend_from_slice(&tx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![tx.rows(), w], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.matrix(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?, "concat_cols")?;
        let rows = first.rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.matrix(p, "concat_cols")?;
            if t.rows() != rows {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.matrix(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?, "concat_rows")?;
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.matrix(p, "concat_rows")?;
            if t.cols() != cols {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Arithmetic mean of the listed rows, as a `[1×m]` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.matrix(x, "mean_rows")?;
        if rows.is_empty() {
            return Err(Error::invalid("mean over zero rows"));
        }
        let m = tx.cols();
        let mut acc = vec![0.0; m];
        for &r in rows {
            if r >= tx.rows() {
                return Err(Error::shape(format!("row {r} of {:?}", tx.shape())));
            }
            for (a, v) in acc.iter_mut().zip(tx.row(r)) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(self.push(
            Tensor::row_vector(acc),
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Scale every row to unit Euclidean norm; errors if a row norm is below [`MIN_NORM`].
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.matrix(x, "l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.len());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let n = super::tensor::l2_norm(row);
            if !(n >= MIN_NORM) {
                return Err(Error::ZeroVector(format!("row {i} (norm {n:e})")));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Mean over rows of `−log softmax(row)[target]`, as a `[1×1]` scalar.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.matrix(logits, "cross_entropy_rows")?;
        if targets.len() != tl.rows() || tl.rows() == 0 {
            return Err(Error::shape(format!(
                "{} targets for logits {:?}",
                targets.len(),
                tl.shape()
            )));
        }
        if tl.cols() == 0 {
            return Err(Error::invalid("cross entropy over empty logits"));
        }
        tl.ensure_finite("cross entropy logits")?;
        let m = tl.cols();
        let mut probs = Vec::with_capacity(tl.len());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(Error::invalid(format!("target {t} out of range for {m} logits")));
            }
            let row = tl.row(i);
            let lse = log_sum_exp(row);
            total += (lse - row[t]).max(0.0);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::new(tl.shape().to_vec(), probs)?;
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse pass from a `[1×1]` node.
    pub fn backward(&self, output: Var) -> Result<GradTape> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(x, bias) => {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for i in 0..g.rows() {
                        for (a, v) in gb.iter_mut().zip(g.row(i)) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], Tensor::row_vector(gb));
                    accumulate(&mut grads[x.0], g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], matmul_t(&g, tb));
                    accumulate(&mut grads[b.0], t_matmul(ta, &g));
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], matmul(&g, tb));
                    accumulate(&mut grads[b.0], t_matmul(&g, ta));
                }
                Op::Scale(x, f) => {
                    let data = g.data().iter().map(|v| v * f).collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let (n, m) = (g.rows(), g.cols());
                    let mut gx = vec![0.0; n * m];
                    let mut gg = vec![0.0; m];
                    let mut gbias = vec![0.0; m];
                    for i in 0..n {
                        let gy = g.row(i);
                        let xh = &normalized[i * m..(i + 1) * m];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..m {
                            let d = gy[j] * tg.data()[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                            gg[j] += gy[j] * xh[j];
                            gbias[j] += gy[j];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for j in 0..m {
                            let d = gy[j] * tg.data()[j];
                            gx[i * m + j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, m], gx)?);
                    accumulate(&mut grads[gain.0], Tensor::row_vector(gg));
                    accumulate(&mut grads[bias.0], Tensor::row_vector(gbias));
                }
                Op::MaskedSoftmaxRows { x } => {
                    let y = &node.value;
                    let m = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = super::tensor::dot(yr, gr);
                        for j in 0..m {
                            gx[i * m + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::GatherRows { table, ids } => {
                    let tt = self.value(*table);
                    let mut gt = Tensor::zeros(tt.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        for (a, v) in gt.row_mut(id).iter_mut().zip(g.row(k)) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.shape());
                    let w = g.cols();
                    for i in 0..g.rows() {
                        gx.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        accumulate(&mut grads[p.0], Tensor::new(vec![g.rows(), w], data)?);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        let c = g.cols();
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        accumulate(&mut grads[p.0], Tensor::new(vec![r, c], data)?);
                        offset += r;
                    }
                }
                Op::MeanRows { x, rows } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.shape());
                    let n = rows.len() as f64;
                    for &r in rows {
                        for (a, v) in gx.row_mut(r).iter_mut().zip(g.row(0)) {
                            *a += v / n;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let m = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = super::tensor::dot(yr, gr);
                        for j in 0..m {
                            gx[i * m + j] = (gr[j] - yr[j] * inner) / norms[i];
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::CrossEntropyRows {
                    logits,
                    probs,
                    targets,
                } => {
                    let scale = g.item() / targets.len() as f64;
                    let mut gl = probs.clone();
                    let m = gl.cols();
                    for (i, &t) in targets.iter().enumerate() {
                        gl.data_mut()[i * m + t] -= 1.0;
                    }
                    gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }

        let mut out = HashMap::new();
        for (&id, &v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(id, g);
        }
        Ok(GradTape { grads: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untouched_parameters_get_exact_zero_gradient() {
        let used = Tensor::row_vector(vec![1.0, 2.0]);
        let unused = Tensor::row_vector(vec![5.0, 6.0]);
        let mut tape = Tape::new();
        let a = tape.param(0, &used);
        let _b = tape.param(1, &unused);
        let s = tape.mean_rows(a, &[0]).unwrap();
        let l = tape.cross_entropy_rows(s, &[0]).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(1).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(0).unwrap().shape(), used.shape());
    }

    #[test]
    fn reused_parameter_accumulates() {
        let p = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let a = tape.param(0, &p);
        let again = tape.param(0, &p);
        assert_eq!(a, again);
        // p·p through matmul: d/dp = 2p
        let sq = tape.matmul(a, a).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(0).unwrap().item(), 6.0);
    }

    #[test]
    fn masked_softmax_zeroes_excluded_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, 50.0, 1.0]));
        let y = tape.masked_softmax_rows(x, &[true, false, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
        assert!(tape.masked_softmax_rows(x, &[false, false, false]).is_err());
    }

    #[test]
    fn normalize_rejects_near_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1e-12, 0.0]));
        assert!(matches!(tape.l2_normalize_rows(x), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
