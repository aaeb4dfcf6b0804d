//! Reverse-mode autodiff over a append-only op tape.
//!
//! Nodes are recorded in construction order, which is already topological,
//! so the backward pass is a single reverse sweep. Every op output is
//! checked finite; NaN/Inf anywhere surfaces as a numeric error instead of
//! propagating silently.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Train/eval switch for stochastic ops (dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRowBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: S,
    },
    Gelu(usize),
    MeanRowsMasked {
        x: usize,
        mask: Vec<bool>,
        count: usize,
    },
    Row {
        x: usize,
        index: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    Dropout {
        x: usize,
        keep: Vec<bool>,
        scale: S,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// node id -> store name, deduplicated so a parameter pulled twice
    /// shares one node (and therefore accumulates gradient naturally).
    param_nodes: Vec<(usize, String)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Enter a tensor; it participates in gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Enter a tensor that never receives gradient (inputs, masks).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Enter a named parameter from the store. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some((id, _)) = self.param_nodes.iter().find(|(_, n)| n == name) {
            return Ok(Var(*id));
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.param_nodes.push((v.0, name.to_string()));
        Ok(v)
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Dim {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![S::zero(); m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let crow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] = crow[j] + aip * brow[j];
                }
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if !t.is_matrix() {
            return Err(Error::contract("transpose expects a 2-D tensor"));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor::from_vec(vec![n, m], out)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Transpose(x.0), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dim {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<S> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), out)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    /// `x[r x c] + bias[c]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if !tx.is_matrix() || tb.shape().len() != 1 || tb.numel() != tx.cols() {
            return Err(Error::Dim {
                op: "add_row_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (j, &b) in tb.data().iter().enumerate() {
                out.push(tx.data()[i * c + j] + b);
            }
        }
        let value = Tensor::from_vec(vec![r, c], out)?;
        let needs = self.needs(x.0) || self.needs(bias.0);
        Ok(self.push(value, Op::AddRowBias(x.0, bias.0), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dim {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<S> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), out)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), needs))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let out: Vec<S> = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Scale(x.0, c), needs))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if !tx.is_matrix() {
            return Err(Error::contract("softmax_rows expects a 2-D tensor"));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        let value = Tensor::from_vec(vec![r, c], out)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::SoftmaxRows(x.0), needs))
    }

    /// Normalize each row of `x[.. x d]` to zero mean / unit variance,
    /// then scale by `gamma[d]` and shift by `beta[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::Dim {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::Param("layer_norm eps must be positive".into()));
        }
        let rows = tx.numel() / d;
        let mut out = vec![S::zero(); tx.numel()];
        let inv_d = S::one() / S::from_usize(d);
        for i in 0..rows {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().cloned().sum::<S>() * inv_d;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                * inv_d;
            let inv_std = S::one() / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                out[i * d + j] = tg.data()[j] * xhat + tb.data()[j];
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation (the BERT-family variant).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let out: Vec<S> = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Gelu(x.0), needs))
    }

    /// Mean over rows where `mask` is true: `[L x d] -> [1 x d]`.
    pub fn mean_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if !tx.is_matrix() || mask.len() != tx.rows() {
            return Err(Error::contract(format!(
                "mean_rows_masked: mask length {} vs {} rows",
                mask.len(),
                tx.rows()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("mean_rows_masked: empty mask"));
        }
        let c = tx.cols();
        let mut out = vec![S::zero(); c];
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = *slot + tx.data()[i * c + j];
                }
            }
        }
        let inv = S::one() / S::from_usize(count);
        for v in &mut out {
            *v = *v * inv;
        }
        let value = Tensor::from_vec(vec![1, c], out)?;
        let needs = self.needs(x.0);
        Ok(self.push(
            value,
            Op::MeanRowsMasked {
                x: x.0,
                mask: mask.to_vec(),
                count,
            },
            needs,
        ))
    }

    /// Extract one row: `[L x d] -> [1 x d]`.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if !tx.is_matrix() || index >= tx.rows() {
            return Err(Error::contract(format!(
                "row {index} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let c = tx.cols();
        let out = tx.data()[index * c..(index + 1) * c].to_vec();
        let value = Tensor::from_vec(vec![1, c], out)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Row { x: x.0, index }, needs))
    }

    /// Concatenate along the feature axis; all inputs share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let r = self.nodes[parts[0].0].value.rows();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_matrix() || t.rows() != r {
                return Err(Error::Dim {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.nodes[p.0].value.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.cols();
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_vec(vec![r, total], out)?;
        let needs = parts.iter().any(|&p| self.needs(p.0));
        Ok(self.push(
            value,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            needs,
        ))
    }

    /// Stack along the row axis; all inputs share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of nothing"));
        }
        let c = self.nodes[parts[0].0].value.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_matrix() || t.cols() != c {
                return Err(Error::Dim {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(vec![rows, c], out)?;
        let needs = parts.iter().any(|&p| self.needs(p.0));
        Ok(self.push(
            value,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let s: S = tx.data().iter().cloned().sum();
        let value = Tensor::scalar(s);
        value.check_finite("sum_all")?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::SumAll(x.0), needs))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let s: S = tx.data().iter().cloned().sum::<S>() / S::from_usize(tx.numel());
        let value = Tensor::scalar(s);
        value.check_finite("mean_all")?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::MeanAll(x.0), needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if !tl.is_matrix() || tl.rows() != labels.len() {
            return Err(Error::contract(format!(
                "cross_entropy: {} logit rows vs {} labels",
                tl.rows(),
                labels.len()
            )));
        }
        let (b, c) = (tl.rows(), tl.cols());
        if b == 0 {
            return Err(Error::contract("cross_entropy on empty batch"));
        }
        for (i, &lbl) in labels.iter().enumerate() {
            if lbl >= c {
                return Err(Error::data(format!(
                    "label {lbl} out of range [0, {c}) at record index {i}"
                )));
            }
        }
        let mut total = S::zero();
        for i in 0..b {
            let row = &tl.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total = total + lse - row[labels[i]];
        }
        let value = Tensor::scalar(total / S::from_usize(b));
        value.check_finite("cross_entropy")?;
        let needs = self.needs(logits.0);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Inverted dropout: zero with probability `p` in train mode, scale
    /// survivors by 1/(1-p); identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut StreamRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let tx = &self.nodes[x.0].value;
        let keep: Vec<bool> = (0..tx.numel()).map(|_| rng.next_f64() >= p).collect();
        let scale = S::from_f64(1.0 / (1.0 - p));
        let out: Vec<S> = tx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { S::zero() })
            .collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        let needs = self.needs(x.0);
        Ok(self.push(
            value,
            Op::Dropout {
                x: x.0,
                keep,
                scale,
            },
            needs,
        ))
    }

    /// Gather rows of an embedding table: `table[v x d], ids[L] -> [L x d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if !tt.is_matrix() {
            return Err(Error::contract("embed expects a 2-D table"));
        }
        if ids.is_empty() {
            return Err(Error::contract("embed with empty id list"));
        }
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!(
                    "embedding id {id} out of range [0, {v})"
                )));
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], out)?;
        let needs = self.needs(table.0);
        Ok(self.push(
            value,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Linear layer: `x @ w + b` (bias optional).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add_row_bias(y, bias),
            None => Ok(y),
        }
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-node gradients; use
    /// [`Gradients::apply_to_store`] or [`Graph::backward_params`] to move
    /// them onto named parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let gy = grads[id].take().unwrap();
            self.propagate(id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }

        // Non-finite gradients are an error state like non-finite values.
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {id}"
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// backward + write gradients into the store. Errors if any touched
    /// parameter still holds a gradient from a previous pass.
    pub fn backward_params(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        let grads = self.backward(loss)?;
        grads.apply_to_store(self, store)?;
        Ok(grads)
    }

    fn accum(grads: &mut [Option<Vec<S>>], id: usize, contrib: impl Iterator<Item = S>, len: usize) {
        let slot = grads[id].get_or_insert_with(|| vec![S::zero(); len]);
        for (dst, c) in slot.iter_mut().zip(contrib) {
            *dst = *dst + c;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    // dA = dC . B^T
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gy[i * n + j];
                            if g == S::zero() {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] = da[i * k + p] + g * tb.data()[p * n + j];
                            }
                        }
                    }
                    Self::accum(grads, *a, da.into_iter(), m * k);
                }
                if self.needs(*b) {
                    // dB = A^T . dC
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == S::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + aip * gy[i * n + j];
                            }
                        }
                    }
                    Self::accum(grads, *b, db.into_iter(), k * n);
                }
            }

            Op::Transpose(x) => {
                if self.needs(*x) {
                    let t = &self.nodes[*x].value;
                    let (m, n) = (t.rows(), t.cols());
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gy[j * m + i];
                        }
                    }
                    Self::accum(grads, *x, dx.into_iter(), m * n);
                }
            }

            Op::Add(a, b) => {
                for &p in &[*a, *b] {
                    if self.needs(p) {
                        Self::accum(grads, p, gy.iter().cloned(), gy.len());
                    }
                }
            }

            Op::AddRowBias(x, bias) => {
                if self.needs(*x) {
                    Self::accum(grads, *x, gy.iter().cloned(), gy.len());
                }
                if self.needs(*bias) {
                    let c = self.nodes[*bias].value.numel();
                    let r = gy.len() / c;
                    let mut db = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] = db[j] + gy[i * c + j];
                        }
                    }
                    Self::accum(grads, *bias, db.into_iter(), c);
                }
            }

            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.needs(*a) {
                    let contrib = gy.iter().zip(tb.data()).map(|(&g, &v)| g * v);
                    Self::accum(grads, *a, contrib, gy.len());
                }
                if self.needs(*b) {
                    let contrib = gy.iter().zip(ta.data()).map(|(&g, &v)| g * v);
                    Self::accum(grads, *b, contrib, gy.len());
                }
            }

            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let c = *c;
                    Self::accum(grads, *x, gy.iter().map(|&g| g * c), gy.len());
                }
            }

            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = &self.nodes[id].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![S::zero(); r * c];
                    for i in 0..r {
                        let yrow = &y.data()[i * c..(i + 1) * c];
                        let grow = &gy[i * c..(i + 1) * c];
                        let dot: S = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..c {
                            dx[i * c + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    Self::accum(grads, *x, dx.into_iter(), r * c);
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let d = tg.numel();
                let rows = tx.numel() / d;
                let inv_d = S::one() / S::from_usize(d);

                let mut dx = vec![S::zero(); tx.numel()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];

                for i in 0..rows {
                    let row = &tx.data()[i * d..(i + 1) * d];
                    let grow = &gy[i * d..(i + 1) * d];
                    let mean = row.iter().cloned().sum::<S>() * inv_d;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<S>()
                        * inv_d;
                    let inv_std = S::one() / (var + *eps).sqrt();

                    let mut sum_g = S::zero();
                    let mut sum_gx = S::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let g = tg.data()[j] * grow[j];
                        sum_g = sum_g + g;
                        sum_gx = sum_gx + g * xhat;
                        dgamma[j] = dgamma[j] + grow[j] * xhat;
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let g = tg.data()[j] * grow[j];
                        dx[i * d + j] = (g - sum_g * inv_d - xhat * sum_gx * inv_d) * inv_std;
                    }
                }
                if self.needs(*x) {
                    Self::accum(grads, *x, dx.into_iter(), tx.numel());
                }
                if self.needs(*gamma) {
                    Self::accum(grads, *gamma, dgamma.into_iter(), d);
                }
                if self.needs(*beta) {
                    Self::accum(grads, *beta, dbeta.into_iter(), d);
                }
            }

            Op::Gelu(x) => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let contrib = tx
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| g * gelu_bwd(v));
                    Self::accum(grads, *x, contrib, gy.len());
                }
            }

            Op::MeanRowsMasked { x, mask, count } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let (r, c) = (tx.rows(), tx.cols());
                    let inv = S::one() / S::from_usize(*count);
                    let mut dx = vec![S::zero(); r * c];
                    for i in 0..r {
                        if mask[i] {
                            for j in 0..c {
                                dx[i * c + j] = gy[j] * inv;
                            }
                        }
                    }
                    Self::accum(grads, *x, dx.into_iter(), r * c);
                }
            }

            Op::Row { x, index } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut dx = vec![S::zero(); r * c];
                    dx[index * c..(index + 1) * c].copy_from_slice(gy);
                    Self::accum(grads, *x, dx.into_iter(), r * c);
                }
            }

            Op::ConcatCols(parts) => {
                let total = self.nodes[id].value.cols();
                let r = self.nodes[id].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dp.extend_from_slice(&gy[i * total + offset..i * total + offset + c]);
                        }
                        Self::accum(grads, p, dp.into_iter(), r * c);
                    }
                    offset += c;
                }
            }

            Op::ConcatRows(parts) => {
                let c = self.nodes[id].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p].value.rows();
                    if self.needs(p) {
                        let dp = gy[offset * c..(offset + r) * c].to_vec();
                        Self::accum(grads, p, dp.into_iter(), r * c);
                    }
                    offset += r;
                }
            }

            Op::SumAll(x) => {
                if self.needs(*x) {
                    let n = self.nodes[*x].value.numel();
                    let g = gy[0];
                    Self::accum(grads, *x, std::iter::repeat_n(g, n), n);
                }
            }

            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = self.nodes[*x].value.numel();
                    let g = gy[0] / S::from_usize(n);
                    Self::accum(grads, *x, std::iter::repeat_n(g, n), n);
                }
            }

            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let tl = &self.nodes[*logits].value;
                    let (b, c) = (tl.rows(), tl.cols());
                    let gb = gy[0] / S::from_usize(b);
                    let mut dl = vec![S::zero(); b * c];
                    for i in 0..b {
                        let row = &tl.data()[i * c..(i + 1) * c];
                        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                        let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / sum;
                            let indicator = if labels[i] == j { S::one() } else { S::zero() };
                            dl[i * c + j] = (p - indicator) * gb;
                        }
                    }
                    Self::accum(grads, *logits, dl.into_iter(), b * c);
                }
            }

            Op::Dropout { x, keep, scale } => {
                if self.needs(*x) {
                    let contrib = gy
                        .iter()
                        .zip(keep)
                        .map(|(&g, &k)| if k { g * *scale } else { S::zero() });
                    Self::accum(grads, *x, contrib, gy.len());
                }
            }

            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let tt = &self.nodes[*table].value;
                    let (v, d) = (tt.rows(), tt.cols());
                    let mut dt = vec![S::zero(); v * d];
                    for (l, &tok) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[tok * d + j] = dt[tok * d + j] + gy[l * d + j];
                        }
                    }
                    Self::accum(grads, *table, dt.into_iter(), v * d);
                }
            }
        }
        Ok(())
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a node, shaped like its value.
    pub fn wrt(&self, graph: &Graph<S>, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::from_vec(graph.value(v).shape().to_vec(), g.clone())
                .expect("gradient shaped like its value")
        })
    }

    /// Move parameter gradients into the store; errors if a parameter
    /// still carries a gradient from an earlier backward pass.
    pub fn apply_to_store(&self, graph: &Graph<S>, store: &mut ParamStore<S>) -> Result<()> {
        for (node, name) in &graph.param_nodes {
            if let Some(g) = &self.grads[*node] {
                store.accumulate_grad(name, g.clone())?;
            }
        }
        Ok(())
    }
}
