//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations execute eagerly and record themselves on the tape in execution
//! order; `backward` replays the records in reverse exactly once, accumulating
//! gradients into every node whose subtree contains a differentiable leaf.
//! Everything is `f64` and single-threaded per tape, so two identical forward
//! passes produce bit-identical gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon floor applied to `q` before `log` in KL divergence.
pub const KL_EPS: f64 = 1e-12;
/// Variance stabilizer for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out[m×n] = a[m×k] · b[k×n]
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// out[m×n] = a[m×k] · b[n×k]ᵀ
    MatmulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// Per batch slice: out = a · b
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    /// Per batch slice: out = a · bᵀ, b slices are [n×k]
    BmmNt { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    /// x[r×c] + bias[c] broadcast over rows
    AddBias { x: Var, bias: Var, rows: usize, cols: usize },
    Scale { x: Var, factor: f64 },
    /// Row-stochastic softmax over the last axis; masked entries are exactly 0.
    SoftmaxRows { x: Var, cols: usize },
    /// Mean over counted rows of Σᵢ pᵢ(ln pᵢ − ln max(qᵢ, KL_EPS)).
    KlDivRows { p: Var, q: Var, row_mask: Option<Vec<bool>>, cols: usize, counted: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize },
    Gelu { x: Var },
    /// Mean over rows of log-sum-exp stabilized cross-entropy.
    CrossEntropy { logits: Var, labels: Vec<usize>, cols: usize },
    EmbeddingLookup { table: Var, ids: Vec<usize>, dim: usize },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<Var>, part_rows: Vec<usize>, cols: usize },
    SliceRows { x: Var, row_start: usize, x_rows: usize, cols: usize },
    /// [B·L, H·dh] → [B·H, L, dh]
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize },
    /// [B·H, L, dh] → [B·L, H·dh]
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize },
    /// Inverted dropout; `keep_scale` holds 0.0 or 1/(1−rate) per element.
    Dropout { x: Var, keep_scale: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
    /// Op-specific saved context (cross-entropy keeps its probabilities).
    saved: Vec<f64>,
}

/// Ordered record of executed operations with their backward rules.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// out += a · b, all row-major.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out += a · bᵀ with b stored [n×k].
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

// out += aᵀ · b with a stored [k×m], result [m×n].
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
            saved: Vec::new(),
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.node(v).data.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.node(v).shape.clone(), self.node(v).data.clone())
            .expect("tape node shapes are always consistent")
    }

    /// Gradient accumulated on `v` by the last `backward`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    /// Leaf that respects the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient, regardless of the tensor's flag.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.frozen(&t))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![x], vec![1], false, Op::Leaf)
    }

    // ── Operations ───────────────────────────────────────────────────────

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = &self.node(v).shape;
        if shape.is_empty() {
            return Err(Error::ShapeMismatch { op, lhs: shape.clone(), rhs: vec![] });
        }
        let cols = *shape.last().unwrap();
        Ok((self.node(v).data.len() / cols, cols))
    }

    fn require_2d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = &self.node(v).shape;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch { op, lhs: shape.clone(), rhs: vec![] });
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d(a, "matmul")?;
        let (k2, n) = self.require_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.node(a).data, &self.node(b).data, &mut out, m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b, m, k, n }))
    }

    /// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d(a, "matmul_nt")?;
        let (n, k2) = self.require_2d(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&self.node(a).data, &self.node(b).data, &mut out, m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::MatmulNt { a, b, m, k, n }))
    }

    fn bmm_dims(&self, a: Var, b: Var, nt: bool, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let sa = &self.node(a).shape;
        let sb = &self.node(b).shape;
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if nt { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() });
        }
        Ok((batch, m, k, n))
    }

    /// Batched matmul over the leading axis.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, false, "bmm")?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            matmul_acc(
                &self.node(a).data[i * m * k..(i + 1) * m * k],
                &self.node(b).data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m, k, n,
            );
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, vec![batch, m, n], rg, Op::Bmm { a, b, batch, m, k, n }))
    }

    /// Batched `a · bᵀ`; `b` slices are `[n×k]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, true, "bmm_nt")?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            matmul_nt_acc(
                &self.node(a).data[i * m * k..(i + 1) * m * k],
                &self.node(b).data[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m, k, n,
            );
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, vec![batch, m, n], rg, Op::BmmNt { a, b, batch, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.require_2d(x, "transpose")?;
        let xd = &self.node(x).data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xd[i * cols + j];
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, vec![cols, rows], rg, Op::Transpose { x, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "add_bias")?;
        if self.node(bias).data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(bias).shape.clone(),
            });
        }
        let mut out = self.node(x).data.clone();
        let bd = &self.node(bias).data;
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(out, shape, rg, Op::AddBias { x, bias, rows, cols }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.node(x).data.iter().map(|v| v * factor).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(out, shape, rg, Op::Scale { x, factor })
    }

    /// Row softmax over the last axis. `mask`, when present, has one entry per
    /// element; masked entries come out exactly 0 and unmasked entries of each
    /// row sum to 1. The row maximum for stabilization is taken over unmasked
    /// entries only, so masked logits never influence the result.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: self.node(x).shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let xd = &self.node(x).data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let keep = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if keep(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { op: "softmax_rows", row: r });
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[r * cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        debug_assert!(out.iter().all(|v| v.is_finite()));
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, shape, rg, Op::SoftmaxRows { x, cols }))
    }

    /// Mean over rows of Σᵢ pᵢ(ln pᵢ − ln qᵢ), with the 0·ln 0 = 0 convention
    /// and the KL_EPS floor on q. `row_mask`, when present, selects which rows
    /// enter the mean; rows where it is false contribute nothing.
    pub fn kl_divergence_rows(&mut self, p: Var, q: Var, row_mask: Option<&[bool]>) -> Result<Var> {
        if self.node(p).shape != self.node(q).shape {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence_rows",
                lhs: self.node(p).shape.clone(),
                rhs: self.node(q).shape.clone(),
            });
        }
        let (rows, cols) = self.rows_cols(p, "kl_divergence_rows")?;
        if let Some(m) = row_mask {
            if m.len() != rows {
                return Err(Error::ShapeMismatch {
                    op: "kl_divergence_rows",
                    lhs: vec![rows],
                    rhs: vec![m.len()],
                });
            }
        }
        let counted = row_mask.map_or(rows, |m| m.iter().filter(|&&b| b).count());
        if counted == 0 {
            return Err(Error::contract("kl_divergence_rows: no rows selected"));
        }
        let pd = &self.node(p).data;
        let qd = &self.node(q).data;
        let mut total = 0.0;
        for r in 0..rows {
            if row_mask.is_some_and(|m| !m[r]) {
                continue;
            }
            for j in r * cols..(r + 1) * cols {
                let pv = pd[j];
                if pv > 0.0 {
                    total += pv * (pv.ln() - qd[j].max(KL_EPS).ln());
                }
            }
        }
        let value = total / counted as f64;
        debug_assert!(value.is_finite());
        let rg = self.node(p).requires_grad || self.node(q).requires_grad;
        Ok(self.push(
            vec![value],
            vec![1],
            rg,
            Op::KlDivRows { p, q, row_mask: row_mask.map(<[bool]>::to_vec), cols, counted },
        ))
    }

    /// Per-row standardization over the last axis, then affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "layer_norm")?;
        if cols < 2 {
            return Err(Error::contract("layer_norm: last axis must be >= 2"));
        }
        if self.node(gain).data.len() != cols || self.node(bias).data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(gain).shape.clone(),
            });
        }
        let xd = &self.node(x).data;
        let gd = &self.node(gain).data;
        let bd = &self.node(bias).data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        debug_assert!(out.iter().all(|v| v.is_finite()));
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad
            || self.node(gain).requires_grad
            || self.node(bias).requires_grad;
        Ok(self.push(out, shape, rg, Op::LayerNorm { x, gain, bias, cols }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .map(|&v| {
                let inner = SQRT_2_OVER_PI * (v + GELU_COEFF * v * v * v);
                0.5 * v * (1.0 + inner.tanh())
            })
            .collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(out, shape, rg, Op::Gelu { x })
    }

    /// Mean cross-entropy over rows, log-sum-exp stabilized.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits, "cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::IndexOutOfRange { op: "cross_entropy", index: bad, len: cols });
        }
        let xd = &self.node(logits).data;
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                probs[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                probs[r * cols + j] /= sum;
            }
            total += max + sum.ln() - row[labels[r]];
        }
        let value = total / rows as f64;
        debug_assert!(value.is_finite());
        let rg = self.node(logits).requires_grad;
        let v = self.push(
            vec![value],
            vec![1],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), cols },
        );
        self.nodes[v.0].saved = probs;
        Ok(v)
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.require_2d(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::IndexOutOfRange { op: "embedding_lookup", index: bad, len: vocab });
        }
        let td = &self.node(table).data;
        let mut out = vec![0.0; ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            out[r * dim..(r + 1) * dim].copy_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let rg = self.node(table).requires_grad;
        Ok(self.push(out, vec![ids.len(), dim], rg, Op::EmbeddingLookup { table, ids: ids.to_vec(), dim }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange { op: "gather_rows", index: bad, len: rows });
        }
        let xd = &self.node(x).data;
        let mut out = vec![0.0; idx.len() * cols];
        for (r, &i) in idx.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, vec![idx.len(), cols], rg, Op::GatherRows { x, idx: idx.to_vec(), cols }))
    }

    /// Concatenate along the row axis; all parts must share trailing width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty part list"));
        }
        let (_, cols) = self.rows_cols(parts[0], "concat_rows")?;
        let mut out = Vec::new();
        let mut part_rows = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            out.extend_from_slice(&self.node(p).data);
            part_rows.push(r);
            rg |= self.node(p).requires_grad;
        }
        let rows: usize = part_rows.iter().sum();
        Ok(self.push(out, vec![rows, cols], rg, Op::ConcatRows { parts: parts.to_vec(), part_rows, cols }))
    }

    /// Split along the row axis into parts of the given row counts.
    pub fn split_rows(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let (rows, cols) = self.rows_cols(x, "split_rows")?;
        if sizes.iter().sum::<usize>() != rows {
            return Err(Error::ShapeMismatch {
                op: "split_rows",
                lhs: vec![rows],
                rhs: sizes.to_vec(),
            });
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let data = self.node(x).data[start * cols..(start + s) * cols].to_vec();
            let rg = self.node(x).requires_grad;
            out.push(self.push(data, vec![s, cols], rg, Op::SliceRows { x, row_start: start, x_rows: rows, cols }));
            start += s;
        }
        Ok(out)
    }

    /// Reinterpret `[B·L, H·dh]` as `[B, L, H, dh]` and permute to `[B·H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize) -> Result<Var> {
        if self.node(x).data.len() != batch * seq * heads * head_dim {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                lhs: self.node(x).shape.clone(),
                rhs: vec![batch * seq, heads * head_dim],
            });
        }
        let xd = &self.node(x).data;
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for l in 0..seq {
                for h in 0..heads {
                    let src = ((b * seq + l) * heads + h) * head_dim;
                    let dst = ((b * heads + h) * seq + l) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xd[src..src + head_dim]);
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, vec![batch * heads, seq, head_dim], rg, Op::SplitHeads { x, batch, seq, heads, head_dim }))
    }

    /// Inverse of `split_heads`: `[B·H, L, dh]` back to `[B·L, H·dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize) -> Result<Var> {
        if self.node(x).data.len() != batch * seq * heads * head_dim {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                lhs: self.node(x).shape.clone(),
                rhs: vec![batch * heads, seq, head_dim],
            });
        }
        let xd = &self.node(x).data;
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..seq {
                    let src = ((b * heads + h) * seq + l) * head_dim;
                    let dst = ((b * seq + l) * heads + h) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xd[src..src + head_dim]);
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, vec![batch * seq, heads * head_dim], rg, Op::MergeHeads { x, batch, seq, heads, head_dim }))
    }

    /// Inverted dropout with the given keep mask already drawn: `keep_scale`
    /// entries are 0.0 (dropped) or 1/(1−rate).
    pub fn dropout(&mut self, x: Var, keep_scale: Vec<f64>) -> Result<Var> {
        if keep_scale.len() != self.node(x).data.len() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                lhs: self.node(x).shape.clone(),
                rhs: vec![keep_scale.len()],
            });
        }
        let out: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .zip(&keep_scale)
            .map(|(v, s)| v * s)
            .collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, shape, rg, Op::Dropout { x, keep_scale }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![total], vec![1], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x).data.len();
        let total = self.node(x).data.iter().sum::<f64>() / n as f64;
        let rg = self.node(x).requires_grad;
        self.push(vec![total], vec![1], rg, Op::Mean { x })
    }

    // ── Backward ─────────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Replay the tape in reverse execution order exactly once, populating
    /// gradients on every recorded node that requires them. `loss` must be a
    /// scalar produced through this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.backward_op(Var(i), &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: Var, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                // dA = g · Bᵀ ; dB = Aᵀ · g
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g, &self.nodes[b.0].data, &mut da, *m, *n, *k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(&self.nodes[a.0].data, g, &mut db, *k, *m, *n);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatmulNt { a, b, m, k, n } => {
                // out = A · Bᵀ with B:[n×k]. dA = g · B ; dB = gᵀ · A
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(g, &self.nodes[b.0].data, &mut da, *m, *n, *k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(g, &self.nodes[a.0].data, &mut db, *n, *m, *k);
                    self.accumulate(*b, &db);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        matmul_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.nodes[b.0].data[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m, n, k,
                        );
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..*batch {
                        matmul_tn_acc(
                            &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k, m, n,
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::BmmNt { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        matmul_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.nodes[b.0].data[i * n * k..(i + 1) * n * k],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m, n, k,
                        );
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; batch * n * k];
                    for i in 0..*batch {
                        matmul_tn_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                            &mut db[i * n * k..(i + 1) * n * k],
                            n, m, k,
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * cols];
                    for j in 0..*cols {
                        for i in 0..*rows {
                            dx[i * cols + j] = g[j * rows + i];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddBias { x, bias, rows, cols } => {
                self.accumulate(*x, g);
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![0.0; *cols];
                    for r in 0..*rows {
                        for (d, &gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += gv;
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Scale { x, factor } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::SoftmaxRows { x, cols } => {
                if self.nodes[x.0].requires_grad {
                    let y = &self.nodes[out.0].data;
                    let rows = y.len() / cols;
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            dx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::KlDivRows { p, q, row_mask, cols, counted } => {
                let gs = g[0] / *counted as f64;
                let rows = self.nodes[p.0].data.len() / cols;
                if self.nodes[q.0].requires_grad {
                    let mut dq = vec![0.0; self.nodes[q.0].data.len()];
                    for r in 0..rows {
                        if row_mask.as_ref().is_some_and(|m| !m[r]) {
                            continue;
                        }
                        for j in r * cols..(r + 1) * cols {
                            let pv = self.nodes[p.0].data[j];
                            let qv = self.nodes[q.0].data[j];
                            if pv > 0.0 && qv >= KL_EPS {
                                dq[j] = -gs * pv / qv;
                            }
                        }
                    }
                    self.accumulate(*q, &dq);
                }
                if self.nodes[p.0].requires_grad {
                    let mut dp = vec![0.0; self.nodes[p.0].data.len()];
                    for r in 0..rows {
                        if row_mask.as_ref().is_some_and(|m| !m[r]) {
                            continue;
                        }
                        for j in r * cols..(r + 1) * cols {
                            let pv = self.nodes[p.0].data[j];
                            let qv = self.nodes[q.0].data[j].max(KL_EPS);
                            if pv > 0.0 {
                                dp[j] = gs * (pv.ln() - qv.ln() + 1.0);
                            }
                        }
                    }
                    self.accumulate(*p, &dp);
                }
            }
            Op::LayerNorm { x, gain, bias, cols } => {
                let xd = &self.nodes[x.0].data;
                let rows = xd.len() / cols;
                let gd = &self.nodes[gain.0].data;
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; *cols];
                let mut dbias = vec![0.0; *cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / *cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / *cols as f64;
                    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat_j = (x_j − mean)·rstd; dxhat_j = g_j·gain_j
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..*cols {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = gr[j] * gd[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    mean_dxhat /= *cols as f64;
                    mean_dxhat_xhat /= *cols as f64;
                    for j in 0..*cols {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = gr[j] * gd[j];
                        dx[r * cols + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::Gelu { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            let inner = SQRT_2_OVER_PI * (v + GELU_COEFF * v * v * v);
                            let t = inner.tanh();
                            let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * v * v);
                            gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
                        })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::CrossEntropy { logits, labels, cols } => {
                if self.nodes[logits.0].requires_grad {
                    let rows = labels.len();
                    let probs = &self.nodes[out.0].saved;
                    let gs = g[0] / rows as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..*cols {
                            let indicator = if j == labels[r] { 1.0 } else { 0.0 };
                            dx[r * cols + j] = gs * (probs[r * cols + j] - indicator);
                        }
                    }
                    self.accumulate(*logits, &dx);
                }
            }
            Op::EmbeddingLookup { table, ids, dim } => {
                if self.nodes[table.0].requires_grad {
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &gv) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *d += gv;
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::GatherRows { x, idx, cols } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &gv) in dx[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += gv;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::ConcatRows { parts, part_rows, cols } => {
                let mut start = 0;
                for (&p, &r) in parts.iter().zip(part_rows) {
                    self.accumulate(p, &g[start * cols..(start + r) * cols]);
                    start += r;
                }
            }
            Op::SliceRows { x, row_start, x_rows, cols } => {
                if self.nodes[x.0].requires_grad {
                    let out_rows = self.nodes[out.0].data.len() / cols;
                    let mut dx = vec![0.0; x_rows * cols];
                    dx[row_start * cols..(row_start + out_rows) * cols].copy_from_slice(g);
                    self.accumulate(*x, &dx);
                }
            }
            Op::SplitHeads { x, batch, seq, heads, head_dim } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..*batch {
                        for l in 0..*seq {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + l) * head_dim;
                                let dst = ((b * seq + l) * heads + h) * head_dim;
                                dx[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::MergeHeads { x, batch, seq, heads, head_dim } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for l in 0..*seq {
                                let src = ((b * seq + l) * heads + h) * head_dim;
                                let dst = ((b * heads + h) * seq + l) * head_dim;
                                dx[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Dropout { x, keep_scale } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<f64> = g.iter().zip(keep_scale).map(|(gv, s)| gv * s).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Sum { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx = vec![g[0]; self.nodes[x.0].data.len()];
                    self.accumulate(*x, &dx);
                }
            }
            Op::Mean { x } => {
                if self.nodes[x.0].requires_grad {
                    let n = self.nodes[x.0].data.len();
                    let dx = vec![g[0] / n as f64; n];
                    self.accumulate(*x, &dx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    // Independent oracle: naive triple loop, no shared code with matmul_acc.
    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(17);
        let a: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let expected = triple_loop(&a, &b, 3, 4, 2);
        let mut tape = Tape::new();
        let av = tape.constant(vec![3, 4], a).unwrap();
        let bv = tape.constant(vec![4, 2], b).unwrap();
        let out = tape.matmul(av, bv).unwrap();
        for (x, y) in tape.value(out).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_analytic() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0_f64.ln(), 3.0_f64.ln()]).unwrap();
        let y = tape.softmax_rows(x, None).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_mask_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let y = tape.softmax_rows(x, Some(&[true, true, false])).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let err = tape.softmax_rows(x, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one_under_mask() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let cols = 2 + rng.below(6);
            let data: Vec<f64> = (0..cols * 3).map(|_| rng.normal() * 20.0).collect();
            let mask: Vec<bool> = (0..cols * 3).map(|_| rng.chance(0.7)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(vec![3, cols], data).unwrap();
            if let Ok(y) = tape.softmax_rows(x, Some(&mask)) {
                for r in 0..3 {
                    let row = &tape.value(y)[r * cols..(r + 1) * cols];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
                    for (j, v) in row.iter().enumerate() {
                        if !mask[r * cols + j] {
                            assert_eq!(*v, 0.0);
                        } else {
                            assert!(*v > 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let q = tape.constant(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let kl = tape.kl_divergence_rows(p, q, None).unwrap();
        assert_eq!(tape.value(kl)[0], 0.0);
    }

    #[test]
    fn kl_analytic_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let q = tape.constant(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let kl = tape.kl_divergence_rows(p, q, None).unwrap();
        assert!((tape.value(kl)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    // Independent oracle: direct double-loop summation of the definition.
    fn kl_direct(p: &[f64], q: &[f64], rows: usize, cols: usize) -> f64 {
        let mut total = 0.0;
        for r in 0..rows {
            for j in 0..cols {
                let pv = p[r * cols + j];
                if pv > 0.0 {
                    total += pv * (pv / q[r * cols + j].max(1e-12)).ln();
                }
            }
        }
        total / rows as f64
    }

    fn random_stochastic_rows(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                let v = rng.uniform() + 1e-3;
                out[r * cols + j] = v;
                sum += v;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        out
    }

    #[test]
    fn kl_matches_direct_summation_oracle() {
        let mut rng = Rng::new(23);
        for _ in 0..20 {
            let p = random_stochastic_rows(&mut rng, 4, 5);
            let q = random_stochastic_rows(&mut rng, 4, 5);
            let expected = kl_direct(&p, &q, 4, 5);
            let mut tape = Tape::new();
            let pv = tape.constant(vec![4, 5], p).unwrap();
            let qv = tape.constant(vec![4, 5], q).unwrap();
            let kl = tape.kl_divergence_rows(pv, qv, None).unwrap();
            assert!((tape.value(kl)[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_iff_equal() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let p = random_stochastic_rows(&mut rng, 3, 4);
            let q = random_stochastic_rows(&mut rng, 3, 4);
            let mut tape = Tape::new();
            let pv = tape.constant(vec![3, 4], p.clone()).unwrap();
            let qv = tape.constant(vec![3, 4], q.clone()).unwrap();
            let kl = tape.kl_divergence_rows(pv, qv, None).unwrap();
            assert!(tape.value(kl)[0] >= 0.0);
            let pv2 = tape.constant(vec![3, 4], p.clone()).unwrap();
            let qv2 = tape.constant(vec![3, 4], p).unwrap();
            let kl2 = tape.kl_divergence_rows(pv2, qv2, None).unwrap();
            assert_eq!(tape.value(kl2)[0], 0.0);
        }
    }

    #[test]
    fn kl_zero_q_is_clamped_not_fatal() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let q = tape.constant(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let kl = tape.kl_divergence_rows(p, q, None).unwrap();
        assert!(tape.value(kl)[0].is_finite());
        assert!(tape.value(kl)[0] > 0.0);
    }

    #[test]
    fn kl_row_mask_excludes_rows() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let q = tape.constant(vec![2, 2], vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let kl = tape.kl_divergence_rows(p, q, Some(&[true, false])).unwrap();
        assert!((tape.value(kl)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![3.0; 4]).unwrap();
        let gain = tape.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for v in tape.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let gain = tape.constant(vec![2], vec![1.0; 2]).unwrap();
        let bias = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-5);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_output_moments() {
        let mut rng = Rng::new(41);
        let cols = 16;
        let data: Vec<f64> = (0..cols).map(|_| rng.normal() * 3.0 + 1.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, cols], data).unwrap();
        let gain = tape.constant(vec![cols], vec![1.0; cols]).unwrap();
        let bias = tape.constant(vec![cols], vec![0.0; cols]).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let out = tape.value(y);
        let mean = out.iter().sum::<f64>() / cols as f64;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn gelu_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.gelu(x);
        assert_eq!(tape.value(y)[0], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn embedding_lookup_reproduces_rows() {
        let mut tape = Tape::new();
        let table = tape.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = tape.embedding_lookup(table, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn embedding_out_of_range_id_errors() {
        let mut tape = Tape::new();
        let table = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let err = tape.embedding_lookup(table, &[3]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tensor(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).with_grad();
        let wv = tape.leaf(&w);
        let loss = tape.sum(wv);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_squared_gives_w() {
        // loss = sum(W ∘ W)/2 via matmul with Wᵀ route: use elementwise
        // identity sum(W∘W)/2 = sum over rows of w·wᵀ/2 — simplest here is
        // scale(sum of squares). Build it from ops: y = W · Wᵀ trace is
        // overkill; instead: loss = mean? Use gelu-free direct: sum(W∘W)/2
        // through matmul of each row with itself is awkward, so test via
        // two leaves: loss = sum(W ∘ W)/2 expressed with Dropout-as-mul is
        // cheating; use Scale + custom: matmul(w_flat[1×n], transpose) gives
        // Σ w².
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let mut tape = Tape::new();
        let w = tensor(vec![1, 4], data.clone()).with_grad();
        let wv = tape.leaf(&w);
        let sq = tape.matmul_nt(wv, wv).unwrap(); // [1×1] = Σ w²
        let half = tape.scale(sq, 0.5);
        let loss = tape.sum(half);
        tape.backward(loss).unwrap();
        let grad = tape.grad(wv).unwrap();
        for (g, w) in grad.iter().zip(&data) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_non_scalar_is_contract_error() {
        let mut tape = Tape::new();
        let w = tensor(vec![2], vec![1.0, 2.0]).with_grad();
        let wv = tape.leaf(&w);
        let err = tape.backward(wv).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut tape = Tape::new();
        let w = tensor(vec![1, 2], vec![1.0, 2.0]).with_grad();
        let frozen = tape.frozen(&w);
        let live = tape.leaf(&w);
        let prod = tape.matmul_nt(live, frozen).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(live).is_some());
    }

    #[test]
    fn tape_replay_is_bit_deterministic() {
        let build = || {
            let mut rng = Rng::new(77);
            let mut tape = Tape::new();
            let a = tensor(vec![4, 4], (0..16).map(|_| rng.normal()).collect()).with_grad();
            let b = tensor(vec![4, 4], (0..16).map(|_| rng.normal()).collect()).with_grad();
            let av = tape.leaf(&a);
            let bv = tape.leaf(&b);
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.softmax_rows(c, None).unwrap();
            let g = tape.gelu(s);
            let loss = tape.mean(g);
            tape.backward(loss).unwrap();
            (
                tape.grad(av).unwrap().to_vec(),
                tape.grad(bv).unwrap().to_vec(),
            )
        };
        let (ga1, gb1) = build();
        let (ga2, gb2) = build();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut rng = Rng::new(3);
        let (b, l, h, dh) = (2, 3, 2, 2);
        let data: Vec<f64> = (0..b * l * h * dh).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![b * l, h * dh], data.clone()).unwrap();
        let split = tape.split_heads(x, b, l, h, dh).unwrap();
        let merged = tape.merge_heads(split, b, l, h, dh).unwrap();
        assert_eq!(tape.value(merged), data.as_slice());
    }

    #[test]
    fn concat_split_rows_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let parts = tape.split_rows(cat, &[1, 2]).unwrap();
        assert_eq!(tape.value(parts[0]), &[1.0, 2.0]);
        assert_eq!(tape.value(parts[1]), &[3.0, 4.0, 5.0, 6.0]);
    }
}
