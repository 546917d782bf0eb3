//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and the references it
//! needs for the backward rule. Node indices grow monotonically, so the
//! recorded graph is acyclic and a single reverse sweep visits each node once.
//!
//! Leaves own their gradient accumulators (the `grad` field of the leaf
//! [`Tensor`]); repeated [`Tape::backward`] calls add into them until
//! [`Tape::zero_grad`] is called.

use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Additive surrogate for minus infinity on masked attention scores.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic precision of op outputs. `F32` rounds every op result to
/// single precision; it exists for speed experiments and is never used by
/// tolerance-critical checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    SoftmaxMasked(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    GatherRows { x: Var, index: Vec<Option<usize>> },
    GatherFlat { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Reshape(Var),
    SwapAxes12 { x: Var, dims: [usize; 4] },
    Pool { x: Var, groups: Vec<Vec<usize>>, kind: PoolKind, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    flops: u64,
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

fn rows_of(t: &Tensor) -> usize {
    t.numel() / last_dim(t)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { precision, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                node.value.zero_grad();
            }
        }
    }

    /// Registers a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let mut tensor = tensor;
        tensor.clear_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GfkError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GfkError::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.flops += (m * k * n) as u64;
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product of rank-3 tensors: `[B×m×k] · [B×k×n]`, or with
    /// `trans_b` `[B×m×k] · [B×n×k]ᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || GfkError::dim("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for s in 0..batch {
                let a_s = &ad[s * m * k..(s + 1) * m * k];
                let b_s = &bd[s * k * n..(s + 1) * k * n];
                let c_s = &mut out[s * m * n..(s + 1) * m * n];
                if trans_b {
                    gemm_nt(a_s, b_s, c_s, m, k, n);
                } else {
                    gemm_nn(a_s, b_s, c_s, m, k, n);
                }
            }
        }
        self.flops += (batch * m * k * n) as u64;
        let op = Op::BatchMatMul { a, b, batch, m, k, n, trans_b };
        self.push("batch_matmul", vec![batch, m, n], out, op, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(GfkError::dim("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(GfkError::dim("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        self.flops += out.len() as u64;
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(GfkError::dim("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        self.flops += out.len() as u64;
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    /// `x + y` where `y` is repeated over the leading elements of `x`
    /// (`x.numel()` must be a multiple of `y.numel()`).
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (nx, ny) = (self.value(x).numel(), self.value(y).numel());
        if nx % ny != 0 {
            return Err(GfkError::dim("add_tiled", format!("{:?} vs {:?}", self.shape(x), self.shape(y))));
        }
        let yd = self.value(y).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v + yd[i % ny]).collect();
        self.flops += nx as u64;
        self.push("add_tiled", self.shape(x).to_vec(), out, Op::AddTiled(x, y), &[x, y])
    }

    /// Adds a bias vector to every row (last axis) of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        if self.shape(bias).len() != 1 || self.shape(bias)[0] != last_dim(self.value(x)) {
            return Err(GfkError::dim("add_row_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        self.add_tiled(x, bias)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * s).collect();
        self.flops += out.len() as u64;
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    /// Softmax over the last axis. `mask[i] == true` excludes entry `i`:
    /// it receives the additive [`MASK_FILL`] before normalisation and ends
    /// with weight zero. A row with every entry masked is an error.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t);
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(GfkError::dim("softmax_masked", format!("mask {} vs {:?}", m.len(), t.shape())));
            }
        }
        let shape = t.shape().to_vec();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            if let Some(m) = mask {
                let mrow = &m[r * n..(r + 1) * n];
                if mrow.iter().all(|&b| b) {
                    return Err(GfkError::DegenerateRow { row: r });
                }
                for (v, &masked) in row.iter_mut().zip(mrow) {
                    if masked {
                        *v += MASK_FILL;
                    }
                }
            }
            softmax_in_place(row);
        }
        self.flops += 3 * out.len() as u64;
        self.push("softmax_masked", shape, out, Op::SoftmaxMasked(x), &[x])
    }

    /// Row-wise `x - logsumexp(x)` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t);
        let shape = t.shape().to_vec();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.flops += 3 * out.len() as u64;
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Per-row standardisation over the last axis followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(GfkError::dim(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", t.shape(), self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = rows_of(t);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.flops += 8 * out.len() as u64;
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.flops += 8 * out.len() as u64;
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Gathers rows of a rank-2 tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(GfkError::dim("gather_rows", format!("{s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if index.is_empty() {
            return Err(GfkError::dim("gather_rows", "empty index"));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; index.len() * d];
        for (o, idx) in index.iter().enumerate() {
            if let Some(r) = *idx {
                if r >= n {
                    return Err(GfkError::Range { what: "gather row", value: r, limit: n });
                }
                out[o * d..(o + 1) * d].copy_from_slice(&xd[r * d..(r + 1) * d]);
            }
        }
        self.push("gather_rows", vec![index.len(), d], out, Op::GatherRows { x, index }, &[x])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather_flat(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(GfkError::dim("gather_flat", format!("{} indices for shape {shape:?}", index.len())));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i >= n {
                return Err(GfkError::Range { what: "gather index", value: i, limit: n });
            }
            out.push(xd[i]);
        }
        self.push("gather_flat", shape, out, Op::GatherFlat { x, index }, &[x])
    }

    /// Stacks rank-2 tensors with a common width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| GfkError::dim("concat_rows", "no inputs"))?;
        let d = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(GfkError::dim("concat_rows", format!("{s:?} with width {d}")));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", vec![rows, d], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `[n×da] ⊕ [n×db] -> [n×(da+db)]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(GfkError::dim("concat_cols", format!("{sa:?} | {sb:?}")));
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        self.push("concat_cols", vec![n, da + db], out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(GfkError::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape, data, Op::Reshape(x), &[x])
    }

    /// `[a×b×c×d] -> [a×c×b×d]`
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(GfkError::dim("swap_axes12", format!("{s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(x).data(), dims);
        self.push("swap_axes12", vec![s[0], s[2], s[1], s[3]], out, Op::SwapAxes12 { x, dims }, &[x])
    }

    /// Pools groups of rows of a rank-2 tensor into one row each. An empty
    /// group pools to the zero row.
    pub fn pool_rows(&mut self, x: Var, groups: Vec<Vec<usize>>, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || groups.is_empty() {
            return Err(GfkError::dim("pool_rows", format!("{s:?} with {} groups", groups.len())));
        }
        let (n, d) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; groups.len() * d];
        let mut argmax = vec![usize::MAX; groups.len() * d];
        for (g, rows) in groups.iter().enumerate() {
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(GfkError::Range { what: "pool row", value: bad, limit: n });
            }
            if rows.is_empty() {
                continue;
            }
            let o = &mut out[g * d..(g + 1) * d];
            match kind {
                PoolKind::Max => {
                    for j in 0..d {
                        let mut best = rows[0];
                        for &r in &rows[1..] {
                            if xd[r * d + j] > xd[best * d + j] {
                                best = r;
                            }
                        }
                        o[j] = xd[best * d + j];
                        argmax[g * d + j] = best;
                    }
                }
                PoolKind::Mean => {
                    for &r in rows {
                        for j in 0..d {
                            o[j] += xd[r * d + j];
                        }
                    }
                    let inv = 1.0 / rows.len() as f64;
                    o.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        let shape = vec![groups.len(), d];
        self.push("pool_rows", shape, out, Op::Pool { x, groups, kind, argmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let total = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", vec![1], vec![total], Op::Mean(x), &[x])
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Accumulates `∂root/∂leaf` into every differentiable leaf's gradient.
    /// Leaves that `root` does not depend on receive a zero gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(GfkError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let acc = self.nodes[i].value.grad_mut();
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for node in &mut self.nodes {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                node.value.grad_mut();
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Runs `f` on input `v`'s gradient buffer, if `v` is differentiable.
        fn with<F: FnOnce(&mut [f64])>(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: F) {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with(grads, nodes, *a, |da| gemm_nt(g, val(*b), da, m, n, k));
                with(grads, nodes, *b, |db| gemm_tn(val(*a), g, db, k, m, n));
            }
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (ad, bd) = (val(*a), val(*b));
                with(grads, nodes, *a, |da| {
                    for s in 0..batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let b_s = &bd[s * k * n..(s + 1) * k * n];
                        let da_s = &mut da[s * m * k..(s + 1) * m * k];
                        if *trans_b {
                            gemm_nn(g_s, b_s, da_s, m, n, k);
                        } else {
                            gemm_nt(g_s, b_s, da_s, m, n, k);
                        }
                    }
                });
                with(grads, nodes, *b, |db| {
                    for s in 0..batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &ad[s * m * k..(s + 1) * m * k];
                        let db_s = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            gemm_tn(g_s, a_s, db_s, n, m, k);
                        } else {
                            gemm_tn(a_s, g_s, db_s, k, m, n);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                with(grads, nodes, *x, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with(grads, nodes, *a, |da| add_into(da, g));
                with(grads, nodes, *b, |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                with(grads, nodes, *a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                });
                with(grads, nodes, *b, |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddTiled(x, y) => {
                with(grads, nodes, *x, |dx| add_into(dx, g));
                with(grads, nodes, *y, |dy| {
                    let ny = dy.len();
                    for (i, gv) in g.iter().enumerate() {
                        dy[i % ny] += gv;
                    }
                });
            }
            Op::Scale(x, s) => {
                with(grads, nodes, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                });
            }
            Op::SoftmaxMasked(x) => {
                let y = node.value.data();
                let n = last_dim(&node.value);
                with(grads, nodes, *x, |dx| {
                    for ((dr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = last_dim(&node.value);
                with(grads, nodes, *x, |dx| {
                    for ((dr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = last_dim(&node.value);
                let gam = val(*gamma);
                with(grads, nodes, *gamma, |dg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with(grads, nodes, *beta, |db| {
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                });
                with(grads, nodes, *x, |dx| {
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                with(grads, nodes, *x, |dx| {
                    for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu_grad(xv);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = last_dim(&node.value);
                with(grads, nodes, *x, |dx| {
                    for (o, idx) in index.iter().enumerate() {
                        if let Some(r) = *idx {
                            add_into(&mut dx[r * d..(r + 1) * d], &g[o * d..(o + 1) * d]);
                        }
                    }
                });
            }
            Op::GatherFlat { x, index } => {
                with(grads, nodes, *x, |dx| {
                    for (o, &i) in index.iter().enumerate() {
                        dx[i] += g[o];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    with(grads, nodes, *p, |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (da_w, db_w) = (last_dim(&nodes[a.0].value), last_dim(&nodes[b.0].value));
                let w = da_w + db_w;
                with(grads, nodes, *a, |da| {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        add_into(&mut da[r * da_w..(r + 1) * da_w], &gr[..da_w]);
                    }
                });
                with(grads, nodes, *b, |db| {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        add_into(&mut db[r * db_w..(r + 1) * db_w], &gr[da_w..]);
                    }
                });
            }
            Op::Reshape(x) => with(grads, nodes, *x, |dx| add_into(dx, g)),
            Op::SwapAxes12 { x, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                with(grads, nodes, *x, |dx| add_into(dx, &back));
            }
            Op::Pool { x, groups, kind, argmax } => {
                let d = last_dim(&node.value);
                with(grads, nodes, *x, |dx| {
                    for (gi, rows) in groups.iter().enumerate() {
                        if rows.is_empty() {
                            continue;
                        }
                        let gr = &g[gi * d..(gi + 1) * d];
                        match kind {
                            PoolKind::Max => {
                                for j in 0..d {
                                    dx[argmax[gi * d + j] * d + j] += gr[j];
                                }
                            }
                            PoolKind::Mean => {
                                let inv = 1.0 / rows.len() as f64;
                                for &r in rows {
                                    for j in 0..d {
                                        dx[r * d + j] += gr[j] * inv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => with(grads, nodes, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                with(grads, nodes, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn swap12(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
