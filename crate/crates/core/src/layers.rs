//! Embeddings, graph-aggregation attention with relation bias, asymmetric
//! (messenger-augmented) attention and the transformer block.
//!
//! Weight containers are generic over their storage: `T = Tensor` for owned
//! parameters and `T = Var` once the parameters have been bound to a tape.
//! All layer functions work on row-stacked batches: a batch of `B`
//! sequences of length `P` is a `[B·P × d]` tensor.
//!
//! Per-head projections are stored fused: the columns
//! `j·d_head..(j+1)·d_head` of a `[d × d]` projection are head `j`'s matrix.

use crate::error::{GfkError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: Option<T>,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear { weight: f(&self.weight), bias: self.bias.as_ref().map(&mut *f) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add_row_bias(y, b),
            None => Ok(y),
        }
    }
}

/// Multi-head attention projections. `output` is absent for the graph
/// aggregator, whose result is the plain concatenation of heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights<T> {
    pub heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Option<Linear<T>>,
}

impl<T> MhaWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MhaWeights<U> {
        MhaWeights {
            heads: self.heads,
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.as_ref().map(|o| o.map(f)),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        if let Some(o) = &self.output {
            o.visit(&format!("{prefix}.output"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.query.visit_mut(&format!("{prefix}.query"), f);
        self.key.visit_mut(&format!("{prefix}.key"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        if let Some(o) = &mut self.output {
            o.visit_mut(&format!("{prefix}.output"), f);
        }
    }
}

/// Node-pair roles inside one graph input; node 0 is the center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationClass {
    CenterCenter = 0,
    CenterNeighbour = 1,
    NeighbourNeighbour = 2,
}

impl RelationClass {
    pub fn of(i: usize, j: usize) -> Self {
        match (i == 0, j == 0) {
            (true, true) => RelationClass::CenterCenter,
            (false, false) => RelationClass::NeighbourNeighbour,
            _ => RelationClass::CenterNeighbour,
        }
    }
}

/// Learnable attention bias: one scalar per head per [`RelationClass`],
/// stored as a `[heads × 3]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationBias<T> {
    pub values: T,
}

impl RelationBias<Tensor> {
    /// The `[m × m]` bias matrix applied to head `head`'s attention scores.
    pub fn matrix(&self, m: usize, head: usize) -> Result<Tensor> {
        if m < 1 {
            return Err(GfkError::Range { what: "node count", value: m, limit: 1 });
        }
        let heads = self.values.shape()[0];
        if head >= heads {
            return Err(GfkError::Range { what: "head", value: head, limit: heads });
        }
        let row = self.values.row(head);
        let data = (0..m * m).map(|e| row[RelationClass::of(e / m, e % m) as usize]).collect();
        Tensor::new(vec![m, m], data)
    }
}

impl RelationBias<Var> {
    /// `[heads × q × m]` bias for the first `q` query nodes against `m` keys.
    pub fn on_tape(&self, tape: &mut Tape, queries: usize, m: usize) -> Result<Var> {
        let heads = tape.shape(self.values)[0];
        let mut index = Vec::with_capacity(heads * queries * m);
        for h in 0..heads {
            for i in 0..queries {
                for j in 0..m {
                    index.push(h * 3 + RelationClass::of(i, j) as usize);
                }
            }
        }
        tape.gather_flat(self.values, index, vec![heads, queries, m])
    }
}

/// One graph-aggregation component: projections plus optional relation bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnWeights<T> {
    pub mha: MhaWeights<T>,
    pub bias: Option<RelationBias<T>>,
}

impl<T> GnnWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GnnWeights<U> {
        GnnWeights {
            mha: self.mha.map(f),
            bias: self.bias.as_ref().map(|b| RelationBias { values: f(&b.values) }),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.mha.visit(prefix, f);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.relation_bias"), &b.values);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.mha.visit_mut(prefix, f);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.relation_bias"), &mut b.values);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerWeights<T> {
    pub attention: MhaWeights<T>,
    pub attention_norm: LayerNormWeights<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNormWeights<T>,
}

impl<T> TransformerLayerWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TransformerLayerWeights<U> {
        TransformerLayerWeights {
            attention: self.attention.map(f),
            attention_norm: LayerNormWeights { gamma: f(&self.attention_norm.gamma), beta: f(&self.attention_norm.beta) },
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
            ffn_norm: LayerNormWeights { gamma: f(&self.ffn_norm.gamma), beta: f(&self.ffn_norm.beta) },
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.attention.visit(&format!("{prefix}.attention"), f);
        f(&format!("{prefix}.attention_norm.gamma"), &self.attention_norm.gamma);
        f(&format!("{prefix}.attention_norm.beta"), &self.attention_norm.beta);
        self.ffn_in.visit(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit(&format!("{prefix}.ffn_out"), f);
        f(&format!("{prefix}.ffn_norm.gamma"), &self.ffn_norm.gamma);
        f(&format!("{prefix}.ffn_norm.beta"), &self.ffn_norm.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.attention.visit_mut(&format!("{prefix}.attention"), f);
        f(&format!("{prefix}.attention_norm.gamma"), &mut self.attention_norm.gamma);
        f(&format!("{prefix}.attention_norm.beta"), &mut self.attention_norm.beta);
        self.ffn_in.visit_mut(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{prefix}.ffn_out"), f);
        f(&format!("{prefix}.ffn_norm.gamma"), &mut self.ffn_norm.gamma);
        f(&format!("{prefix}.ffn_norm.beta"), &mut self.ffn_norm.beta);
    }
}

/// Word embeddings `[V × d]` and absolute position embeddings `[P_max × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub word: T,
    pub position: T,
}

impl<T> EmbeddingTable<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EmbeddingTable<U> {
        EmbeddingTable { word: f(&self.word), position: f(&self.position) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&format!("{prefix}.word"), &self.word);
        f(&format!("{prefix}.position"), &self.position);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.word"), &mut self.word);
        f(&format!("{prefix}.position"), &mut self.position);
    }
}

/// Looks up `word[id] + position[p]` for a batch of sequences, each padded
/// to `seq_len`. `ids` holds `batch · seq_len` entries.
pub fn token_embed(tape: &mut Tape, table: &EmbeddingTable<Var>, ids: &[u32], seq_len: usize) -> Result<Var> {
    let (vocab, max_pos) = (tape.shape(table.word)[0], tape.shape(table.position)[0]);
    if seq_len > max_pos {
        return Err(GfkError::Range { what: "sequence length", value: seq_len, limit: max_pos });
    }
    if seq_len == 0 || ids.len() % seq_len != 0 {
        return Err(GfkError::dim("token_embed", format!("{} ids for sequence length {seq_len}", ids.len())));
    }
    let mut index = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= vocab {
            return Err(GfkError::Range { what: "token id", value: id as usize, limit: vocab });
        }
        index.push(Some(id as usize));
    }
    let words = tape.gather_rows(table.word, index)?;
    let positions = tape.gather_rows(table.position, (0..seq_len).map(Some).collect())?;
    tape.add_tiled(words, positions)
}

/// Geometry of a batched attention call: `batch` independent groups with
/// `queries` query rows and `keys` key rows each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
}

/// Scaled dot-product attention over projected inputs.
///
/// `q`: `[batch·queries × d]`, `k`/`v`: `[batch·keys × d]`, `key_mask`:
/// `batch·keys` flags (true = excluded), `bias`: optional
/// `[heads × queries × keys]` added to every group's scores. Scores are
/// scaled by `1/√d_head`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    shape: AttnShape,
    heads: usize,
    key_mask: &[bool],
    bias: Option<Var>,
) -> Result<Var> {
    let AttnShape { batch, queries, keys } = shape;
    let d = tape.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(GfkError::Config(format!("model width {d} not divisible by {heads} heads")));
    }
    if key_mask.len() != batch * keys {
        return Err(GfkError::dim("attention", format!("mask of {} for {batch}x{keys} keys", key_mask.len())));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape, x: Var, rows: usize| -> Result<Var> {
        let x = tape.reshape(x, vec![batch, rows, heads, dh])?;
        let x = tape.swap_axes12(x)?;
        tape.reshape(x, vec![batch * heads, rows, dh])
    };
    let qh = split(tape, q, queries)?;
    let kh = split(tape, k, keys)?;
    let vh = split(tape, v, keys)?;

    let scores = tape.batch_matmul(qh, kh, true)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(b) = bias {
        scores = tape.add_tiled(scores, b)?;
    }
    let mut mask = Vec::with_capacity(batch * heads * queries * keys);
    for b in 0..batch {
        let row = &key_mask[b * keys..(b + 1) * keys];
        for _ in 0..heads * queries {
            mask.extend_from_slice(row);
        }
    }
    let weights = tape.softmax_masked(scores, Some(&mask))?;
    let out = tape.batch_matmul(weights, vh, false)?;
    let out = tape.reshape(out, vec![batch, heads, queries, dh])?;
    let out = tape.swap_axes12(out)?;
    tape.reshape(out, vec![batch * queries, d])
}

/// Graph aggregation over node-level embeddings.
///
/// `z` holds `instances · m` rows: slot 0 of every instance is the center,
/// slots flagged in `node_mask` are padding and never act as keys. With
/// `center_only` only the center rows are computed (`[instances × d]`),
/// otherwise every slot (`[instances·m × d]`). Heads are concatenated with
/// no output projection, residual, normalisation or MLP.
pub fn gnn_mha(
    tape: &mut Tape,
    z: Var,
    w: &GnnWeights<Var>,
    instances: usize,
    m: usize,
    node_mask: &[bool],
    center_only: bool,
) -> Result<Var> {
    if m < 1 || tape.shape(z)[0] != instances * m {
        return Err(GfkError::dim("gnn_mha", format!("{:?} rows for {instances}x{m} nodes", tape.shape(z))));
    }
    let queries = if center_only { 1 } else { m };
    let q_in = if center_only { tape.gather_rows(z, (0..instances).map(|i| Some(i * m)).collect())? } else { z };
    let q = w.mha.query.forward(tape, q_in)?;
    let k = w.mha.key.forward(tape, z)?;
    let v = w.mha.value.forward(tape, z)?;
    let bias = match &w.bias {
        Some(b) => Some(b.on_tape(tape, queries, m)?),
        None => None,
    };
    let shape = AttnShape { batch: instances, queries, keys: m };
    let out = attention(tape, q, k, v, shape, w.mha.heads, node_mask, bias)?;
    match &w.mha.output {
        Some(o) => o.forward(tape, out),
        None => Ok(out),
    }
}

/// Attention whose queries come from `h` (`[batch·p × d]`) while keys and
/// values come from `h_hat` (`[batch·keys × d]`); the output has the row
/// count of `h`.
pub fn asymmetric_mha(
    tape: &mut Tape,
    h: Var,
    h_hat: Var,
    w: &MhaWeights<Var>,
    batch: usize,
    key_mask: &[bool],
) -> Result<Var> {
    let (rows, hat_rows) = (tape.shape(h)[0], tape.shape(h_hat)[0]);
    if batch == 0 || rows % batch != 0 || hat_rows % batch != 0 {
        return Err(GfkError::dim("asymmetric_mha", format!("{rows} query rows, {hat_rows} key rows, batch {batch}")));
    }
    let shape = AttnShape { batch, queries: rows / batch, keys: hat_rows / batch };
    let q = w.query.forward(tape, h)?;
    let k = w.key.forward(tape, h_hat)?;
    let v = w.value.forward(tape, h_hat)?;
    let out = attention(tape, q, k, v, shape, w.heads, key_mask, None)?;
    match &w.output {
        Some(o) => o.forward(tape, out),
        None => Ok(out),
    }
}

/// Builds the graph-augmented sequences `[ẑ_b, H_b[0..p]]` for a batch.
/// Returns the `[batch·(p+1) × d]` tensor and its key mask; the messenger
/// slot is never masked.
pub fn messenger_concat(
    tape: &mut Tape,
    h: Var,
    messenger: Var,
    batch: usize,
    seq_len: usize,
    key_mask: &[bool],
) -> Result<(Var, Vec<bool>)> {
    if tape.shape(messenger)[0] != batch || tape.shape(h)[0] != batch * seq_len {
        return Err(GfkError::dim(
            "messenger_concat",
            format!("messenger {:?}, tokens {:?}, batch {batch}x{seq_len}", tape.shape(messenger), tape.shape(h)),
        ));
    }
    let stacked = tape.concat_rows(&[messenger, h])?;
    let mut index = Vec::with_capacity(batch * (seq_len + 1));
    let mut mask = Vec::with_capacity(batch * (seq_len + 1));
    for b in 0..batch {
        index.push(Some(b));
        mask.push(false);
        for p in 0..seq_len {
            index.push(Some(batch + b * seq_len + p));
            mask.push(key_mask[b * seq_len + p]);
        }
    }
    Ok((tape.gather_rows(stacked, index)?, mask))
}

/// One transformer block. With a messenger the keys/values are
/// `Concat(ẑ, H)`; without one this is a plain post-norm encoder layer.
///
/// `Ĥ' = LN(H + MHA_asy(H, Ĥ))`, `out = LN(Ĥ' + MLP(Ĥ'))`.
pub fn transformer_layer(
    tape: &mut Tape,
    h: Var,
    messenger: Option<Var>,
    w: &TransformerLayerWeights<Var>,
    batch: usize,
    seq_len: usize,
    key_mask: &[bool],
    ln_eps: f64,
) -> Result<Var> {
    let attended = match messenger {
        Some(msg) => {
            let (h_hat, mask) = messenger_concat(tape, h, msg, batch, seq_len, key_mask)?;
            asymmetric_mha(tape, h, h_hat, &w.attention, batch, &mask)?
        }
        None => asymmetric_mha(tape, h, h, &w.attention, batch, key_mask)?,
    };
    let res = tape.add(h, attended)?;
    let mid = tape.layer_norm(res, w.attention_norm.gamma, w.attention_norm.beta, ln_eps)?;
    let hidden = w.ffn_in.forward(tape, mid)?;
    let hidden = tape.gelu(hidden)?;
    let ffn = w.ffn_out.forward(tape, hidden)?;
    let res = tape.add(mid, ffn)?;
    tape.layer_norm(res, w.ffn_norm.gamma, w.ffn_norm.beta, ln_eps)
}
