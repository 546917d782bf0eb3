//! Forward passes over batches of graph inputs.
//!
//! All sequences of a batch are padded to the longest one and stacked as
//! `[S·P × d]`; graph aggregation works on `[I·M_max × d]` node slots with a
//! padding mask, so instances never see each other. Every kernel is
//! row-local, which makes an instance's result independent of its batch.

use crate::error::{GfkError, Result};
use crate::layers::{attention, gnn_mha, token_embed, transformer_layer, AttnShape};
use crate::tape::{PoolKind, Tape, Var};
use crate::tensor::Tensor;
use crate::tokens::PAD;

use super::cache::NeighborCache;
use super::config::{Aggregator, Mode, ModelConfig};
use super::input::{validate_sequence, GraphInput};
use super::params::{AggregatorWeights, ParamSet, Weights};

struct SeqBatch {
    ids: Vec<u32>,
    mask: Vec<bool>,
    count: usize,
    len: usize,
}

fn seq_batch(seqs: &[&[u32]]) -> SeqBatch {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut mask = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.resize(ids.len() + len - s.len(), PAD);
        mask.extend((0..len).map(|p| p >= s.len()));
    }
    SeqBatch { ids, mask, count: seqs.len(), len }
}

fn cls_rows(tape: &mut Tape, h: Var, count: usize, len: usize) -> Result<Var> {
    tape.gather_rows(h, (0..count).map(|s| Some(s * len)).collect())
}

fn rows_to_vectors(t: &Tensor) -> Vec<Tensor> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| Tensor::vector(r.to_vec()).expect("finite row")).collect()
}

fn stack_vectors(rows: &[&Tensor]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.numel());
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.numel() != d {
            return Err(GfkError::dim("stack_vectors", format!("row of {} in width {d}", r.numel())));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Runs the first `depth` transformer layers without messengers and returns
/// the `[CLS]` states `z^1..z^depth`, each `[S × d]`.
pub(crate) fn plain_stack_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    seqs: &[&[u32]],
    depth: usize,
) -> Result<Vec<Var>> {
    let b = seq_batch(seqs);
    let mut h = token_embed(tape, &w.embeddings, &b.ids, b.len)?;
    let mut zs = Vec::with_capacity(depth);
    for layer in &w.layers[..depth] {
        h = transformer_layer(tape, h, None, layer, b.count, b.len, &b.mask, cfg.layer_norm_eps)?;
        zs.push(cls_rows(tape, h, b.count, b.len)?);
    }
    Ok(zs)
}

/// Where unidirectional neighbour states come from.
pub(crate) enum NeighbourSource<'a> {
    /// Encode neighbours on the tape (gradients flow into them).
    Compute,
    /// Precomputed `z^1..z^{L−1}` per neighbour, in batch order.
    Given(&'a [Vec<Tensor>]),
}

/// Nested encoding of a batch; returns `[I × d]` center embeddings and, in
/// unidirectional mode, the per-layer neighbour states `[S_n × d]`.
pub(crate) fn nested_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    inputs: &[&GraphInput],
    source: NeighbourSource<'_>,
) -> Result<(Var, Vec<Var>)> {
    match cfg.mode {
        Mode::Bidirectional => Ok((bidirectional(tape, cfg, w, inputs)?, Vec::new())),
        Mode::Unidirectional => unidirectional(tape, cfg, w, inputs, source),
    }
}

fn bidirectional(tape: &mut Tape, cfg: &ModelConfig, w: &Weights<Var>, inputs: &[&GraphInput]) -> Result<Var> {
    let instances = inputs.len();
    let m_max = inputs.iter().map(|g| g.len()).max().ok_or(GfkError::EmptyBatch)?;
    let seqs: Vec<&[u32]> = inputs.iter().flat_map(|g| g.nodes.iter().map(Vec::as_slice)).collect();

    let mut slots = vec![None; instances * m_max];
    let mut node_mask = vec![true; instances * m_max];
    let mut messenger_rows = Vec::with_capacity(seqs.len());
    let mut centers = Vec::with_capacity(instances);
    let mut s = 0;
    for (i, g) in inputs.iter().enumerate() {
        centers.push(s);
        for j in 0..g.len() {
            slots[i * m_max + j] = Some(s);
            node_mask[i * m_max + j] = false;
            messenger_rows.push(Some(i * m_max + j));
            s += 1;
        }
    }

    let b = seq_batch(&seqs);
    let eps = cfg.layer_norm_eps;
    let mut h = token_embed(tape, &w.embeddings, &b.ids, b.len)?;
    h = transformer_layer(tape, h, None, &w.layers[0], b.count, b.len, &b.mask, eps)?;
    for l in 1..cfg.layers {
        let z = cls_rows(tape, h, b.count, b.len)?;
        let z = tape.gather_rows(z, slots.clone())?;
        let z_hat = gnn_mha(tape, z, &w.gnn[cfg.gnn_index(l)], instances, m_max, &node_mask, false)?;
        let messenger = tape.gather_rows(z_hat, messenger_rows.clone())?;
        h = transformer_layer(tape, h, Some(messenger), &w.layers[l], b.count, b.len, &b.mask, eps)?;
    }
    tape.gather_rows(h, centers.iter().map(|&s| Some(s * b.len)).collect())
}

fn unidirectional(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    inputs: &[&GraphInput],
    source: NeighbourSource<'_>,
) -> Result<(Var, Vec<Var>)> {
    let instances = inputs.len();
    let m_max = inputs.iter().map(|g| g.len()).max().ok_or(GfkError::EmptyBatch)?;
    let neighbours: Vec<&[u32]> =
        inputs.iter().flat_map(|g| g.neighbours().iter().map(Vec::as_slice)).collect();
    let depth = cfg.layers - 1;

    let states: Vec<Var> = match source {
        _ if neighbours.is_empty() => Vec::new(),
        NeighbourSource::Compute => plain_stack_on_tape(tape, cfg, w, &neighbours, depth)?,
        NeighbourSource::Given(given) => {
            if given.len() != neighbours.len() || given.iter().any(|s| s.len() != depth) {
                return Err(GfkError::Contract(format!(
                    "{} neighbour state lists for {} neighbours",
                    given.len(),
                    neighbours.len()
                )));
            }
            let mut out = Vec::with_capacity(depth);
            for l in 0..depth {
                let rows: Vec<&Tensor> = given.iter().map(|s| &s[l]).collect();
                out.push(tape.constant(stack_vectors(&rows)?));
            }
            out
        }
    };

    let mut slots = vec![None; instances * m_max];
    let mut node_mask = vec![true; instances * m_max];
    let mut offset = instances;
    for (i, g) in inputs.iter().enumerate() {
        slots[i * m_max] = Some(i);
        node_mask[i * m_max] = false;
        for j in 1..g.len() {
            slots[i * m_max + j] = Some(offset);
            node_mask[i * m_max + j] = false;
            offset += 1;
        }
    }

    let centers: Vec<&[u32]> = inputs.iter().map(|g| g.center()).collect();
    let b = seq_batch(&centers);
    let eps = cfg.layer_norm_eps;
    let mut h = token_embed(tape, &w.embeddings, &b.ids, b.len)?;
    h = transformer_layer(tape, h, None, &w.layers[0], b.count, b.len, &b.mask, eps)?;
    for l in 1..cfg.layers {
        let zc = cls_rows(tape, h, b.count, b.len)?;
        let z = match states.get(l - 1) {
            Some(&zn) => tape.concat_rows(&[zc, zn])?,
            None => zc,
        };
        let z = tape.gather_rows(z, slots.clone())?;
        let messenger = gnn_mha(tape, z, &w.gnn[cfg.gnn_index(l)], instances, m_max, &node_mask, true)?;
        h = transformer_layer(tape, h, Some(messenger), &w.layers[l], b.count, b.len, &b.mask, eps)?;
    }
    Ok((cls_rows(tape, h, b.count, b.len)?, states))
}

/// Combines final text embeddings `z` (`[S × d]`) into one embedding per
/// instance. `layout[i]` = (center row, neighbour rows).
pub(crate) fn aggregate_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    z: Var,
    layout: &[(usize, Vec<usize>)],
) -> Result<Var> {
    let instances = layout.len();
    let d = cfg.hidden;
    let center = tape.gather_rows(z, layout.iter().map(|(c, _)| Some(*c)).collect())?;
    let combine = |tape: &mut Tape, pooled: Var| -> Result<Var> {
        let Some(AggregatorWeights::Combine(lin)) = &w.aggregator else {
            return Err(GfkError::Contract("aggregator weights missing".into()));
        };
        let joint = tape.concat_cols(center, pooled)?;
        lin.forward(tape, joint)
    };
    match cfg.aggregator {
        Aggregator::Nested => Err(GfkError::Contract("nested models have no cascaded aggregator".into())),
        Aggregator::None => Ok(center),
        Aggregator::Max | Aggregator::Mean => {
            let kind = if cfg.aggregator == Aggregator::Max { PoolKind::Max } else { PoolKind::Mean };
            let pooled = tape.pool_rows(z, layout.iter().map(|(_, n)| n.clone()).collect(), kind)?;
            combine(tape, pooled)
        }
        Aggregator::Att => {
            let k_max = layout.iter().map(|(_, n)| n.len()).max().unwrap_or(0).max(1);
            let mut index = vec![None; instances * k_max];
            let mut mask = vec![true; instances * k_max];
            for (i, (_, n)) in layout.iter().enumerate() {
                for (j, &r) in n.iter().enumerate() {
                    index[i * k_max + j] = Some(r);
                    mask[i * k_max + j] = false;
                }
                // No neighbours: attend to a single zero row, pooling to zero.
                if n.is_empty() {
                    mask[i * k_max] = false;
                }
            }
            let neigh = tape.gather_rows(z, index)?;
            let q = tape.reshape(center, vec![instances, 1, d])?;
            let kv = tape.reshape(neigh, vec![instances, k_max, d])?;
            let scores = tape.batch_matmul(q, kv, true)?;
            let weights = tape.softmax_masked(scores, Some(&mask))?;
            let pooled = tape.batch_matmul(weights, kv, false)?;
            let pooled = tape.reshape(pooled, vec![instances, d])?;
            combine(tape, pooled)
        }
        Aggregator::Gat => {
            let Some(AggregatorWeights::Gat { query, key }) = &w.aggregator else {
                return Err(GfkError::Contract("aggregator weights missing".into()));
            };
            let m_max = layout.iter().map(|(_, n)| n.len() + 1).max().ok_or(GfkError::EmptyBatch)?;
            let mut index = vec![None; instances * m_max];
            let mut mask = vec![true; instances * m_max];
            for (i, (c, n)) in layout.iter().enumerate() {
                for (j, &r) in std::iter::once(c).chain(n).enumerate() {
                    index[i * m_max + j] = Some(r);
                    mask[i * m_max + j] = false;
                }
            }
            let nodes = tape.gather_rows(z, index)?;
            let q = tape.matmul(center, *query)?;
            let k = tape.matmul(nodes, *key)?;
            let shape = AttnShape { batch: instances, queries: 1, keys: m_max };
            attention(tape, q, k, nodes, shape, 1, &mask, None)
        }
    }
}

fn cascaded_on_tape(tape: &mut Tape, cfg: &ModelConfig, w: &Weights<Var>, inputs: &[&GraphInput]) -> Result<Var> {
    if cfg.aggregator == Aggregator::None {
        let centers: Vec<&[u32]> = inputs.iter().map(|g| g.center()).collect();
        return Ok(*plain_stack_on_tape(tape, cfg, w, &centers, cfg.layers)?.last().expect("at least two layers"));
    }
    let seqs: Vec<&[u32]> = inputs.iter().flat_map(|g| g.nodes.iter().map(Vec::as_slice)).collect();
    let z = *plain_stack_on_tape(tape, cfg, w, &seqs, cfg.layers)?.last().expect("at least two layers");
    let mut layout = Vec::with_capacity(inputs.len());
    let mut s = 0;
    for g in inputs {
        layout.push((s, (s + 1..s + g.len()).collect()));
        s += g.len();
    }
    aggregate_on_tape(tape, cfg, w, z, &layout)
}

/// Encodes a batch on `tape` with the given bound weights, returning the
/// `[I × d]` center embeddings. Unidirectional neighbours are encoded on the
/// tape as well.
pub fn encode_on_tape(tape: &mut Tape, cfg: &ModelConfig, w: &Weights<Var>, inputs: &[&GraphInput]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(GfkError::EmptyBatch);
    }
    for (index, g) in inputs.iter().enumerate() {
        g.validate(cfg).map_err(|e| GfkError::Instance { index, source: Box::new(e) })?;
    }
    if cfg.aggregator.is_cascaded() {
        cascaded_on_tape(tape, cfg, w, inputs)
    } else {
        Ok(nested_on_tape(tape, cfg, w, inputs, NeighbourSource::Compute)?.0)
    }
}

/// Inference over a batch; one `[d]` embedding per input.
///
/// A cache is only valid for unidirectional nested models; its entries are
/// keyed by the inputs' node ids.
pub fn encode_graphs(inputs: &[&GraphInput], params: &ParamSet, cache: Option<&mut NeighborCache>) -> Result<Vec<Tensor>> {
    let cfg = params.config();
    let Some(cache) = cache else {
        let mut tape = Tape::with_precision(cfg.precision);
        let w = params.bind(&mut tape, false);
        let out = encode_on_tape(&mut tape, cfg, &w, inputs)?;
        return Ok(rows_to_vectors(tape.value(out)));
    };
    if cfg.aggregator.is_cascaded() || cfg.mode != Mode::Unidirectional {
        return Err(GfkError::Contract("a neighbour cache requires a unidirectional nested model".into()));
    }
    if let Some(pinned) = cache.pinned_version() {
        if pinned != params.version() {
            return Err(GfkError::StaleCache { cache: pinned, params: params.version() });
        }
    }
    if inputs.is_empty() {
        return Err(GfkError::EmptyBatch);
    }
    let mut wanted = Vec::new();
    for (index, g) in inputs.iter().enumerate() {
        g.validate(cfg).map_err(|e| GfkError::Instance { index, source: Box::new(e) })?;
        let ids = g.node_ids.as_ref().ok_or_else(|| GfkError::Instance {
            index,
            source: Box::new(GfkError::Contract("cached encoding needs node ids".into())),
        })?;
        for (id, seq) in ids[1..].iter().zip(g.neighbours()) {
            wanted.push((*id, seq.as_slice()));
        }
    }
    let states = cache.lookup_or_encode_many(&wanted, params)?;
    let mut tape = Tape::with_precision(cfg.precision);
    let w = params.bind(&mut tape, false);
    let (out, _) = nested_on_tape(&mut tape, cfg, &w, inputs, NeighbourSource::Given(&states))?;
    Ok(rows_to_vectors(tape.value(out)))
}

/// Center embedding `z^L` of one graph input.
pub fn encode_graph(input: &GraphInput, params: &ParamSet, cache: Option<&mut NeighborCache>) -> Result<Tensor> {
    Ok(encode_graphs(&[input], params, cache)?.remove(0))
}

/// Unidirectional encode that also returns the neighbour states it used:
/// `states[n][l]` is `z^{l+1}` of neighbour `n`.
pub fn encode_graph_traced(input: &GraphInput, params: &ParamSet) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    let cfg = params.config();
    if cfg.mode != Mode::Unidirectional || cfg.aggregator.is_cascaded() {
        return Err(GfkError::Contract("tracing applies to unidirectional nested models".into()));
    }
    input.validate(cfg)?;
    let mut tape = Tape::with_precision(cfg.precision);
    let w = params.bind(&mut tape, false);
    let (out, layers) = nested_on_tape(&mut tape, cfg, &w, &[input], NeighbourSource::Compute)?;
    let per_layer: Vec<Vec<Tensor>> = layers.iter().map(|&v| rows_to_vectors(tape.value(v))).collect();
    let states = (0..input.neighbour_count()).map(|n| per_layer.iter().map(|l| l[n].clone()).collect()).collect();
    Ok((rows_to_vectors(tape.value(out)).remove(0), states))
}

/// Messenger-free `[CLS]` states of one node after every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainStack {
    /// `z^1..z^{L−1}`
    pub intermediate: Vec<Tensor>,
    /// `z^L`
    pub last: Tensor,
}

/// Runs `depth` plain layers over each sequence; `out[s][l]` is `z^{l+1}`.
pub fn plain_stacks(seqs: &[&[u32]], params: &ParamSet, depth: usize) -> Result<Vec<Vec<Tensor>>> {
    let cfg = params.config();
    if depth > cfg.layers {
        return Err(GfkError::Range { what: "stack depth", value: depth, limit: cfg.layers });
    }
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    for s in seqs {
        validate_sequence(s, cfg)?;
    }
    let mut tape = Tape::with_precision(cfg.precision);
    let w = params.bind(&mut tape, false);
    let layers = plain_stack_on_tape(&mut tape, cfg, &w, seqs, depth)?;
    let per_layer: Vec<Vec<Tensor>> = layers.iter().map(|&v| rows_to_vectors(tape.value(v))).collect();
    Ok((0..seqs.len()).map(|s| per_layer.iter().map(|l| l[s].clone()).collect()).collect())
}

pub fn encode_plain_stack(tokens: &[u32], params: &ParamSet) -> Result<PlainStack> {
    let mut states = plain_stacks(&[tokens], params, params.config().layers)?.remove(0);
    let last = states.pop().expect("at least two layers");
    Ok(PlainStack { intermediate: states, last })
}

/// Final text embeddings `z^L` of independent sequences (cascaded models).
pub fn text_embeddings(seqs: &[&[u32]], params: &ParamSet) -> Result<Vec<Tensor>> {
    Ok(plain_stacks(seqs, params, params.config().layers)?.into_iter().map(|mut s| s.pop().expect("depth ≥ 1")).collect())
}

/// Applies the cascaded aggregator to precomputed text embeddings.
/// `groups[i]` = (center embedding, neighbour embeddings).
pub fn aggregate_text(groups: &[(&Tensor, Vec<&Tensor>)], params: &ParamSet) -> Result<Vec<Tensor>> {
    let cfg = params.config();
    if groups.is_empty() {
        return Err(GfkError::EmptyBatch);
    }
    let mut rows = Vec::new();
    let mut layout = Vec::with_capacity(groups.len());
    for (c, n) in groups {
        if n.len() > cfg.max_neighbours {
            return Err(GfkError::Capacity { neighbours: n.len(), capacity: cfg.max_neighbours });
        }
        let start = rows.len();
        rows.push(*c);
        rows.extend(n.iter().copied());
        layout.push((start, (start + 1..rows.len()).collect()));
    }
    let mut tape = Tape::with_precision(cfg.precision);
    let w = params.bind(&mut tape, false);
    let z = tape.constant(stack_vectors(&rows)?);
    let out = aggregate_on_tape(&mut tape, cfg, &w, z, &layout)?;
    Ok(rows_to_vectors(tape.value(out)))
}

/// Cascaded baseline encode of one input (the configured aggregator must
/// not be `nested`).
pub fn cascaded_encode(input: &GraphInput, params: &ParamSet) -> Result<Tensor> {
    if !params.config().aggregator.is_cascaded() {
        return Err(GfkError::Contract("cascaded_encode needs a cascaded aggregator".into()));
    }
    encode_graph(input, params, None)
}
