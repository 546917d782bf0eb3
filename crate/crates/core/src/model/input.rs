use crate::error::{GfkError, Result};
use crate::tokens::CLS;

use super::config::ModelConfig;

/// A center node and its sampled neighbours. `nodes[0]` is the center; each
/// node is an unpadded token sequence starting with `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GraphInput {
    /// Graph ids of `nodes`, required for neighbour caching.
    pub node_ids: Option<Vec<u64>>,
    pub nodes: Vec<Vec<u32>>,
}

impl GraphInput {
    pub fn new(nodes: Vec<Vec<u32>>) -> Self {
        GraphInput { node_ids: None, nodes }
    }

    pub fn with_ids(node_ids: Vec<u64>, nodes: Vec<Vec<u32>>) -> Self {
        GraphInput { node_ids: Some(node_ids), nodes }
    }

    /// Node count `M` (center included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn neighbour_count(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn center(&self) -> &[u32] {
        &self.nodes[0]
    }

    pub fn neighbours(&self) -> &[Vec<u32>] {
        &self.nodes[1..]
    }

    /// Keeps the first `cap` neighbours.
    pub fn truncated(&self, cap: usize) -> GraphInput {
        let keep = (cap + 1).min(self.nodes.len());
        GraphInput {
            node_ids: self.node_ids.as_ref().map(|ids| ids[..keep].to_vec()),
            nodes: self.nodes[..keep].to_vec(),
        }
    }

    /// Reorders neighbours: new neighbour `i` is old neighbour `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<GraphInput> {
        let k = self.neighbour_count();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(GfkError::Contract(format!("{perm:?} is not a permutation of {k} neighbours")));
        }
        let order: Vec<usize> = std::iter::once(0).chain(perm.iter().map(|p| p + 1)).collect();
        Ok(GraphInput {
            node_ids: self.node_ids.as_ref().map(|ids| order.iter().map(|&i| ids[i]).collect()),
            nodes: order.iter().map(|&i| self.nodes[i].clone()).collect(),
        })
    }

    /// Key-padding mask of every node when padded to `len` tokens.
    pub fn pad_masks(&self, len: usize) -> Vec<Vec<bool>> {
        self.nodes.iter().map(|n| (0..len).map(|p| p >= n.len()).collect()).collect()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(GfkError::Contract("graph input has no center node".into()));
        }
        if self.neighbour_count() > cfg.max_neighbours {
            return Err(GfkError::Capacity { neighbours: self.neighbour_count(), capacity: cfg.max_neighbours });
        }
        if let Some(ids) = &self.node_ids {
            if ids.len() != self.nodes.len() {
                return Err(GfkError::Contract(format!("{} node ids for {} nodes", ids.len(), self.nodes.len())));
            }
        }
        for seq in &self.nodes {
            validate_sequence(seq, cfg)?;
        }
        Ok(())
    }
}

pub fn validate_sequence(seq: &[u32], cfg: &ModelConfig) -> Result<()> {
    if seq.first() != Some(&CLS) {
        return Err(GfkError::Contract("every node sequence must start with [CLS]".into()));
    }
    if seq.len() > cfg.max_tokens {
        return Err(GfkError::Range { what: "sequence length", value: seq.len(), limit: cfg.max_tokens });
    }
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(GfkError::Range { what: "token id", value: bad as usize, limit: cfg.vocab_size });
    }
    Ok(())
}
