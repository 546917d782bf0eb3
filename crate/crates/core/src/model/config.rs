use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::tape::Precision;
use crate::tokens::RESERVED;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every node consumes its messenger at every nested layer.
    #[default]
    Bidirectional,
    /// Only the center consumes messengers; neighbours are encoded
    /// independently and can be cached.
    Unidirectional,
}

/// How neighbourhood information reaches the center embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Graph aggregation nested between transformer layers.
    #[default]
    Nested,
    /// Center text embedding only.
    None,
    Max,
    Mean,
    /// Neighbours weighted by `softmax(center · neighbour)`.
    Att,
    /// Single-head attention over all nodes with the center as query.
    Gat,
}

impl Aggregator {
    pub fn is_cascaded(self) -> bool {
        self != Aggregator::Nested
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Maximum tokens per node, `[CLS]` included.
    pub max_tokens: usize,
    pub max_neighbours: usize,
    pub vocab_size: usize,
    pub share_gnn: bool,
    pub mode: Mode,
    pub aggregator: Aggregator,
    pub relation_bias: bool,
    pub precision: Precision,
    /// Standard deviation of the truncated-normal initialisation.
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            max_tokens: 13,
            max_neighbours: 5,
            vocab_size: 1000,
            share_gnn: true,
            mode: Mode::Bidirectional,
            aggregator: Aggregator::Nested,
            relation_bias: true,
            precision: Precision::F64,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GfkError::Config(m));
        if self.layers < 2 {
            return fail(format!("layers must be at least 2, got {}", self.layers));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be positive".into());
        }
        if self.vocab_size <= RESERVED as usize {
            return fail(format!("vocab_size must exceed the {RESERVED} reserved ids"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail(format!("layer_norm_eps must be positive, got {}", self.layer_norm_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Number of distinct graph-aggregation parameter sets.
    pub fn gnn_sets(&self) -> usize {
        match (self.aggregator, self.share_gnn) {
            (Aggregator::Nested, true) => 1,
            (Aggregator::Nested, false) => self.layers - 1,
            _ => 0,
        }
    }

    /// Graph-aggregation set used before transformer layer `layer` (1-based).
    pub fn gnn_index(&self, layer: usize) -> usize {
        if self.share_gnn {
            0
        } else {
            layer - 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_single_layer_and_bad_heads() {
        let cfg = ModelConfig { layers: 1, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { hidden: 30, heads: 4, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gnn_sets_follow_sharing() {
        let mut cfg = ModelConfig { layers: 4, ..ModelConfig::default() };
        assert_eq!(cfg.gnn_sets(), 1);
        assert_eq!(cfg.gnn_index(3), 0);
        cfg.share_gnn = false;
        assert_eq!(cfg.gnn_sets(), 3);
        assert_eq!(cfg.gnn_index(3), 2);
        cfg.aggregator = Aggregator::Mean;
        assert_eq!(cfg.gnn_sets(), 0);
    }
}
