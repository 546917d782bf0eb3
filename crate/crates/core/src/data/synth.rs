//! Synthetic textual graphs: a stochastic block model whose node texts are
//! drawn from cluster-dependent unigram mixtures.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::rng::{stream, tag};
use crate::tokens::RESERVED;

use super::graph::{Edge, EdgeSplits, GraphMeta, TextGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub clusters: usize,
    /// Vocabulary size including the reserved ids.
    pub vocab_size: usize,
    pub tokens_per_node: usize,
    /// Fraction of a node's tokens drawn from the cluster-agnostic noise
    /// unigram.
    pub noise: f64,
    /// Mass a cluster unigram puts on its own token block; the rest is
    /// spread uniformly over all content tokens.
    pub cluster_focus: f64,
    pub p_in: f64,
    pub p_out: f64,
    /// Draw edges across several relation types, each linking cluster `c`
    /// to cluster `c + r`.
    pub heterogeneous: bool,
    pub relations: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 5000,
            clusters: 20,
            vocab_size: 1000,
            tokens_per_node: 12,
            noise: 0.5,
            cluster_focus: 0.5,
            p_in: 0.03,
            p_out: 0.0002,
            heterogeneous: false,
            relations: 3,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GfkError::Config(m));
        if self.clusters == 0 || self.clusters > self.nodes {
            return fail(format!("need 0 < clusters ≤ nodes, got {} clusters for {} nodes", self.clusters, self.nodes));
        }
        if self.vocab_size < RESERVED as usize + self.clusters {
            return fail(format!("vocab_size {} leaves no token block per cluster", self.vocab_size));
        }
        if !(self.p_out >= 0.0 && self.p_in > self.p_out && self.p_in <= 1.0) {
            return fail(format!("need 0 ≤ p_out < p_in ≤ 1, got p_in={} p_out={}", self.p_in, self.p_out));
        }
        for (name, v) in [("noise", self.noise), ("cluster_focus", self.cluster_focus)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.heterogeneous && self.relations == 0 {
            return fail("heterogeneous graphs need at least one relation".into());
        }
        let held_out = self.valid_fraction + self.test_fraction;
        if !(self.valid_fraction >= 0.0 && self.test_fraction >= 0.0 && held_out < 1.0) {
            return fail(format!("split fractions must be non-negative and sum below 1, got {held_out}"));
        }
        Ok(())
    }

    /// Expected degree of a node (homogeneous approximation).
    pub fn expected_degree(&self) -> f64 {
        let same = self.nodes as f64 / self.clusters as f64 - 1.0;
        let other = self.nodes as f64 - same - 1.0;
        same * self.p_in + other * self.p_out
    }

    fn content(&self) -> u32 {
        self.vocab_size as u32 - RESERVED
    }

    fn block(&self) -> u32 {
        self.content() / self.clusters as u32
    }

    fn edge_probability(&self, a: usize, b: usize) -> f64 {
        if !self.heterogeneous {
            return if a == b { self.p_in } else { self.p_out };
        }
        let c = self.clusters;
        let links = (0..self.relations).filter(|r| (a + r) % c == b || (b + r) % c == a).count();
        (self.p_out + (self.p_in - self.p_out) * links as f64 / self.relations as f64).min(1.0)
    }
}

fn sample_text<R: Rng>(cfg: &SynthConfig, cluster: usize, rng: &mut R) -> Vec<u32> {
    let (content, block) = (cfg.content(), cfg.block());
    (0..cfg.tokens_per_node)
        .map(|_| {
            let from_cluster = rng.random::<f64>() >= cfg.noise && rng.random::<f64>() < cfg.cluster_focus;
            if from_cluster {
                RESERVED + cluster as u32 * block + rng.random_range(0..block)
            } else {
                RESERVED + rng.random_range(0..content)
            }
        })
        .collect()
}

/// Partitions `edges` into train/valid/test. An edge is held out only if
/// both endpoints keep at least one training edge.
pub fn split_edges(edges: &[Edge], node_count: usize, valid: f64, test: f64, seed: u64) -> EdgeSplits {
    let mut order = edges.to_vec();
    order.shuffle(&mut stream(seed, &[tag::SPLIT]));
    let mut degree = vec![0usize; node_count];
    for &(u, v) in edges {
        degree[u as usize] += 1;
        degree[v as usize] += 1;
    }
    let want_test = (edges.len() as f64 * test).round() as usize;
    let want_valid = (edges.len() as f64 * valid).round() as usize;
    let mut splits = EdgeSplits::default();
    for (u, v) in order {
        let movable = degree[u as usize] > 1 && degree[v as usize] > 1;
        let target = if movable && splits.test.len() < want_test {
            &mut splits.test
        } else if movable && splits.valid.len() < want_valid {
            &mut splits.valid
        } else {
            splits.train.push((u, v));
            continue;
        };
        degree[u as usize] -= 1;
        degree[v as usize] -= 1;
        target.push((u, v));
    }
    for list in [&mut splits.train, &mut splits.valid, &mut splits.test] {
        list.sort_unstable();
    }
    splits
}

/// Generates a graph and its edge splits; a pure function of `(cfg, seed)`.
pub fn generate_synthetic_graph(cfg: &SynthConfig, seed: u64) -> Result<(TextGraph, EdgeSplits)> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.expected_degree() < 1.0 {
        warnings.push(format!("expected degree {:.3} is below 1; the graph will be sparse", cfg.expected_degree()));
    }
    let mut rng = stream(seed, &[tag::GRAPH, 0]);
    let clusters: Vec<u32> = (0..cfg.nodes).map(|_| rng.random_range(0..cfg.clusters as u32)).collect();
    let texts: Vec<Vec<u32>> = clusters.iter().map(|&c| sample_text(cfg, c as usize, &mut rng)).collect();

    let mut rng = stream(seed, &[tag::GRAPH, 1]);
    let mut edges = Vec::new();
    for u in 0..cfg.nodes {
        for v in u + 1..cfg.nodes {
            let p = cfg.edge_probability(clusters[u] as usize, clusters[v] as usize);
            if rng.random::<f64>() < p {
                edges.push((u as u64, v as u64));
            }
        }
    }
    let splits = split_edges(&edges, cfg.nodes, cfg.valid_fraction, cfg.test_fraction, seed);
    let meta = GraphMeta {
        seed,
        vocab_size: cfg.vocab_size,
        generator: Some(cfg.clone()),
        clusters: Some(clusters),
        warnings,
    };
    Ok((TextGraph::new(texts, &edges, meta)?, splits))
}
