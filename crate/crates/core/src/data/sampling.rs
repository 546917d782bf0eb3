//! Neighbour sampling, training pairs and ranking instances.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::model::GraphInput;
use crate::rng::{stream, tag};

use super::graph::{Edge, TextGraph};

/// Up to `k` distinct neighbours of `node`, uniformly without replacement.
pub fn sample_neighbors<R: Rng + ?Sized>(graph: &TextGraph, node: u64, k: usize, rng: &mut R) -> Result<Vec<u64>> {
    let adj = graph.neighbours(node)?;
    let take = k.min(adj.len());
    Ok(index::sample(rng, adj.len(), take).into_iter().map(|i| adj[i]).collect())
}

/// How a pair whose neighbour sample contains its own partner is handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NaiveMode {
    /// Replace the partner by another unsampled neighbour, if one exists.
    #[default]
    Redraw,
    /// Drop the pair.
    Drop,
}

/// A positive (query, key) link with each side's sampled neighbourhood.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainPair {
    pub query: u64,
    pub key: u64,
    pub query_neighbours: Vec<u64>,
    pub key_neighbours: Vec<u64>,
}

fn redraw<R: Rng + ?Sized>(graph: &TextGraph, node: u64, partner: u64, sample: &mut Vec<u64>, rng: &mut R) -> Result<()> {
    let Some(pos) = sample.iter().position(|&n| n == partner) else { return Ok(()) };
    sample.remove(pos);
    let spare: Vec<u64> = graph
        .neighbours(node)?
        .iter()
        .copied()
        .filter(|&n| n != partner && !sample.contains(&n))
        .collect();
    if !spare.is_empty() {
        sample.insert(pos, spare[rng.random_range(0..spare.len())]);
    }
    Ok(())
}

/// Removes the trivial cases where one side's neighbourhood already contains
/// the other side. `samples[i]` holds the neighbour samples of `edges[i]`.
pub fn filter_naive_pairs<R: Rng + ?Sized>(
    edges: &[Edge],
    graph: &TextGraph,
    samples: Vec<(Vec<u64>, Vec<u64>)>,
    mode: NaiveMode,
    rng: &mut R,
) -> Result<Vec<TrainPair>> {
    if samples.len() != edges.len() {
        return Err(GfkError::Contract(format!("{} neighbour samples for {} edges", samples.len(), edges.len())));
    }
    let mut out = Vec::with_capacity(edges.len());
    for (&(q, k), (mut qn, mut kn)) in edges.iter().zip(samples) {
        match mode {
            NaiveMode::Drop if qn.contains(&k) || kn.contains(&q) => continue,
            NaiveMode::Drop => {}
            NaiveMode::Redraw => {
                redraw(graph, q, k, &mut qn, rng)?;
                redraw(graph, k, q, &mut kn, rng)?;
            }
        }
        out.push(TrainPair { query: q, key: k, query_neighbours: qn, key_neighbours: kn });
    }
    Ok(out)
}

/// One pair per edge (two if `both_orientations`), with neighbourhoods
/// sampled from `graph` and naive cases filtered.
pub fn build_link_pairs<R: Rng + ?Sized>(
    graph: &TextGraph,
    edges: &[Edge],
    k: usize,
    both_orientations: bool,
    mode: NaiveMode,
    rng: &mut R,
) -> Result<Vec<TrainPair>> {
    let oriented: Vec<Edge> = if both_orientations {
        edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect()
    } else {
        edges.to_vec()
    };
    let samples = oriented
        .iter()
        .map(|&(q, key)| Ok((sample_neighbors(graph, q, k, rng)?, sample_neighbors(graph, key, k, rng)?)))
        .collect::<Result<Vec<_>>>()?;
    filter_naive_pairs(&oriented, graph, samples, mode, rng)
}

/// Turns node ids into model inputs, giving each node one fixed neighbourhood
/// drawn from its own seeded stream, so a node looks the same wherever it
/// appears.
#[derive(Clone, Debug)]
pub struct NeighbourhoodSampler<'g> {
    graph: &'g TextGraph,
    k: usize,
    max_tokens: usize,
    seed: u64,
}

impl<'g> NeighbourhoodSampler<'g> {
    pub fn new(graph: &'g TextGraph, k: usize, max_tokens: usize, seed: u64) -> Self {
        NeighbourhoodSampler { graph, k, max_tokens, seed }
    }

    pub fn graph(&self) -> &'g TextGraph {
        self.graph
    }

    pub fn neighbours(&self, node: u64) -> Result<Vec<u64>> {
        sample_neighbors(self.graph, node, self.k, &mut stream(self.seed, &[tag::NEIGHBOURS, node]))
    }

    /// Packages `node` and the given neighbours as a model input.
    pub fn input_with(&self, node: u64, neighbours: &[u64]) -> Result<GraphInput> {
        let ids: Vec<u64> = std::iter::once(node).chain(neighbours.iter().copied()).collect();
        let nodes = ids.iter().map(|&n| self.graph.sequence(n, self.max_tokens)).collect::<Result<Vec<_>>>()?;
        Ok(GraphInput::with_ids(ids, nodes))
    }

    pub fn input(&self, node: u64) -> Result<GraphInput> {
        self.input_with(node, &self.neighbours(node)?)
    }
}

/// One ranking problem: a query against one positive and `n_neg` negatives.
/// Nodes are stored by id and turned into inputs by a
/// [`NeighbourhoodSampler`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalInstance {
    pub query: u64,
    pub candidates: Vec<u64>,
    pub positive: usize,
}

impl EvalInstance {
    pub fn positive_node(&self) -> u64 {
        self.candidates[self.positive]
    }

    pub fn materialize(&self, sampler: &NeighbourhoodSampler) -> Result<(GraphInput, Vec<GraphInput>)> {
        let keys = self.candidates.iter().map(|&c| sampler.input(c)).collect::<Result<Vec<_>>>()?;
        Ok((sampler.input(self.query)?, keys))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub negatives: usize,
    /// Draw negatives only among nodes not adjacent to the query. When off,
    /// only the query and the positive are excluded.
    pub exclude_adjacent: bool,
    /// Also rank each test edge in the reverse direction.
    pub both_orientations: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { negatives: 99, exclude_adjacent: true, both_orientations: true }
    }
}

fn draw_negatives<R: Rng + ?Sized>(n: u64, excluded: &HashSet<u64>, count: usize, rng: &mut R) -> Vec<u64> {
    let eligible = n as usize - excluded.len();
    if eligible <= 4 * count {
        let pool: Vec<u64> = (0..n).filter(|v| !excluded.contains(v)).collect();
        return index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect();
    }
    let mut chosen = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    while chosen.len() < count {
        let v = rng.random_range(0..n);
        if !excluded.contains(&v) && seen.insert(v) {
            chosen.push(v);
        }
    }
    chosen
}

/// Builds ranking instances from `test_edges`. `graph` must be the full
/// graph so adjacency exclusion sees every true link. Queries without
/// enough eligible negatives are skipped and reported in the returned
/// warnings.
pub fn make_eval_instances<R: Rng + ?Sized>(
    graph: &TextGraph,
    test_edges: &[Edge],
    opts: &EvalOptions,
    rng: &mut R,
) -> Result<(Vec<EvalInstance>, Vec<String>)> {
    if opts.negatives == 0 {
        return Err(GfkError::Config("evaluation needs at least one negative".into()));
    }
    let n = graph.node_count() as u64;
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for &(u, v) in test_edges {
        let orientations: &[Edge] = if opts.both_orientations { &[(u, v), (v, u)] } else { &[(u, v)] };
        for &(q, pos) in orientations {
            graph.neighbours(pos)?;
            let mut excluded: HashSet<u64> = HashSet::from([q, pos]);
            if opts.exclude_adjacent {
                excluded.extend(graph.neighbours(q)?.iter().copied());
            }
            if (n as usize).saturating_sub(excluded.len()) < opts.negatives {
                warnings.push(format!("query {q}: fewer than {} eligible negatives, skipped", opts.negatives));
                continue;
            }
            let mut candidates = draw_negatives(n, &excluded, opts.negatives, rng);
            let positive = rng.random_range(0..=candidates.len());
            candidates.insert(positive, pos);
            out.push(EvalInstance { query: q, candidates, positive });
        }
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::graph::GraphMeta;
    use crate::rng::stream;

    fn graph(n: usize, edges: &[Edge]) -> TextGraph {
        let meta = GraphMeta { seed: 0, vocab_size: 100, generator: None, clusters: None, warnings: vec![] };
        TextGraph::new((0..n).map(|i| vec![4 + i as u32]).collect(), edges, meta).unwrap()
    }

    #[test]
    fn small_degree_returns_all_and_zero_returns_none() {
        let g = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        let mut rng = stream(0, &[]);
        let mut all = sample_neighbors(&g, 0, 5, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![1, 2, 3]);
        assert!(sample_neighbors(&g, 0, 0, &mut rng).unwrap().is_empty());
        assert!(matches!(sample_neighbors(&g, 7, 1, &mut rng), Err(GfkError::UnknownNode(7))));
    }

    #[test]
    fn single_edge_pair_has_empty_neighbourhoods() {
        let g = graph(2, &[(0, 1)]);
        let pairs = build_link_pairs(&g, &g.edges(), 5, false, NaiveMode::Redraw, &mut stream(1, &[])).unwrap();
        assert_eq!(pairs, vec![TrainPair { query: 0, key: 1, query_neighbours: vec![], key_neighbours: vec![] }]);
    }

    #[test]
    fn triangle_samples_exclude_partner() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let pairs = build_link_pairs(&g, &g.edges(), 5, true, NaiveMode::Redraw, &mut stream(2, &[])).unwrap();
        assert_eq!(pairs.len(), 6);
        for p in pairs {
            // In a triangle the only non-partner neighbour is the third vertex.
            let third = 3 - p.query - p.key;
            assert_eq!(p.query_neighbours, vec![third]);
            assert_eq!(p.key_neighbours, vec![third]);
        }
    }

    #[test]
    fn star_graph_drop_and_redraw() {
        // Hub 0 with leaves 1..=4: every leaf's only neighbour is the hub.
        let g = graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let edges = g.edges();
        let samples = |rng: &mut _| {
            edges
                .iter()
                .map(|&(q, k)| (sample_neighbors(&g, q, 4, rng).unwrap(), sample_neighbors(&g, k, 4, rng).unwrap()))
                .collect::<Vec<_>>()
        };
        let mut rng = stream(3, &[]);
        let s = samples(&mut rng);
        assert!(filter_naive_pairs(&edges, &g, s, NaiveMode::Drop, &mut rng).unwrap().is_empty());
        let s = samples(&mut rng);
        let pairs = filter_naive_pairs(&edges, &g, s, NaiveMode::Redraw, &mut rng).unwrap();
        assert_eq!(pairs.len(), 4);
        for p in pairs {
            let mut qn = p.query_neighbours.clone();
            qn.sort_unstable();
            let expect: Vec<u64> = (1..=4).filter(|&l| l != p.key).collect();
            assert_eq!(qn, expect);
            assert!(p.key_neighbours.is_empty());
        }
    }

    #[test]
    fn disjoint_neighbourhoods_are_kept_in_drop_mode() {
        let g = graph(4, &[(0, 1), (0, 2), (1, 3)]);
        let samples = vec![(vec![2], vec![3])];
        let pairs = filter_naive_pairs(&[(0, 1)], &g, samples, NaiveMode::Drop, &mut stream(0, &[])).unwrap();
        assert_eq!(pairs.len(), 1);
    }

    #[test]
    fn path_negative_is_the_far_node() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let opts = EvalOptions { negatives: 1, exclude_adjacent: true, both_orientations: false };
        let (inst, warn) = make_eval_instances(&g, &[(0, 1)], &opts, &mut stream(4, &[])).unwrap();
        assert!(warn.is_empty());
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].positive_node(), 1);
        let mut c = inst[0].candidates.clone();
        c.sort_unstable();
        assert_eq!(c, vec![1, 2]);
        // From the middle node there is no non-adjacent node left.
        let (inst, warn) = make_eval_instances(&g, &[(1, 2)], &opts, &mut stream(4, &[])).unwrap();
        assert!(inst.is_empty());
        assert_eq!(warn.len(), 1);
    }

    #[test]
    fn sampler_is_stable_per_node() {
        let g = graph(6, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]);
        let s = NeighbourhoodSampler::new(&g, 2, 4, 9);
        let a = s.input(0).unwrap();
        assert_eq!(a, s.input(0).unwrap());
        assert_eq!(a.len(), 3);
        assert_eq!(a.nodes[0], vec![crate::tokens::CLS, 4]);
    }
}
