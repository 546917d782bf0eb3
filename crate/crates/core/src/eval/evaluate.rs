use std::collections::HashMap;

use rand::Rng;

use crate::data::{EvalInstance, TextGraph};
use crate::error::{GfkError, Result};
use crate::model::{encode_graphs, GraphInput, NeighborCache, ParamSet};
use crate::rng::stream;

use super::metrics::{rank_metrics, RankReport};

/// Which side of a ranking problem an input is encoded for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Key,
}

/// Anything that maps inputs to embeddings. Encoders must be deterministic:
/// the evaluator encodes every distinct node once per role.
pub trait Encoder {
    fn encode(&mut self, role: Role, inputs: &[&GraphInput]) -> Result<Vec<Vec<f64>>>;
}

/// A trained model; the neighbour cache is used when present.
pub struct ModelEncoder<'p> {
    pub params: &'p ParamSet,
    pub cache: Option<NeighborCache>,
}

impl<'p> ModelEncoder<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        ModelEncoder { params, cache: None }
    }
}

impl Encoder for ModelEncoder<'_> {
    fn encode(&mut self, _role: Role, inputs: &[&GraphInput]) -> Result<Vec<Vec<f64>>> {
        let out = encode_graphs(inputs, self.params, self.cache.as_mut())?;
        Ok(out.into_iter().map(|t| t.into_data()).collect())
    }
}

/// Scores a query against a key by the query's adjacency row, so every true
/// neighbour scores 1 and everything else 0.
pub struct AdjacencyOracle<'g> {
    pub graph: &'g TextGraph,
}

impl Encoder for AdjacencyOracle<'_> {
    fn encode(&mut self, role: Role, inputs: &[&GraphInput]) -> Result<Vec<Vec<f64>>> {
        let n = self.graph.node_count();
        inputs
            .iter()
            .map(|g| {
                let id = g.node_ids.as_ref().and_then(|ids| ids.first().copied());
                let id = id.ok_or_else(|| GfkError::Contract("oracle encoder needs node ids".into()))?;
                let mut v = vec![0.0; n];
                match role {
                    Role::Query => self.graph.neighbours(id)?.iter().for_each(|&u| v[u as usize] = 1.0),
                    Role::Key => *v.get_mut(id as usize).ok_or(GfkError::UnknownNode(id))? = 1.0,
                }
                Ok(v)
            })
            .collect()
    }
}

/// Independent Gaussian embedding per node, keyed by id.
pub struct RandomEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl Encoder for RandomEncoder {
    fn encode(&mut self, _role: Role, inputs: &[&GraphInput]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .map(|g| {
                let id = g.node_ids.as_ref().and_then(|ids| ids.first().copied()).unwrap_or(0);
                let mut rng = stream(self.seed, &[id]);
                Ok((0..self.dim).map(|_| rng.random::<f64>() - 0.5).collect())
            })
            .collect()
    }
}

/// Ranks every instance by inner product. `input` turns a node id into the
/// model input used for it (e.g. a neighbourhood sampler, possibly
/// truncated); it must be deterministic.
pub fn evaluate_model(
    encoder: &mut dyn Encoder,
    instances: &[EvalInstance],
    input: &dyn Fn(u64) -> Result<GraphInput>,
    batch_size: usize,
) -> Result<RankReport> {
    let batch_size = batch_size.max(1);
    let mut wanted: Vec<(Role, u64, usize)> = Vec::new();
    let mut index: HashMap<(Role, u64), usize> = HashMap::new();
    for (i, inst) in instances.iter().enumerate() {
        let nodes = std::iter::once((Role::Query, inst.query)).chain(inst.candidates.iter().map(|&c| (Role::Key, c)));
        for key in nodes {
            index.entry(key).or_insert_with(|| {
                wanted.push((key.0, key.1, i));
                wanted.len() - 1
            });
        }
    }
    let wrap = |i: usize, e: GfkError| GfkError::Instance { index: i, source: Box::new(e) };
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(wanted.len());
    for role in [Role::Query, Role::Key] {
        let todo: Vec<&(Role, u64, usize)> = wanted.iter().filter(|w| w.0 == role).collect();
        for chunk in todo.chunks(batch_size) {
            let inputs = chunk.iter().map(|&&(_, n, i)| input(n).map_err(|e| wrap(i, e))).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&GraphInput> = inputs.iter().collect();
            let out = encoder.encode(role, &refs).map_err(|e| wrap(chunk[0].2, e))?;
            if out.len() != chunk.len() {
                return Err(GfkError::Contract(format!("encoder returned {} embeddings for {} inputs", out.len(), chunk.len())));
            }
            for (&&(r, n, _), e) in chunk.iter().zip(out) {
                embeddings.push(e);
                let slot = embeddings.len() - 1;
                *index.get_mut(&(r, n)).expect("indexed above") = slot;
            }
        }
    }
    let mut ranks = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let q = &embeddings[index[&(Role::Query, inst.query)]];
        let scores: Vec<f64> = inst
            .candidates
            .iter()
            .map(|c| embeddings[index[&(Role::Key, *c)]].iter().zip(q).map(|(a, b)| a * b).sum())
            .collect();
        ranks.push(rank_metrics(&scores, inst.positive).map_err(|e| wrap(i, e))?.rank);
    }
    RankReport::from_ranks(&ranks)
}
