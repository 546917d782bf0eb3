use serde::{Deserialize, Serialize};

use crate::data::{make_eval_instances, Dataset, EvalInstance, EvalOptions, NeighbourhoodSampler};
use crate::error::Result;
use crate::rng::{stream, tag};

use super::evaluate::{evaluate_model, Encoder};
use super::metrics::RankReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub negatives: usize,
    pub exclude_adjacent: bool,
    pub both_orientations: bool,
    /// Neighbours sampled per node.
    pub neighbours: usize,
    /// Extra passes with each node's neighbourhood truncated to these caps.
    pub neighbour_caps: Vec<usize>,
    pub max_instances: Option<usize>,
    pub batch_size: usize,
    /// Reuse neighbour states across instances for unidirectional models.
    pub use_cache: bool,
    pub dump_ranks: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            negatives: 99,
            exclude_adjacent: true,
            both_orientations: true,
            neighbours: 5,
            neighbour_caps: Vec::new(),
            max_instances: None,
            batch_size: 256,
            use_cache: true,
            dump_ranks: false,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            negatives: self.negatives,
            exclude_adjacent: self.exclude_adjacent,
            both_orientations: self.both_orientations,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub instances: Vec<EvalInstance>,
    pub report: RankReport,
    /// One report per entry of `neighbour_caps`.
    pub sweep: Vec<(usize, RankReport)>,
    pub warnings: Vec<String>,
}

/// Builds the test instances of `ds` and ranks them with `encoder`, once with
/// full neighbourhoods and once per configured cap.
pub fn run_evaluation(
    cfg: &EvalConfig,
    ds: &Dataset,
    encoder: &mut dyn Encoder,
    max_tokens: usize,
    seed: u64,
) -> Result<EvalRun> {
    let (mut instances, warnings) =
        make_eval_instances(&ds.graph, &ds.splits.test, &cfg.options(), &mut stream(seed, &[tag::NEGATIVES]))?;
    if let Some(max) = cfg.max_instances {
        instances.truncate(max);
    }
    let sampler = NeighbourhoodSampler::new(&ds.train_graph, cfg.neighbours, max_tokens, seed);
    let full = |n: u64| sampler.input(n);
    let report = evaluate_model(encoder, &instances, &full, cfg.batch_size)?;
    let mut sweep = Vec::new();
    for &cap in &cfg.neighbour_caps {
        let capped = |n: u64| sampler.input(n).map(|g| g.truncated(cap));
        sweep.push((cap, evaluate_model(encoder, &instances, &capped, cfg.batch_size)?));
    }
    Ok(EvalRun { instances, report, sweep, warnings })
}
