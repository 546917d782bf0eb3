//! Textual graphs: synthetic generation, splits, neighbour sampling,
//! training pairs, ranking instances and a word tokenizer.

mod graph;
mod sampling;
mod synth;
mod tokenizer;

pub use graph::{edges_from_text, edges_to_text, Dataset, Edge, EdgeSplits, GraphMeta, TextGraph};
pub use sampling::{
    build_link_pairs, filter_naive_pairs, make_eval_instances, sample_neighbors, EvalInstance, EvalOptions,
    NaiveMode, NeighbourhoodSampler, TrainPair,
};
pub use synth::{generate_synthetic_graph, split_edges, SynthConfig};
pub use tokenizer::{tokenize_text, words, Vocab};
