//! The nested graph-transformer encoder, its unidirectional variant with a
//! neighbour cache, and the cascaded baselines.

mod cache;
mod config;
mod encode;
mod input;
mod params;

pub use cache::{cache_lookup_or_encode, NeighborCache};
pub use config::{Aggregator, Mode, ModelConfig};
pub use encode::{
    aggregate_text, cascaded_encode, encode_graph, encode_graph_traced, encode_graphs, encode_on_tape,
    encode_plain_stack, plain_stacks, text_embeddings, PlainStack,
};
pub use input::{validate_sequence, GraphInput};
pub use params::{AggregatorWeights, InitKind, ParamSet, Weights, CHECKPOINT_FORMAT_VERSION};
