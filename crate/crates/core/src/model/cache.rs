//! Storage of messenger-free neighbour states for unidirectional models.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{GfkError, Result};
use crate::tensor::Tensor;

use super::config::{Aggregator, Mode};
use super::encode::plain_stacks;
use super::params::ParamSet;

#[derive(Clone, Debug)]
struct Entry {
    version: u64,
    states: Vec<Tensor>,
}

/// Maps node id to its `z^1..z^{L−1}` under one model version.
///
/// Optionally pinned to a model version, in which case encoding with any
/// other parameters is refused. With a backing file every insertion is
/// appended as `(node u64, version u64, (L−1)·d f64)`, all little-endian.
#[derive(Debug, Default)]
pub struct NeighborCache {
    entries: HashMap<u64, Entry>,
    hits: u64,
    misses: u64,
    pinned: Option<u64>,
    log: Option<BufWriter<File>>,
}

impl NeighborCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// A cache that only serves `params`.
    pub fn pinned_to(params: &ParamSet) -> Self {
        NeighborCache { pinned: Some(params.version()), ..Self::default() }
    }

    /// Opens (or creates) an append-only cache file holding `depth` states
    /// of width `width` per record, loading existing records; later records
    /// for a node override earlier ones.
    pub fn open(path: &Path, depth: usize, width: usize) -> Result<Self> {
        let mut cache = Self::default();
        match File::open(path) {
            Ok(f) => {
                let mut r = BufReader::new(f);
                let mut head = [0u8; 16];
                let mut body = vec![0u8; depth * width * 8];
                loop {
                    match r.read_exact(&mut head) {
                        Ok(()) => {}
                        Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                        Err(e) => return Err(GfkError::CacheIo(e)),
                    }
                    r.read_exact(&mut body).map_err(|e| GfkError::Format {
                        what: "neighbour cache",
                        detail: format!("truncated record: {e}"),
                    })?;
                    let node = u64::from_le_bytes(head[..8].try_into().expect("8 bytes"));
                    let version = u64::from_le_bytes(head[8..].try_into().expect("8 bytes"));
                    let values: Vec<f64> =
                        body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    let states = values
                        .chunks(width)
                        .map(|c| Tensor::vector(c.to_vec()))
                        .collect::<Result<Vec<_>>>()?;
                    cache.entries.insert(node, Entry { version, states });
                }
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {}
            Err(e) => return Err(GfkError::CacheIo(e)),
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(GfkError::CacheIo)?;
        cache.log = Some(BufWriter::new(f));
        Ok(cache)
    }

    pub fn pinned_version(&self) -> Option<u64> {
        self.pinned
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The stored states of `node` if they were built under `version`.
    pub fn get(&self, node: u64, version: u64) -> Option<&[Tensor]> {
        self.entries.get(&node).filter(|e| e.version == version).map(|e| e.states.as_slice())
    }

    fn insert(&mut self, node: u64, version: u64, states: Vec<Tensor>) -> Result<()> {
        if let Some(log) = &mut self.log {
            let mut write = || -> std::io::Result<()> {
                log.write_all(&node.to_le_bytes())?;
                log.write_all(&version.to_le_bytes())?;
                for s in &states {
                    for v in s.data() {
                        log.write_all(&v.to_le_bytes())?;
                    }
                }
                Ok(())
            };
            write().map_err(GfkError::CacheIo)?;
        }
        self.entries.insert(node, Entry { version, states });
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        match &mut self.log {
            Some(log) => log.flush().map_err(GfkError::CacheIo),
            None => Ok(()),
        }
    }

    /// Returns the states of `node`, encoding and storing them on a miss or
    /// when the stored entry belongs to other parameters.
    pub fn lookup_or_encode(&mut self, node: u64, tokens: &[u32], params: &ParamSet) -> Result<Vec<Tensor>> {
        Ok(self.lookup_or_encode_many(&[(node, tokens)], params)?.remove(0))
    }

    /// Batched [`lookup_or_encode`](Self::lookup_or_encode): all misses are
    /// encoded in one pass. A node requested twice counts as one miss and
    /// one hit.
    pub fn lookup_or_encode_many(&mut self, nodes: &[(u64, &[u32])], params: &ParamSet) -> Result<Vec<Vec<Tensor>>> {
        let cfg = params.config();
        if cfg.mode != Mode::Unidirectional || cfg.aggregator != Aggregator::Nested {
            return Err(GfkError::Contract("neighbour caching requires a unidirectional nested model".into()));
        }
        let version = params.version();
        let mut pending: Vec<(u64, &[u32])> = Vec::new();
        for &(node, tokens) in nodes {
            if self.get(node, version).is_some() || pending.iter().any(|p| p.0 == node) {
                self.hits += 1;
            } else {
                self.misses += 1;
                pending.push((node, tokens));
            }
        }
        if !pending.is_empty() {
            let seqs: Vec<&[u32]> = pending.iter().map(|p| p.1).collect();
            let states = plain_stacks(&seqs, params, cfg.layers - 1)?;
            for ((node, _), s) in pending.iter().zip(states) {
                self.insert(*node, version, s)?;
            }
            self.flush()?;
        }
        Ok(nodes.iter().map(|(node, _)| self.get(*node, version).expect("just filled").to_vec()).collect())
    }
}

/// Free-function form of [`NeighborCache::lookup_or_encode`].
pub fn cache_lookup_or_encode(
    cache: &mut NeighborCache,
    node: u64,
    tokens: &[u32],
    params: &ParamSet,
) -> Result<Vec<Tensor>> {
    cache.lookup_or_encode(node, tokens, params)
}
