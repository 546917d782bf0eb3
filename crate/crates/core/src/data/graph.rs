use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::tokens::CLS;

use super::synth::SynthConfig;

pub type Edge = (u64, u64);

/// Provenance stored next to a graph file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub seed: u64,
    pub vocab_size: usize,
    pub generator: Option<SynthConfig>,
    /// Cluster of every node, when generated.
    pub clusters: Option<Vec<u32>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Nodes carrying token sequences (without `[CLS]`) and a symmetric
/// adjacency. Node ids are `0..node_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextGraph {
    texts: Vec<Vec<u32>>,
    adjacency: Vec<Vec<u64>>,
    pub meta: GraphMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSplits {
    pub train: Vec<Edge>,
    pub valid: Vec<Edge>,
    pub test: Vec<Edge>,
}

impl TextGraph {
    /// Builds a graph from node texts and an undirected edge list.
    pub fn new(texts: Vec<Vec<u32>>, edges: &[Edge], meta: GraphMeta) -> Result<Self> {
        let n = texts.len() as u64;
        let mut adjacency = vec![Vec::new(); texts.len()];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(GfkError::UnknownNode(u.max(v)));
            }
            if u == v {
                return Err(GfkError::Format { what: "graph", detail: format!("self-loop on node {u}") });
            }
            adjacency[u as usize].push(v);
            adjacency[v as usize].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        if let Some(&bad) = texts.iter().flatten().find(|&&t| t as usize >= meta.vocab_size) {
            return Err(GfkError::Range { what: "token id", value: bad as usize, limit: meta.vocab_size });
        }
        Ok(TextGraph { texts, adjacency, meta })
    }

    /// The same nodes with only `edges` kept.
    pub fn with_edges(&self, edges: &[Edge]) -> Result<Self> {
        TextGraph::new(self.texts.clone(), edges, self.meta.clone())
    }

    pub fn node_count(&self) -> usize {
        self.texts.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    fn check(&self, node: u64) -> Result<usize> {
        if (node as usize) < self.texts.len() {
            Ok(node as usize)
        } else {
            Err(GfkError::UnknownNode(node))
        }
    }

    pub fn text(&self, node: u64) -> Result<&[u32]> {
        Ok(&self.texts[self.check(node)?])
    }

    pub fn neighbours(&self, node: u64) -> Result<&[u64]> {
        Ok(&self.adjacency[self.check(node)?])
    }

    pub fn degree(&self, node: u64) -> Result<usize> {
        Ok(self.neighbours(node)?.len())
    }

    pub fn has_edge(&self, u: u64, v: u64) -> bool {
        self.adjacency.get(u as usize).is_some_and(|l| l.binary_search(&v).is_ok())
    }

    /// Every edge once, as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (u, list) in self.adjacency.iter().enumerate() {
            out.extend(list.iter().filter(|&&v| v > u as u64).map(|&v| (u as u64, v)));
        }
        out
    }

    /// Model input sequence: `[CLS]` followed by at most `max_tokens − 1`
    /// text tokens.
    pub fn sequence(&self, node: u64, max_tokens: usize) -> Result<Vec<u32>> {
        let text = self.text(node)?;
        let keep = text.len().min(max_tokens.saturating_sub(1));
        Ok(std::iter::once(CLS).chain(text[..keep].iter().copied()).collect())
    }

    /// Full scan of the adjacency invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for (u, list) in self.adjacency.iter().enumerate() {
            for (i, &v) in list.iter().enumerate() {
                let bad = |detail: String| Err(GfkError::Format { what: "graph", detail });
                if v == u as u64 {
                    return bad(format!("self-loop on {u}"));
                }
                if v as usize >= self.texts.len() {
                    return bad(format!("edge {u}-{v} to missing node"));
                }
                if i > 0 && list[i - 1] >= v {
                    return bad(format!("adjacency of {u} not strictly sorted"));
                }
                if !self.has_edge(v, u as u64) {
                    return bad(format!("edge {u}-{v} not symmetric"));
                }
            }
        }
        Ok(())
    }

    /// Line-oriented text form: `#NODE id tok...` lines, then `#EDGE u v`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, text) in self.texts.iter().enumerate() {
            out.push_str("#NODE ");
            write!(out, "{id}").expect("string write");
            for t in text {
                write!(out, " {t}").expect("string write");
            }
            out.push('\n');
        }
        for (u, v) in self.edges() {
            writeln!(out, "#EDGE {u} {v}").expect("string write");
        }
        out
    }

    pub fn from_text(text: &str, meta: GraphMeta) -> Result<Self> {
        let bad = |line: usize, detail: &str| GfkError::Format { what: "graph file", detail: format!("line {line}: {detail}") };
        let mut texts = Vec::new();
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_ascii_whitespace();
            let num = |s: Option<&str>| s.and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| bad(i + 1, "expected integer"));
            match parts.next() {
                Some("#NODE") => {
                    let id = num(parts.next())?;
                    if id as usize != texts.len() {
                        return Err(bad(i + 1, "node ids must be dense and ascending"));
                    }
                    let toks = parts
                        .map(|t| t.parse::<u32>().map_err(|_| bad(i + 1, "bad token id")))
                        .collect::<Result<Vec<_>>>()?;
                    texts.push(toks);
                }
                Some("#EDGE") => {
                    let u = num(parts.next())?;
                    let v = num(parts.next())?;
                    edges.push((u, v));
                }
                None => {}
                Some(other) => return Err(bad(i + 1, &format!("unknown record `{other}`"))),
            }
        }
        TextGraph::new(texts, &edges, meta)
    }

    /// Writes `graph.txt`, `graph.json`, and the split edge lists into `dir`.
    pub fn save(&self, dir: &Path, splits: Option<&EdgeSplits>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GfkError::io(dir, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| GfkError::io(&path, e))
        };
        write("graph.txt", self.to_text())?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        write("graph.json", meta)?;
        if let Some(s) = splits {
            write("train.edges", edges_to_text(&s.train))?;
            write("valid.edges", edges_to_text(&s.valid))?;
            write("test.edges", edges_to_text(&s.test))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| GfkError::io(&path, e))
        };
        let meta: GraphMeta = serde_json::from_str(&read("graph.json")?)?;
        TextGraph::from_text(&read("graph.txt")?, meta)
    }
}

pub fn edges_to_text(edges: &[Edge]) -> String {
    edges.iter().map(|(u, v)| format!("{u} {v}\n")).collect()
}

pub fn edges_from_text(text: &str) -> Result<Vec<Edge>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_ascii_whitespace().map(str::parse::<u64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(u)), Some(Ok(v)), None) => Ok((u, v)),
                _ => Err(GfkError::Format { what: "edge list", detail: format!("line {}: `{l}`", i + 1) }),
            }
        })
        .collect()
}

/// A graph with its edge splits and the training-only view neighbourhoods
/// are drawn from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: TextGraph,
    pub splits: EdgeSplits,
    pub train_graph: TextGraph,
}

impl Dataset {
    pub fn new(graph: TextGraph, splits: EdgeSplits) -> Result<Self> {
        for &(u, v) in splits.train.iter().chain(&splits.valid).chain(&splits.test) {
            if !graph.has_edge(u, v) {
                return Err(GfkError::Format { what: "edge split", detail: format!("{u}-{v} is not an edge of the graph") });
            }
        }
        let train_graph = graph.with_edges(&splits.train)?;
        Ok(Dataset { graph, splits, train_graph })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Dataset::new(TextGraph::load(dir)?, EdgeSplits::load(dir)?)
    }
}

impl EdgeSplits {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| GfkError::io(&path, e)).and_then(|t| edges_from_text(&t))
        };
        Ok(EdgeSplits { train: read("train.edges")?, valid: read("valid.edges")?, test: read("test.edges")? })
    }
}
