use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Aggregator, ModelConfig};
use crate::error::{GfkError, Result};
use crate::layers::{
    EmbeddingTable, GnnWeights, LayerNormWeights, Linear, MhaWeights, RelationBias, TransformerLayerWeights,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const TENSOR_FILE: &str = "tensors.gfkt";

/// Parameters of the neighbour-combination head used by cascaded models.
#[derive(Clone, Debug, PartialEq)]
pub enum AggregatorWeights<T> {
    /// `[center ; pooled] → d` affine map (max, mean, att).
    Combine(Linear<T>),
    /// Query/key projections for attention over all nodes.
    Gat { query: T, key: T },
}

/// The full weight tree of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub embeddings: EmbeddingTable<T>,
    pub layers: Vec<TransformerLayerWeights<T>>,
    pub gnn: Vec<GnnWeights<T>>,
    pub aggregator: Option<AggregatorWeights<T>>,
}

/// Role of a parameter, which decides its initial value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RelationBias,
}

impl<T> Weights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            embeddings: self.embeddings.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            gnn: self.gnn.iter().map(|g| g.map(f)).collect(),
            aggregator: self.aggregator.as_ref().map(|a| match a {
                AggregatorWeights::Combine(l) => AggregatorWeights::Combine(l.map(f)),
                AggregatorWeights::Gat { query, key } => AggregatorWeights::Gat { query: f(query), key: f(key) },
            }),
        }
    }

    /// Visits every parameter in a fixed order with its dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        self.embeddings.visit("embeddings", f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        for (i, g) in self.gnn.iter().enumerate() {
            g.visit(&format!("gnn.{i}"), f);
        }
        match &self.aggregator {
            Some(AggregatorWeights::Combine(l)) => l.visit("aggregator.combine", f),
            Some(AggregatorWeights::Gat { query, key }) => {
                f("aggregator.query", query);
                f("aggregator.key", key);
            }
            None => {}
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        self.embeddings.visit_mut("embeddings", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        for (i, g) in self.gnn.iter_mut().enumerate() {
            g.visit_mut(&format!("gnn.{i}"), f);
        }
        match &mut self.aggregator {
            Some(AggregatorWeights::Combine(l)) => l.visit_mut("aggregator.combine", f),
            Some(AggregatorWeights::Gat { query, key }) => {
                f("aggregator.query", query);
                f("aggregator.key", key);
            }
            None => {}
        }
    }
}

impl<T: Clone> Weights<T> {
    /// Parameters in visiting order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t.clone()));
        out
    }
}

impl Weights<Tensor> {
    /// Builds the tree for `cfg`, asking `make` for every parameter.
    pub fn build(cfg: &ModelConfig, make: &mut impl FnMut(InitKind, Vec<usize>) -> Tensor) -> Self {
        let d = cfg.hidden;
        let linear = |make: &mut dyn FnMut(InitKind, Vec<usize>) -> Tensor, i: usize, o: usize, bias: bool| Linear {
            weight: make(InitKind::Weight, vec![i, o]),
            bias: bias.then(|| make(InitKind::Bias, vec![o])),
        };
        let embeddings = EmbeddingTable {
            word: make(InitKind::Weight, vec![cfg.vocab_size, d]),
            position: make(InitKind::Weight, vec![cfg.max_tokens, d]),
        };
        let layers = (0..cfg.layers)
            .map(|_| TransformerLayerWeights {
                attention: MhaWeights {
                    heads: cfg.heads,
                    query: linear(make, d, d, true),
                    // A key bias shifts every score of a query row equally, so
                    // softmax cancels it and it would never receive gradient.
                    key: linear(make, d, d, false),
                    value: linear(make, d, d, true),
                    output: Some(linear(make, d, d, true)),
                },
                attention_norm: LayerNormWeights {
                    gamma: make(InitKind::Gamma, vec![d]),
                    beta: make(InitKind::Beta, vec![d]),
                },
                ffn_in: linear(make, d, 4 * d, true),
                ffn_out: linear(make, 4 * d, d, true),
                ffn_norm: LayerNormWeights {
                    gamma: make(InitKind::Gamma, vec![d]),
                    beta: make(InitKind::Beta, vec![d]),
                },
            })
            .collect();
        let gnn = (0..cfg.gnn_sets())
            .map(|_| GnnWeights {
                mha: MhaWeights {
                    heads: cfg.heads,
                    query: linear(make, d, d, false),
                    key: linear(make, d, d, false),
                    value: linear(make, d, d, false),
                    output: None,
                },
                bias: cfg
                    .relation_bias
                    .then(|| RelationBias { values: make(InitKind::RelationBias, vec![cfg.heads, 3]) }),
            })
            .collect();
        let aggregator = match cfg.aggregator {
            Aggregator::Nested | Aggregator::None => None,
            Aggregator::Max | Aggregator::Mean | Aggregator::Att => {
                Some(AggregatorWeights::Combine(linear(make, 2 * d, d, true)))
            }
            Aggregator::Gat => Some(AggregatorWeights::Gat {
                query: make(InitKind::Weight, vec![d, d]),
                key: make(InitKind::Weight, vec![d, d]),
            }),
        };
        Weights { embeddings, layers, gnn, aggregator }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    version: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Owned model parameters plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct ParamSet {
    config: ModelConfig,
    weights: Weights<Tensor>,
    version: OnceLock<u64>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.weights == other.weights
    }
}

impl ParamSet {
    /// Truncated-normal weights (resampled beyond two standard deviations),
    /// zero biases, unit LayerNorm gains and zero relation biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let normal = Normal::new(0.0, std).map_err(|e| GfkError::Config(e.to_string()))?;
        let weights = Weights::build(config, &mut |kind, shape| match kind {
            InitKind::Weight => {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("finite samples")
            }
            InitKind::Gamma => Tensor::full(&shape, 1.0),
            InitKind::Bias | InitKind::Beta | InitKind::RelationBias => Tensor::zeros(&shape),
        });
        Ok(ParamSet { config: config.clone(), weights, version: OnceLock::new() })
    }

    /// Wraps an existing weight tree after checking it against `config`.
    pub fn from_weights(config: &ModelConfig, weights: Weights<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = Weights::build(config, &mut |_, shape| Tensor::zeros(&shape));
        let mut want = Vec::new();
        expected.visit(&mut |n, t| want.push((n.to_string(), t.shape().to_vec())));
        let mut got = Vec::new();
        weights.visit(&mut |n, t| got.push((n.to_string(), t.shape().to_vec())));
        if want != got {
            return Err(GfkError::Contract("weight tree does not match the model configuration".into()));
        }
        Ok(ParamSet { config: config.clone(), weights, version: OnceLock::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    /// Mutable access; the model version is recomputed afterwards.
    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        self.version = OnceLock::new();
        &mut self.weights
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.weights.visit(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.weights.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Content hash of the configuration and every parameter value.
    pub fn version(&self) -> u64 {
        *self.version.get_or_init(|| {
            let mut h = Sha256::new();
            h.update(serde_json::to_vec(&self.config).expect("config serialises"));
            self.weights.visit(&mut |name, t| {
                h.update(name.as_bytes());
                for &e in t.shape() {
                    h.update((e as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            });
            let digest = h.finalize();
            u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
        })
    }

    /// Registers every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Weights<Var> {
        self.weights.map(&mut |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Writes `manifest.json` and `tensors.gfkt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GfkError::io(dir, e))?;
        let mut tensors = Vec::new();
        self.weights.visit(&mut |n, t| tensors.push(ManifestEntry { name: n.to_string(), shape: t.shape().to_vec() }));
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            version: format!("{:016x}", self.version()),
            tensors,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| GfkError::io(&path, e))?;

        let path = dir.join(TENSOR_FILE);
        let file = File::create(&path).map_err(|e| GfkError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut result = Ok(());
        self.weights.visit(&mut |_, t| {
            if result.is_ok() {
                result = t.write_to(&mut w);
            }
        });
        result.and_then(|_| w.flush()).map_err(|e| GfkError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| GfkError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(GfkError::Format {
                what: "checkpoint",
                detail: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let path = dir.join(TENSOR_FILE);
        let file = File::open(&path).map_err(|e| GfkError::io(&path, e))?;
        let mut r = BufReader::new(file);
        let mut weights = Weights::build(&manifest.config, &mut |_, shape| Tensor::zeros(&shape));
        let mut entries = manifest.tensors.iter();
        let mut result = Ok(());
        weights.visit_mut(&mut |name, slot| {
            if result.is_err() {
                return;
            }
            result = (|| {
                let entry = entries.next().ok_or_else(|| GfkError::Format {
                    what: "checkpoint",
                    detail: format!("manifest lacks `{name}`"),
                })?;
                let t = Tensor::read_from(&mut r)?;
                if entry.name != name || entry.shape != slot.shape() || t.shape() != slot.shape() {
                    return Err(GfkError::Format {
                        what: "checkpoint",
                        detail: format!("entry `{}` {:?} does not fit `{name}` {:?}", entry.name, t.shape(), slot.shape()),
                    });
                }
                *slot = t;
                Ok(())
            })();
        });
        result?;
        if entries.next().is_some() {
            return Err(GfkError::Format { what: "checkpoint", detail: "manifest lists extra tensors".into() });
        }
        let params = ParamSet::from_weights(&manifest.config, weights)?;
        if format!("{:016x}", params.version()) != manifest.version {
            return Err(GfkError::Format { what: "checkpoint", detail: "content hash does not match manifest".into() });
        }
        Ok(params)
    }
}
