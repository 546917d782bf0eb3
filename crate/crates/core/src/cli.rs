//! The `gfk` command line: configuration resolution and the `gen-data`,
//! `train`, `eval`, `bench` and `inspect` commands.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{generate_synthetic_graph, Dataset, EdgeSplits, SynthConfig, TextGraph};
use crate::error::{GfkError, Result};
use crate::eval::{
    bench_scaling, run_evaluation, AdjacencyOracle, BenchConfig, Encoder, EvalConfig, ModelEncoder, RandomEncoder,
    REPORT_HEADER,
};
use crate::model::{Aggregator, Mode, ModelConfig, NeighborCache, ParamSet};
use crate::rng::{derive_seed, tag};
use crate::training::{train_two_stage, StageConfig, TrainData, TrainOutcome, TrainSchedule};

pub const SEED_ENV: &str = "GFK_SEED";

/// Every setting of a run. Files and flags override these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

/// The defaults are the desk-scale end-to-end setup: a 5,000-node graph and
/// a two-layer model trained for 1,000 polluted and 2,000 clean steps.
impl Default for RunConfig {
    fn default() -> Self {
        let stage = |max_steps| StageConfig { max_steps, patience: 8, ..StageConfig::default() };
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: SynthConfig::default(),
            // At two layers the unidirectional encoder computes the same
            // center embedding as the bidirectional one at about half the cost.
            model: ModelConfig { mode: Mode::Unidirectional, init_std: 0.1, ..ModelConfig::default() },
            train: TrainSchedule { polluted: stage(1000), clean: stage(2000), eval_every: 250, ..TrainSchedule::default() },
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// The training schedule with the run's seed applied.
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule { seed: self.seed, ..self.train.clone() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join("model")
    }
}

fn key_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push(path.clone());
            key_paths(child, &path, out);
        }
    }
}

fn check_keys(file: &Value, defaults: &Value, prefix: &str, all: &[String]) -> Result<()> {
    let (Value::Object(f), Value::Object(d)) = (file, defaults) else { return Ok(()) };
    for (k, v) in f {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            Some(dv) => check_keys(v, dv, &path, all)?,
            None => {
                // Closest leaf name anywhere; ties go to the section the key was written in.
                let split = |p: &str| p.rsplit_once('.').map_or((String::new(), p.to_string()), |(a, b)| (a.into(), b.into()));
                let score = |p: &String| {
                    let (parent, leaf) = split(p);
                    (strsim::levenshtein(&leaf, k), parent != prefix)
                };
                let hint = match all.iter().min_by_key(|p| score(p)) {
                    Some(p) if score(p).0 <= (k.len() / 3).max(2) => format!("; did you mean `{p}`?"),
                    _ => String::new(),
                };
                let valid: Vec<&String> = d.keys().collect();
                let valid = valid.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
                return Err(GfkError::Config(format!("unknown key `{path}`{hint} (valid keys here: {valid})")));
            }
        }
    }
    Ok(())
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves defaults, then the seed from `env_seed`, then the JSON file.
pub fn load_config(path: Option<&Path>, env_seed: Option<&str>) -> Result<RunConfig> {
    let defaults = serde_json::to_value(RunConfig::default())?;
    let mut merged = defaults.clone();
    if let Some(s) = env_seed {
        let seed: u64 = s.trim().parse().map_err(|_| GfkError::Config(format!("{SEED_ENV}=`{s}` is not a u64")))?;
        merged["seed"] = json!(seed);
    }
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| GfkError::io(path, e))?;
        let file: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(&text)
                .map_err(|e| GfkError::Config(format!("{}: invalid JSON: {e}", path.display())))?
        };
        if !file.is_object() {
            return Err(GfkError::Config(format!("{}: expected a JSON object", path.display())));
        }
        let mut all = Vec::new();
        key_paths(&defaults, "", &mut all);
        check_keys(&file, &defaults, "", &all)?;
        merge(&mut merged, file);
    }
    serde_path_to_error::deserialize(merged).map_err(|e| GfkError::Config(format!("at `{}`: {}", e.path(), e.inner())))
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(GfkError::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

macro_rules! say {
    ($($arg:tt)*) => { emit(&format!("{}\n", format_args!($($arg)*))) };
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| GfkError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| GfkError::io(path, e))
}

#[derive(Parser, Debug)]
#[command(name = "gfk", version, about = "Nested graph-transformer encoders for textual graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stages {
    Two,
    One,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Bidirectional,
    Unidirectional,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggregatorArg {
    Nested,
    Max,
    Mean,
    Att,
    Gat,
    None,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum EncoderArg {
    #[default]
    Model,
    /// Scores by true adjacency; every metric should be 1.
    Oracle,
    /// Seeded random embeddings.
    Random,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    share_gnn: Option<Switch>,
    #[arg(long, value_enum)]
    aggregator: Option<AggregatorArg>,
    #[arg(long, value_enum)]
    relation_bias: Option<Switch>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic textual graph and its edge splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        /// Fraction of node tokens drawn from the cluster-agnostic noise.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model on a generated graph.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Graph directory (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// `one` skips the polluted stage.
        #[arg(long, value_enum)]
        stages: Option<Stages>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Rank held-out links and write metric reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory (default `<out>/model`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        encoder: EncoderArg,
        #[arg(long)]
        negatives: Option<usize>,
        /// Neighbour caps to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        caps: Option<Vec<usize>>,
    },
    /// Time the nested encoder against the cascaded baseline.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
        /// Neighbour counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        neighbours: Option<Vec<usize>>,
    },
    /// Summarize a checkpoint or graph directory as JSON.
    Inspect { path: PathBuf },
}

fn resolve(common: &Common, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = load_config(common.config.as_deref(), env_seed)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_model_flags(m: &mut ModelConfig, f: &ModelFlags) {
    if let Some(mode) = f.mode {
        m.mode = match mode {
            ModeArg::Bidirectional => Mode::Bidirectional,
            ModeArg::Unidirectional => Mode::Unidirectional,
        };
    }
    if let Some(s) = f.share_gnn {
        m.share_gnn = s.on();
    }
    if let Some(a) = f.aggregator {
        m.aggregator = match a {
            AggregatorArg::Nested => Aggregator::Nested,
            AggregatorArg::Max => Aggregator::Max,
            AggregatorArg::Mean => Aggregator::Mean,
            AggregatorArg::Att => Aggregator::Att,
            AggregatorArg::Gat => Aggregator::Gat,
            AggregatorArg::None => Aggregator::None,
        };
    }
    if let Some(s) = f.relation_bias {
        m.relation_bias = s.on();
    }
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Runtime(GfkError),
}

impl From<GfkError> for Failure {
    fn from(e: GfkError) -> Self {
        match e {
            GfkError::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

/// Trains `cfg.model` on `ds` and writes the model, log and summary under
/// `out`.
pub fn train_on(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainOutcome> {
    if cfg.model.vocab_size < ds.graph.meta.vocab_size {
        return Err(GfkError::Config(format!(
            "model vocab_size {} is smaller than the graph's {}",
            cfg.model.vocab_size, ds.graph.meta.vocab_size
        )));
    }
    let params = ParamSet::init(&cfg.model, derive_seed(cfg.seed, &[tag::INIT]))?;
    let data = TrainData { graph: &ds.train_graph, train_edges: &ds.splits.train, valid_edges: &ds.splits.valid };
    let outcome = train_two_stage(params, data, &cfg.schedule(), Some(out))?;
    outcome.params.save(&out.join("model"))?;
    write_json(&out.join("train_summary.json"), &json!({ "stages": outcome.stages, "pollution": outcome.pollution }))?;
    Ok(outcome)
}

/// An encoder for `params`, with a pinned neighbour cache when `use_cache`
/// is set and the model supports one.
pub fn model_encoder(params: &ParamSet, use_cache: bool) -> ModelEncoder<'_> {
    let mut e = ModelEncoder::new(params);
    let c = params.config();
    if use_cache && c.mode == Mode::Unidirectional && !c.aggregator.is_cascaded() {
        e.cache = Some(NeighborCache::pinned_to(params));
    }
    e
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let (g, s) = generate_synthetic_graph(&cfg.data, cfg.seed)?;
    g.save(&cfg.data_dir(), Some(&s))?;
    for w in &g.meta.warnings {
        eprintln!("warning: {w}");
    }
    say!(
        "{} nodes, {} edges ({} train / {} valid / {} test) -> {}",
        g.node_count(),
        g.edge_count(),
        s.train.len(),
        s.valid.len(),
        s.test.len(),
        cfg.data_dir().display()
    )?;
    Ok(())
}

fn eval(cfg: &RunConfig, ds: &Dataset, model_dir: &Path, encoder: EncoderArg) -> Result<()> {
    let params;
    let (mut enc, max_tokens, name): (Box<dyn Encoder + '_>, usize, &str) = match encoder {
        EncoderArg::Model => {
            params = ParamSet::load(model_dir)?;
            (Box::new(model_encoder(&params, cfg.eval.use_cache)), params.config().max_tokens, "model")
        }
        EncoderArg::Oracle => (Box::new(AdjacencyOracle { graph: &ds.graph }), cfg.model.max_tokens, "oracle"),
        EncoderArg::Random => {
            let e = RandomEncoder { dim: cfg.model.hidden, seed: derive_seed(cfg.seed, &[tag::BENCH]) };
            (Box::new(e), cfg.model.max_tokens, "random")
        }
    };
    let run = run_evaluation(&cfg.eval, ds, enc.as_mut(), max_tokens, cfg.seed)?;
    let dir = cfg.out_dir.join("eval");
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let sweep: Vec<Value> = run.sweep.iter().map(|(cap, r)| json!({ "cap": cap, "report": r.clone().without_ranks() })).collect();
    write_json(
        &dir.join("report.json"),
        &json!({ "encoder": name, "report": run.report.clone().without_ranks(), "sweep": sweep, "skipped": run.warnings.len() }),
    )?;
    write_text(&dir.join("report.csv"), &run.report.to_csv())?;
    if !run.sweep.is_empty() {
        let mut csv = format!("cap,{REPORT_HEADER}\n");
        for (cap, r) in &run.sweep {
            csv.push_str(&format!("{cap},{}\n", r.csv_row()));
        }
        write_text(&dir.join("sweep.csv"), &csv)?;
    }
    if cfg.eval.dump_ranks {
        let mut csv = String::from("query,positive,rank\n");
        for (inst, rank) in run.instances.iter().zip(&run.report.ranks) {
            csv.push_str(&format!("{},{},{rank}\n", inst.query, inst.positive_node()));
        }
        write_text(&dir.join("ranks.csv"), &csv)?;
    }
    let r = &run.report;
    say!("{} instances: P@1 {:.4}  NDCG {:.4}  MRR {:.4}", r.instances, r.p_at_1, r.ndcg, r.mrr)?;
    for (cap, r) in &run.sweep {
        say!("  cap {cap}: P@1 {:.4}  NDCG {:.4}  MRR {:.4}", r.p_at_1, r.ndcg, r.mrr)?;
    }
    Ok(())
}

fn bench(cfg: &RunConfig) -> Result<()> {
    let report = bench_scaling(&cfg.bench, cfg.seed)?;
    write_text(&cfg.out_dir.join("bench.csv"), &report.to_csv())?;
    write_json(&cfg.out_dir.join("bench.json"), &report)?;
    emit(&report.to_csv())?;
    for f in &report.fits {
        say!("{}: time = {:.3} + {:.3}·N ms, R² = {:.4}", f.mode, f.alpha, f.beta, f.r2)?;
    }
    if !report.memory_tracked {
        eprintln!("note: allocation tracking is not installed; peak_mib is 0");
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let summary = if path.join("manifest.json").is_file() {
        let p = ParamSet::load(path)?;
        let tensors: Vec<Value> = p.named().iter().map(|(n, t)| json!({ "name": n, "shape": t.shape() })).collect();
        json!({
            "kind": "checkpoint",
            "version": format!("{:016x}", p.version()),
            "parameters": p.num_parameters(),
            "config": p.config(),
            "tensors": tensors,
        })
    } else if path.join("graph.json").is_file() {
        let g = TextGraph::load(path)?;
        let degrees: Vec<usize> = (0..g.node_count() as u64).map(|n| g.degree(n).unwrap_or(0)).collect();
        let splits = EdgeSplits::load(path).ok().map(|s| json!({ "train": s.train.len(), "valid": s.valid.len(), "test": s.test.len() }));
        json!({
            "kind": "graph",
            "nodes": g.node_count(),
            "edges": g.edge_count(),
            "mean_degree": 2.0 * g.edge_count() as f64 / g.node_count().max(1) as f64,
            "max_degree": degrees.iter().max().copied().unwrap_or(0),
            "isolated": degrees.iter().filter(|&&d| d == 0).count(),
            "seed": g.meta.seed,
            "vocab_size": g.meta.vocab_size,
            "warnings": g.meta.warnings,
            "splits": splits,
        })
    } else {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest.json or graph.json");
        return Err(GfkError::io(path, e));
    };
    say!("{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn dispatch(command: Command, env_seed: Option<&str>) -> std::result::Result<(), Failure> {
    match command {
        Command::GenData { common, nodes, clusters, noise } => {
            let mut cfg = resolve(&common, env_seed)?;
            cfg.data.nodes = nodes.unwrap_or(cfg.data.nodes);
            cfg.data.clusters = clusters.unwrap_or(cfg.data.clusters);
            cfg.data.noise = noise.unwrap_or(cfg.data.noise);
            cfg.data.validate()?;
            write_json(&cfg.out_dir.join("resolved_config.json"), &cfg)?;
            gen_data(&cfg)?;
        }
        Command::Train { common, model, data, stages, learning_rate, batch_size } => {
            let mut cfg = resolve(&common, env_seed)?;
            apply_model_flags(&mut cfg.model, &model);
            if let Some(Stages::One) = stages {
                cfg.train.polluted.max_steps = 0;
            }
            cfg.train.learning_rate = learning_rate.unwrap_or(cfg.train.learning_rate);
            cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            cfg.model.validate()?;
            cfg.train.validate()?;
            write_json(&cfg.out_dir.join("resolved_config.json"), &cfg)?;
            let ds = Dataset::load(&data.unwrap_or_else(|| cfg.data_dir())).map_err(Failure::Runtime)?;
            let out = train_on(&cfg, &ds, &cfg.out_dir)?;
            for s in &out.stages {
                say!(
                    "stage {}: {} steps, valid {:?} -> {:?}{}",
                    s.stage,
                    s.steps,
                    s.initial_valid,
                    s.final_valid,
                    if s.converged { " (converged)" } else { "" }
                )?;
            }
        }
        Command::Eval { common, data, model, encoder, negatives, caps } => {
            let mut cfg = resolve(&common, env_seed)?;
            cfg.eval.negatives = negatives.unwrap_or(cfg.eval.negatives);
            if let Some(c) = caps {
                cfg.eval.neighbour_caps = c;
            }
            write_json(&cfg.out_dir.join("resolved_config.json"), &cfg)?;
            let ds = Dataset::load(&data.unwrap_or_else(|| cfg.data_dir())).map_err(Failure::Runtime)?;
            let model_dir = model.unwrap_or_else(|| cfg.model_dir());
            eval(&cfg, &ds, &model_dir, encoder).map_err(Failure::Runtime)?;
        }
        Command::Bench { common, reps, neighbours } => {
            let mut cfg = resolve(&common, env_seed)?;
            cfg.bench.reps = reps.unwrap_or(cfg.bench.reps);
            if let Some(n) = neighbours {
                cfg.bench.neighbour_sizes = n;
            }
            write_json(&cfg.out_dir.join("resolved_config.json"), &cfg)?;
            bench(&cfg).map_err(Failure::Runtime)?;
        }
        Command::Inspect { path } => inspect(&path).map_err(Failure::Runtime)?,
    }
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 1 on usage or configuration errors, 2 on runtime
/// failures.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match dispatch(cli.command, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
