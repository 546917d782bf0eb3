use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{build_link_pairs, Edge, NaiveMode, NeighbourhoodSampler, TextGraph, TrainPair};
use crate::error::{GfkError, Result};
use crate::model::{encode_on_tape, GraphInput, ParamSet};
use crate::rng::{stream, tag};
use crate::tape::Tape;

use super::loss::contrastive_on_tape;
use super::optim::{optimizer_step, AdamConfig, OptimizerState};
use super::pollution::{pollute_input, PollutionStats};

pub const LOG_HEADER: &str = "stage,step,split,loss,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub max_steps: u64,
    /// Validation rounds without an improvement above `min_delta` before
    /// the stage counts as converged.
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { max_steps: 600, patience: 3, min_delta: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Polluted stage; zero steps gives clean-only training.
    pub polluted: StageConfig,
    pub clean: StageConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Neighbour cap used when sampling training neighbourhoods.
    pub neighbours: usize,
    pub eval_every: u64,
    pub valid_pairs: usize,
    /// Also checkpoint every this many steps (0: stage ends only).
    pub checkpoint_every: u64,
    pub naive: NaiveMode,
    pub both_orientations: bool,
    pub divergence_factor: f64,
    pub divergence_window: u64,
    /// Write elapsed milliseconds into the log; when off the column is 0 and
    /// logs are byte-reproducible.
    pub log_wall_time: bool,
    pub adam: AdamConfig,
    /// Taken from the run's global seed rather than the schedule file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            polluted: StageConfig::default(),
            clean: StageConfig::default(),
            learning_rate: 1e-3,
            batch_size: 32,
            neighbours: 5,
            eval_every: 50,
            valid_pairs: 256,
            checkpoint_every: 0,
            naive: NaiveMode::Redraw,
            both_orientations: false,
            divergence_factor: 10.0,
            divergence_window: 100,
            log_wall_time: false,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GfkError::Config(m.into()));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 to provide in-batch negatives");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive");
        }
        Ok(())
    }
}

/// Training inputs: the graph neighbourhoods are sampled from (training
/// edges only) and the labelled links.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub graph: &'a TextGraph,
    pub train_edges: &'a [Edge],
    pub valid_edges: &'a [Edge],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub stage: u8,
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub wall_ms: u64,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.stage, self.step, self.split, self.loss, self.wall_ms)
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{r}\n"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub polluted: bool,
    pub steps: u64,
    pub initial_valid: Option<f64>,
    pub best_valid: Option<f64>,
    pub final_valid: Option<f64>,
    pub converged: bool,
    pub start_version: String,
    pub end_version: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<LogRow>,
    pub stages: Vec<StageSummary>,
    pub pollution: PollutionStats,
}

type Batch = Vec<(GraphInput, GraphInput)>;

struct Trainer<'a> {
    params: ParamSet,
    data: TrainData<'a>,
    schedule: &'a TrainSchedule,
    sampler: NeighbourhoodSampler<'a>,
    optimizer: OptimizerState,
    log: Vec<LogRow>,
    writer: Option<(PathBuf, BufWriter<File>)>,
    checkpoints: Option<PathBuf>,
    started: Instant,
    step: u64,
    pollution: PollutionStats,
}

impl<'a> Trainer<'a> {
    fn record(&mut self, stage: u8, split: Split, loss: f64) -> Result<()> {
        let wall_ms = if self.schedule.log_wall_time { self.started.elapsed().as_millis() as u64 } else { 0 };
        let row = LogRow { stage, step: self.step, split, loss, wall_ms };
        if let Some((path, w)) = &mut self.writer {
            writeln!(w, "{row}").map_err(|e| GfkError::io(path.as_path(), e))?;
        }
        self.log.push(row);
        Ok(())
    }

    fn pair_inputs(&self, pairs: &[TrainPair]) -> Result<Batch> {
        pairs
            .iter()
            .map(|p| {
                Ok((
                    self.sampler.input_with(p.query, &p.query_neighbours)?,
                    self.sampler.input_with(p.key, &p.key_neighbours)?,
                ))
            })
            .collect()
    }

    fn epoch_pairs(&self, stage: u8, epoch: u64) -> Result<Vec<TrainPair>> {
        let s = self.schedule;
        let mut pairs = build_link_pairs(
            self.data.graph,
            self.data.train_edges,
            s.neighbours,
            s.both_orientations,
            s.naive,
            &mut stream(s.seed, &[tag::PAIRS, stage as u64, epoch]),
        )?;
        pairs.shuffle(&mut stream(s.seed, &[tag::SHUFFLE, stage as u64, epoch]));
        if pairs.len() < 2 {
            return Err(GfkError::Config(format!("{} training pairs cannot form a batch", pairs.len())));
        }
        Ok(pairs)
    }

    fn pollute_batch(&mut self, batch: &Batch, tags: &[u64]) -> Result<Batch> {
        let mut rng = stream(self.schedule.seed, tags);
        let vocab = self.params.config().vocab_size;
        let mut out = Vec::with_capacity(batch.len());
        for (q, k) in batch {
            let (q, sq) = pollute_input(q, vocab, &mut rng)?;
            let (k, sk) = pollute_input(k, vocab, &mut rng)?;
            self.pollution += sq;
            self.pollution += sk;
            out.push((q, k));
        }
        Ok(out)
    }

    /// Loss of one batch; with `train` set, also applies an optimizer step.
    fn batch_loss(&mut self, batch: &Batch, train: bool) -> Result<f64> {
        let cfg = self.params.config().clone();
        let b = batch.len();
        let inputs: Vec<&GraphInput> = batch.iter().map(|(q, _)| q).chain(batch.iter().map(|(_, k)| k)).collect();
        let mut tape = Tape::with_precision(cfg.precision);
        let w = self.params.bind(&mut tape, train);
        let emb = encode_on_tape(&mut tape, &cfg, &w, &inputs)?;
        let q = tape.gather_rows(emb, (0..b).map(Some).collect())?;
        let k = tape.gather_rows(emb, (b..2 * b).map(Some).collect())?;
        let loss_var = contrastive_on_tape(&mut tape, q, k)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(GfkError::NonFinite("training loss"));
        }
        if train {
            tape.backward(loss_var)?;
            let mut grads: Vec<Vec<f64>> = w
                .flatten()
                .into_iter()
                .map(|v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
                .collect();
            drop(tape);
            optimizer_step(&mut self.params, &mut grads, &mut self.optimizer, self.schedule.learning_rate)?;
        }
        Ok(loss)
    }

    fn valid_loss(&mut self, batches: &[Batch]) -> Result<Option<f64>> {
        if batches.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for b in batches {
            total += self.batch_loss(b, false)?;
        }
        Ok(Some(total / batches.len() as f64))
    }

    fn checkpoint(&self, name: &str) -> Result<()> {
        match &self.checkpoints {
            Some(dir) => self.params.save(&dir.join(name)),
            None => Ok(()),
        }
    }

    fn run_stage(&mut self, stage: u8, polluted: bool, cfg: &StageConfig, valid: &[Batch]) -> Result<StageSummary> {
        let s = self.schedule;
        let start_version = format!("{:016x}", self.params.version());
        let valid: Vec<Batch> = if polluted {
            let mut out = Vec::with_capacity(valid.len());
            for (i, b) in valid.iter().enumerate() {
                out.push(self.pollute_batch(b, &[tag::VALID, stage as u64, i as u64])?);
            }
            out
        } else {
            valid.to_vec()
        };
        let initial_valid = self.valid_loss(&valid)?;
        if let Some(v) = initial_valid {
            self.record(stage, Split::Valid, v)?;
        }
        let (mut best, mut final_valid, mut stale, mut converged) = (initial_valid, initial_valid, 0u32, false);
        let (mut epoch, mut cursor, mut pairs) = (0u64, 0usize, Vec::new());
        let (mut first_loss, mut high_run) = (None::<f64>, 0u64);
        let mut done = 0u64;
        while done < cfg.max_steps {
            if cursor >= pairs.len() || pairs.len() - cursor < s.batch_size.min(pairs.len()) {
                pairs = self.epoch_pairs(stage, epoch)?;
                epoch += 1;
                cursor = 0;
            }
            let end = (cursor + s.batch_size).min(pairs.len());
            let mut batch = self.pair_inputs(&pairs[cursor..end])?;
            cursor = end;
            self.step += 1;
            done += 1;
            if polluted {
                batch = self.pollute_batch(&batch, &[tag::POLLUTION, stage as u64, self.step])?;
            }
            let loss = self.batch_loss(&batch, true)?;
            self.record(stage, Split::Train, loss)?;

            let initial = *first_loss.get_or_insert(loss);
            high_run = if loss > s.divergence_factor * initial { high_run + 1 } else { 0 };
            if high_run >= s.divergence_window {
                return Err(GfkError::Divergence { step: self.step, loss, initial });
            }
            if s.checkpoint_every > 0 && self.step % s.checkpoint_every == 0 {
                self.checkpoint(&format!("step-{:06}", self.step))?;
            }
            if done % s.eval_every == 0 || done == cfg.max_steps {
                if let Some(v) = self.valid_loss(&valid)? {
                    self.record(stage, Split::Valid, v)?;
                    final_valid = Some(v);
                    let b = best.unwrap_or(f64::INFINITY);
                    if b - v > cfg.min_delta {
                        best = Some(v);
                        stale = 0;
                    } else {
                        best = Some(b.min(v));
                        stale += 1;
                        if stale >= cfg.patience {
                            converged = true;
                            break;
                        }
                    }
                }
            }
        }
        self.checkpoint(&format!("stage{stage}"))?;
        Ok(StageSummary {
            stage,
            polluted,
            steps: done,
            initial_valid,
            best_valid: best,
            final_valid,
            converged,
            start_version,
            end_version: format!("{:016x}", self.params.version()),
        })
    }
}

/// Two-stage training: first on polluted inputs until validation stalls or
/// the step cap is reached, then on clean inputs from the same parameters.
/// With `out` set, the log is streamed to `out/train_log.csv` and stage-end
/// checkpoints go to `out/checkpoints/`.
pub fn train_two_stage(params: ParamSet, data: TrainData, schedule: &TrainSchedule, out: Option<&Path>) -> Result<TrainOutcome> {
    schedule.validate()?;
    let cfg = params.config().clone();
    if schedule.neighbours > cfg.max_neighbours {
        return Err(GfkError::Capacity { neighbours: schedule.neighbours, capacity: cfg.max_neighbours });
    }
    let writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| GfkError::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| GfkError::io(&path, e))?);
            writeln!(w, "{LOG_HEADER}").map_err(|e| GfkError::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let optimizer = OptimizerState::for_params(&params, schedule.adam);
    let mut t = Trainer {
        params,
        data,
        schedule,
        sampler: NeighbourhoodSampler::new(data.graph, schedule.neighbours, cfg.max_tokens, schedule.seed),
        optimizer,
        log: Vec::new(),
        writer,
        checkpoints: out.map(|d| d.join("checkpoints")),
        started: Instant::now(),
        step: 0,
        pollution: PollutionStats::default(),
    };

    let mut valid_pairs = build_link_pairs(
        data.graph,
        data.valid_edges,
        schedule.neighbours,
        false,
        schedule.naive,
        &mut stream(schedule.seed, &[tag::VALID]),
    )?;
    valid_pairs.truncate(schedule.valid_pairs);
    let valid: Vec<Batch> = valid_pairs
        .chunks(schedule.batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| t.pair_inputs(c))
        .collect::<Result<_>>()?;

    let mut stages = Vec::new();
    if schedule.polluted.max_steps > 0 {
        stages.push(t.run_stage(1, true, &schedule.polluted, &valid)?);
    }
    stages.push(t.run_stage(2, false, &schedule.clean, &valid)?);
    if let Some((path, w)) = &mut t.writer {
        w.flush().map_err(|e| GfkError::io(path.as_path(), e))?;
    }
    Ok(TrainOutcome { params: t.params, log: t.log, stages, pollution: t.pollution })
}
