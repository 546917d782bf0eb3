use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::model::{encode_on_tape, Aggregator, GraphInput, ModelConfig, ParamSet};
use crate::rng::{stream, tag};
use crate::tape::Tape;
use crate::tokens::{CLS, RESERVED};
use crate::training::contrastive_on_tape;

use super::alloc;

pub const BENCH_HEADER: &str = "mode,n_neighbours,batch,mean_ms,median_ms,std_ms,peak_mib";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub neighbour_sizes: Vec<usize>,
    pub batch_size: usize,
    /// Timed repetitions per point, after one untimed warm-up.
    pub reps: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            neighbour_sizes: vec![3, 5, 10, 20, 50],
            batch_size: 8,
            reps: 5,
            layers: 4,
            hidden: 64,
            heads: 2,
            max_tokens: 16,
            vocab_size: 1000,
        }
    }
}

impl BenchConfig {
    /// Model configuration of the benchmarked encoder for `aggregator`.
    pub fn model(&self, aggregator: Aggregator) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            max_tokens: self.max_tokens,
            max_neighbours: self.neighbour_sizes.iter().copied().max().unwrap_or(0),
            vocab_size: self.vocab_size,
            aggregator,
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub n_neighbours: usize,
    pub batch: usize,
    pub mean_ms: f64,
    /// Robust to single stalled repetitions; the fit and ratios use it.
    pub median_ms: f64,
    pub std_ms: f64,
    pub peak_mib: f64,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3}",
            self.mode, self.n_neighbours, self.batch, self.mean_ms, self.median_ms, self.std_ms, self.peak_mib
        )
    }
}

/// Least-squares line `time = alpha + beta · n_neighbours`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub mode: String,
    pub alpha: f64,
    pub beta: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(GfkError::Contract("a line fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(GfkError::Contract("a line fit needs distinct x values".into()));
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - alpha - beta * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((alpha, beta, r2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fits: Vec<LinearFit>,
    /// Nested over cascaded median time at every neighbour count.
    pub ratios: Vec<(usize, f64)>,
    /// False when the counting allocator is not installed and `peak_mib` is 0.
    pub memory_tracked: bool,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

fn batch_inputs(cfg: &ModelConfig, n: usize, batch: usize, seed: u64) -> Vec<GraphInput> {
    let mut rng = stream(seed, &[tag::BENCH, n as u64]);
    let mut seq = || -> Vec<u32> {
        std::iter::once(CLS)
            .chain((1..cfg.max_tokens).map(|_| rng.random_range(RESERVED..cfg.vocab_size as u32)))
            .collect()
    };
    (0..batch).map(|_| GraphInput::new((0..=n).map(|_| seq()).collect())).collect()
}

/// One forward and backward pass over the batch.
fn step(params: &ParamSet, inputs: &[&GraphInput]) -> Result<()> {
    let cfg = params.config();
    let mut tape = Tape::with_precision(cfg.precision);
    let w = params.bind(&mut tape, true);
    let emb = encode_on_tape(&mut tape, cfg, &w, inputs)?;
    let loss = contrastive_on_tape(&mut tape, emb, emb)?;
    tape.backward(loss)
}

fn timer_tick() -> Duration {
    let start = Instant::now();
    loop {
        let d = start.elapsed();
        if d > Duration::ZERO {
            return d;
        }
    }
}

struct Timing {
    mean_ms: f64,
    median_ms: f64,
    std_ms: f64,
    peak_mib: f64,
}

fn summarize(times: &[Duration], peak: usize) -> Timing {
    let ms: Vec<f64> = times.iter().map(|t| t.as_secs_f64() * 1e3).collect();
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (ms.len() - 1) as f64;
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 };
    Timing { mean_ms: mean, median_ms: median, std_ms: var.sqrt(), peak_mib: peak as f64 / (1024.0 * 1024.0) }
}

/// Times every case with its repetitions interleaved (one step of each case
/// per round), so a slow phase of the machine hits all cases alike.
fn measure(cases: &[(&ParamSet, Vec<&GraphInput>)], reps: usize) -> Result<Vec<Timing>> {
    for (params, refs) in cases {
        step(params, refs)?;
    }
    let tick = timer_tick();
    let mut reps = reps.max(2);
    loop {
        let mut times = vec![Vec::with_capacity(reps); cases.len()];
        let mut peaks = vec![0usize; cases.len()];
        for _ in 0..reps {
            for (c, (params, refs)) in cases.iter().enumerate() {
                alloc::reset_peak();
                let base = alloc::current_bytes();
                let t = Instant::now();
                step(params, refs)?;
                times[c].push(t.elapsed());
                peaks[c] = peaks[c].max(alloc::peak_bytes().saturating_sub(base));
            }
        }
        // Too few timer ticks per repetition: repeat with more samples.
        let fastest = times.iter().flatten().min().copied().unwrap_or_default();
        if fastest < tick * 100 && reps < 1 << 16 {
            reps *= 2;
            continue;
        }
        return Ok(times.iter().zip(peaks).map(|(t, p)| summarize(t, p)).collect());
    }
}

/// Times forward plus backward of the nested encoder and of the cascaded
/// max-pooling baseline at each neighbour count and fits time against it.
pub fn bench_scaling(cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    if cfg.neighbour_sizes.len() < 2 || cfg.batch_size == 0 || cfg.reps == 0 {
        return Err(GfkError::Config("benchmark needs two neighbour sizes, a batch and repetitions".into()));
    }
    alloc::retain_freed_memory();
    let modes = [("nested", Aggregator::Nested), ("cascaded", Aggregator::Max)];
    let params = modes.iter().map(|(_, agg)| ParamSet::init(&cfg.model(*agg), seed)).collect::<Result<Vec<_>>>()?;
    let mut per_mode: Vec<Vec<BenchRow>> = vec![Vec::new(); modes.len()];
    for &n in &cfg.neighbour_sizes {
        let inputs: Vec<Vec<GraphInput>> =
            params.iter().map(|p| batch_inputs(p.config(), n, cfg.batch_size, seed)).collect();
        let cases: Vec<(&ParamSet, Vec<&GraphInput>)> =
            params.iter().zip(&inputs).map(|(p, i)| (p, i.iter().collect())).collect();
        for (((name, _), t), rows) in modes.iter().zip(measure(&cases, cfg.reps)?).zip(&mut per_mode) {
            rows.push(BenchRow {
                mode: (*name).into(),
                n_neighbours: n,
                batch: cfg.batch_size,
                mean_ms: t.mean_ms,
                median_ms: t.median_ms,
                std_ms: t.std_ms,
                peak_mib: t.peak_mib,
            });
        }
    }
    let xs: Vec<f64> = cfg.neighbour_sizes.iter().map(|&n| n as f64).collect();
    let mut fits = Vec::new();
    for ((name, _), rows) in modes.iter().zip(&per_mode) {
        let ys: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
        let (alpha, beta, r2) = fit_line(&xs, &ys)?;
        fits.push(LinearFit { mode: (*name).into(), alpha, beta, r2 });
    }
    let ratios = per_mode[0].iter().zip(&per_mode[1]).map(|(a, b)| (a.n_neighbours, a.median_ms / b.median_ms)).collect();
    Ok(BenchReport { rows: per_mode.concat(), fits, ratios, memory_tracked: alloc::is_tracking() })
}
