//! Ranking metrics, model evaluation and the scaling benchmark.

pub mod alloc;
mod bench;
mod evaluate;
mod metrics;
mod run;

pub use bench::{bench_scaling, fit_line, BenchConfig, BenchReport, BenchRow, LinearFit, BENCH_HEADER};
pub use evaluate::{evaluate_model, AdjacencyOracle, Encoder, ModelEncoder, RandomEncoder, Role};
pub use metrics::{rank_metrics, RankMetrics, RankReport, REPORT_HEADER};
pub use run::{run_evaluation, EvalConfig, EvalRun};
