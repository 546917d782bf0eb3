use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub rank: usize,
    pub p_at_1: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

impl RankMetrics {
    pub fn from_rank(rank: usize) -> Self {
        RankMetrics {
            rank,
            p_at_1: if rank == 1 { 1.0 } else { 0.0 },
            ndcg: 1.0 / ((rank + 1) as f64).log2(),
            mrr: 1.0 / rank as f64,
        }
    }
}

/// Metrics of a single relevant candidate. Ties are broken against the
/// positive: every negative scoring at least as high ranks above it.
pub fn rank_metrics(scores: &[f64], positive: usize) -> Result<RankMetrics> {
    if scores.len() < 2 {
        return Err(GfkError::Contract(format!("ranking needs at least 2 candidates, got {}", scores.len())));
    }
    if positive >= scores.len() {
        return Err(GfkError::Index { index: positive, len: scores.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GfkError::NonFinite("ranking score"));
    }
    let p = scores[positive];
    let above = scores.iter().enumerate().filter(|&(j, &s)| j != positive && s >= p).count();
    Ok(RankMetrics::from_rank(above + 1))
}

/// Metrics averaged over instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub p_at_1: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub instances: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<usize>,
}

pub const REPORT_HEADER: &str = "instances,p_at_1,ndcg,mrr";

impl RankReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(GfkError::EmptyBatch);
        }
        let n = ranks.len() as f64;
        let (mut p, mut g, mut r) = (0.0, 0.0, 0.0);
        for &rank in ranks {
            let m = RankMetrics::from_rank(rank);
            p += m.p_at_1;
            g += m.ndcg;
            r += m.mrr;
        }
        Ok(RankReport { p_at_1: p / n, ndcg: g / n, mrr: r / n, instances: ranks.len(), ranks: ranks.to_vec() })
    }

    pub fn without_ranks(mut self) -> Self {
        self.ranks.clear();
        self
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.instances, self.p_at_1, self.ndcg, self.mrr)
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }
}
