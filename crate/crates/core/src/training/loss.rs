use crate::error::{GfkError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_pair(q: &[usize], k: &[usize]) -> Result<(usize, usize)> {
    if q.len() != 2 || q != k {
        return Err(GfkError::dim("contrastive loss", format!("query {q:?} vs key {k:?}")));
    }
    if q[0] == 0 {
        return Err(GfkError::EmptyBatch);
    }
    Ok((q[0], q[1]))
}

/// In-batch contrastive loss on the tape: row `i` of `keys` is the positive
/// of query `i`, every other row a negative. Scores are raw inner products.
pub fn contrastive_on_tape(tape: &mut Tape, queries: Var, keys: Var) -> Result<Var> {
    let (b, _) = check_pair(tape.shape(queries), tape.shape(keys))?;
    let kt = tape.transpose(keys)?;
    let scores = tape.matmul(queries, kt)?;
    let log_p = tape.log_softmax(scores)?;
    let diag = tape.gather_flat(log_p, (0..b).map(|i| i * b + i).collect(), vec![b])?;
    let mean = tape.mean(diag)?;
    tape.scale(mean, -1.0)
}

/// Value of the in-batch contrastive loss for `[B, d]` embeddings.
pub fn inbatch_contrastive_loss(queries: &Tensor, keys: &Tensor) -> Result<f64> {
    let (b, _) = check_pair(queries.shape(), keys.shape())?;
    let mut total = 0.0;
    for i in 0..b {
        let q = queries.row(i);
        let scores: Vec<f64> = (0..b).map(|j| q.iter().zip(keys.row(j)).map(|(x, y)| x * y).sum()).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - scores[i];
    }
    Ok(total / b as f64)
}
