//! Central finite-difference verification of tape gradients.

use crate::error::{GfkError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(GfkError::Contract("finite_diff_check needs a scalar function".into()));
    }
    Ok(tape.value(root).data()[0])
}

/// Compares the tape gradient of `f` at `params` with the central difference
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` entry by entry. The relative error of an
/// entry is `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `f` is evaluated twice at the unperturbed point first; differing results
/// are reported as a determinism error.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(GfkError::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let first = evaluate(&mut f, params)?;
    let second = evaluate(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GfkError::Determinism { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone().with_grad())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    drop(tape);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = evaluate(&mut f, &work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = evaluate(&mut f, &work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}
