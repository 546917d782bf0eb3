use std::ops::AddAssign;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::model::GraphInput;
use crate::tokens::{MASK, PAD, RESERVED};

pub const SELECT_PROB: f64 = 0.15;
pub const MASK_SHARE: f64 = 0.8;
pub const RANDOM_SHARE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollutionStats {
    /// Eligible tokens inspected.
    pub seen: u64,
    pub selected: u64,
    pub to_mask: u64,
    pub to_random: u64,
    pub kept: u64,
}

impl PollutionStats {
    pub fn is_consistent(&self) -> bool {
        self.selected == self.to_mask + self.to_random + self.kept && self.selected <= self.seen
    }
}

impl AddAssign for PollutionStats {
    fn add_assign(&mut self, o: Self) {
        self.seen += o.seen;
        self.selected += o.selected;
        self.to_mask += o.to_mask;
        self.to_random += o.to_random;
        self.kept += o.kept;
    }
}

/// What happens to one eligible token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Skip,
    Mask,
    Replace(u32),
    Keep,
}

fn check_vocab(vocab_size: usize) -> Result<()> {
    if vocab_size <= RESERVED as usize {
        return Err(GfkError::Config(format!("vocabulary of {vocab_size} ids has no [MASK] id or no content tokens")));
    }
    Ok(())
}

/// Applies `decide` to every eligible token: position 0 and pads are never
/// touched.
pub fn pollute_tokens_with(
    tokens: &[u32],
    vocab_size: usize,
    mut decide: impl FnMut() -> Decision,
) -> Result<(Vec<u32>, PollutionStats)> {
    check_vocab(vocab_size)?;
    let mut out = tokens.to_vec();
    let mut stats = PollutionStats::default();
    for t in out.iter_mut().skip(1).filter(|t| **t != PAD) {
        stats.seen += 1;
        match decide() {
            Decision::Skip => continue,
            Decision::Mask => {
                *t = MASK;
                stats.to_mask += 1;
            }
            Decision::Replace(id) => {
                *t = id;
                stats.to_random += 1;
            }
            Decision::Keep => stats.kept += 1,
        }
        stats.selected += 1;
    }
    Ok((out, stats))
}

/// Dynamic masking: each eligible token is selected with probability 0.15;
/// a selected token becomes `[MASK]` (80%), a uniform content token (10%),
/// or stays (10%).
pub fn pollute_tokens<R: Rng + ?Sized>(tokens: &[u32], vocab_size: usize, rng: &mut R) -> Result<(Vec<u32>, PollutionStats)> {
    let content = RESERVED..vocab_size as u32;
    pollute_tokens_with(tokens, vocab_size, || {
        if rng.random::<f64>() >= SELECT_PROB {
            return Decision::Skip;
        }
        let branch = rng.random::<f64>();
        if branch < MASK_SHARE {
            Decision::Mask
        } else if branch < MASK_SHARE + RANDOM_SHARE {
            Decision::Replace(rng.random_range(content.clone()))
        } else {
            Decision::Keep
        }
    })
}

/// Pollutes every node of `input`. Node ids are dropped so polluted inputs
/// can never reach a neighbour cache.
pub fn pollute_input<R: Rng + ?Sized>(input: &GraphInput, vocab_size: usize, rng: &mut R) -> Result<(GraphInput, PollutionStats)> {
    let mut stats = PollutionStats::default();
    let mut nodes = Vec::with_capacity(input.len());
    for n in &input.nodes {
        let (p, s) = pollute_tokens(n, vocab_size, rng)?;
        stats += s;
        nodes.push(p);
    }
    Ok((GraphInput::new(nodes), stats))
}
