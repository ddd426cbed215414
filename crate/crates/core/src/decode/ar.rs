//! Left-to-right decoding under a causal mask.

use serde::{Deserialize, Serialize};

use super::kv::KVCache;
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::model::{forward, AttentionMask, AttentionMode, TokenBatch, Weights};
use crate::rng;
use crate::sampling::sample_token;

pub const DEFAULT_AR_TEMPERATURE: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArMode {
    Greedy,
    Temperature { temperature: f32, seed: u64 },
}

impl ArMode {
    fn temperature(self) -> f32 {
        match self {
            ArMode::Greedy => 0.0,
            ArMode::Temperature { temperature, .. } => temperature,
        }
    }

    fn seed(self) -> u64 {
        match self {
            ArMode::Greedy => 0,
            ArMode::Temperature { seed, .. } => seed,
        }
    }
}

fn check(weights: &Weights, prompt: &[u32], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::InvalidSettings("prompt must be nonempty".into()));
    }
    let need = prompt.len() + max_new;
    // The final generated token is never fed back, so one slot is spare.
    if need > weights.config.max_seq_len + 1 {
        return Err(Error::SequenceTooLong {
            len: need,
            max: weights.config.max_seq_len,
        });
    }
    Ok(())
}

fn generate(
    weights: &Weights,
    prompt: &[u32],
    mode: ArMode,
    max_new: usize,
    stop_at_pad: bool,
) -> Result<Vec<u32>> {
    check(weights, prompt, max_new)?;
    let mut out = prompt.to_vec();
    if max_new == 0 {
        return Ok(out);
    }
    let mut r = rng::stream(rng::derive(mode.seed(), "ar-decode"), 0);
    let mut kv = KVCache::new(weights);
    let mut logits = kv.prefill(weights, prompt)?;
    for i in 0..max_new {
        let next = sample_token(&logits, mode.temperature(), &mut r);
        if stop_at_pad && next == PAD {
            break;
        }
        out.push(next);
        if i + 1 < max_new {
            logits = kv.step(weights, next)?;
        }
    }
    Ok(out)
}

/// Generates up to `max_new` tokens after `prompt` and returns the prompt
/// followed by them. Generation stops early when a pad token is produced;
/// the pad itself is not appended.
pub fn ar_decode(
    weights: &Weights,
    prompt: &[u32],
    mode: ArMode,
    max_new: usize,
) -> Result<Vec<u32>> {
    generate(weights, prompt, mode, max_new, true)
}

/// Like [`ar_decode`] but always generates exactly `n` tokens.
pub fn ar_decode_exact(
    weights: &Weights,
    prompt: &[u32],
    mode: ArMode,
    n: usize,
) -> Result<Vec<u32>> {
    generate(weights, prompt, mode, n, false)
}

/// Reference decoder that reruns the full causal forward for every token.
pub fn ar_decode_uncached(
    weights: &Weights,
    prompt: &[u32],
    mode: ArMode,
    max_new: usize,
) -> Result<Vec<u32>> {
    check(weights, prompt, max_new)?;
    let mut out = prompt.to_vec();
    let mut r = rng::stream(rng::derive(mode.seed(), "ar-decode"), 0);
    for _ in 0..max_new {
        let mask = AttentionMask::build(AttentionMode::Causal, out.len())?;
        let logits = forward(weights, &TokenBatch::single(&out)?, &mask)?;
        let next = sample_token(logits.at(0, out.len() - 1), mode.temperature(), &mut r);
        if next == PAD {
            break;
        }
        out.push(next);
    }
    Ok(out)
}
