//! Training objectives: next-token cross-entropy and the two-pass unrolled
//! denoising loss.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    backward_into, forward_with_cache, AttentionMask, AttentionMode, Gradients, Logits, TokenBatch,
    Weights,
};
use crate::sampling::sample_token;

/// Knobs of the denoising objective. Corruption draws a proportion
/// `p ~ Uniform(0, 1)` per example and resamples each target position with
/// probability `p` from the regular (non-special) tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSettings {
    #[serde(default)]
    pub unroll_temperature: f32,
    #[serde(default = "default_weight")]
    pub w1: f32,
    #[serde(default = "default_weight")]
    pub w2: f32,
}

fn default_weight() -> f32 {
    1.0
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        DiffusionSettings {
            unroll_temperature: 0.0,
            w1: 1.0,
            w2: 1.0,
        }
    }
}

impl DiffusionSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.unroll_temperature >= 0.0) {
            return Err(Error::InvalidSettings(
                "unroll_temperature must be >= 0".into(),
            ));
        }
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) || (self.w1 == 0.0 && self.w2 == 0.0) {
            return Err(Error::InvalidSettings(
                "loss weights must be non-negative and not both zero".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value, gradients and per-term diagnostics.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f32,
    pub grads: Gradients,
    pub l1: Option<f32>,
    pub l2: Option<f32>,
}

/// Mean cross-entropy over `(logit row, target id)` picks. Returns the loss
/// and `scale * dloss/dlogits`.
pub fn cross_entropy(
    logits: &Logits,
    picks: &[(usize, u32)],
    scale: f32,
) -> Result<(f32, Vec<f32>)> {
    if picks.is_empty() {
        return Err(Error::EmptyLossMask);
    }
    let v = logits.vocab_size;
    let n = picks.len() as f32;
    let mut grad = vec![0.0f32; logits.data.len()];
    let mut lp = vec![0.0f32; v];
    let mut total = 0.0f64;
    for &(row, target) in picks {
        let l = &logits.data[row * v..(row + 1) * v];
        linalg::log_softmax(l, &mut lp);
        total -= lp[target as usize] as f64;
        let g = &mut grad[row * v..(row + 1) * v];
        for (gi, &li) in g.iter_mut().zip(&lp) {
            *gi = li.exp() * scale / n;
        }
        g[target as usize] -= scale / n;
    }
    Ok(((total / picks.len() as f64) as f32, grad))
}

/// Next-token picks: logits at position `t` predict the token at `t + 1`
/// wherever `t + 1` carries loss.
pub fn next_token_picks(batch: &Batch) -> Vec<(usize, u32)> {
    let t = batch.seq_len();
    let mut picks = Vec::new();
    for b in 0..batch.batch_size() {
        let ids = batch.tokens.row(b);
        let mask = batch.mask_row(b);
        for pos in 1..t {
            if mask[pos] {
                picks.push((b * t + pos - 1, ids[pos]));
            }
        }
    }
    picks
}

/// Denoising picks: logits at position `t` predict the clean token at `t`.
pub fn denoise_picks(clean: &TokenBatch, batch: &Batch) -> Vec<(usize, u32)> {
    clean
        .ids()
        .iter()
        .zip(&batch.loss_mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(row, (&id, _))| (row, id))
        .collect()
}

fn check_ar_mode(mode: AttentionMode, batch: &Batch) -> Result<()> {
    match mode {
        AttentionMode::Causal => Ok(()),
        AttentionMode::PrefixBidirectional { prefix_len } => {
            let min = batch.prefix_lens.iter().copied().min().unwrap_or(0);
            if prefix_len > min {
                Err(Error::InvalidSettings(format!(
                    "bidirectional prefix {prefix_len} would expose targets of an example with prefix {min}"
                )))
            } else {
                Ok(())
            }
        }
        AttentionMode::FullBidirectional => Err(Error::InvalidSettings(
            "next-token loss needs a causal or prefix-causal mask".into(),
        )),
    }
}

/// Mean next-token cross-entropy over loss-masked positions.
pub fn ar_loss(weights: &Weights, batch: &Batch, mode: AttentionMode) -> Result<LossOutput> {
    check_ar_mode(mode, batch)?;
    let picks = next_token_picks(batch);
    if picks.is_empty() {
        return Err(Error::EmptyLossMask);
    }
    let mask = AttentionMask::build(mode, batch.seq_len())?;
    let (logits, cache) = forward_with_cache(weights, &batch.tokens, &mask)?;
    let (loss, dlogits) = cross_entropy(&logits, &picks, 1.0)?;
    let mut grads = weights.zeros_like();
    backward_into(weights, &cache, &dlogits, &mut grads);
    Ok(LossOutput {
        loss,
        grads,
        l1: None,
        l2: None,
    })
}

/// Resamples each position with probability `proportion`.
pub fn corrupt_with_proportion(
    target: &[u32],
    proportion: f64,
    regular: Range<u32>,
    rng: &mut impl Rng,
) -> Vec<u32> {
    target
        .iter()
        .map(|&t| {
            if rng.random::<f64>() < proportion {
                rng.random_range(regular.clone())
            } else {
                t
            }
        })
        .collect()
}

/// Draws `p ~ Uniform(0, 1)` then corrupts each position independently with
/// probability `p`, replacing it with a uniformly drawn regular token.
pub fn corrupt(target: &[u32], regular: Range<u32>, rng: &mut impl Rng) -> Vec<u32> {
    let p = rng.random::<f64>();
    corrupt_with_proportion(target, p, regular, rng)
}

/// Corrupts the loss-masked positions of every example; everything else is
/// copied through unchanged.
pub fn corrupt_batch(batch: &Batch, regular: Range<u32>, rng: &mut impl Rng) -> TokenBatch {
    let mut out = batch.tokens.clone();
    let t = batch.seq_len();
    for b in 0..batch.batch_size() {
        let mask = batch.mask_row(b);
        let positions: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        let row = &mut out.ids_mut()[b * t..(b + 1) * t];
        let target: Vec<u32> = positions.iter().map(|&i| row[i]).collect();
        let noisy = corrupt(&target, regular.clone(), rng);
        for (&i, v) in positions.iter().zip(noisy) {
            row[i] = v;
        }
    }
    out
}

/// Everything computed by [`sundae_loss_detailed`].
#[derive(Debug, Clone)]
pub struct SundaeOutput {
    pub loss: f32,
    pub l1: f32,
    pub l2: f32,
    pub grads: Gradients,
    pub corrupted: TokenBatch,
    pub unrolled: TokenBatch,
}

/// Two-pass denoising loss from a given corrupted input.
///
/// `l1 = f(corrupted)`; the unroll input keeps the clean tokens everywhere
/// except loss-masked positions, which take tokens sampled from `l1`;
/// `l2 = f(unrolled)`. Both terms are cross-entropy against the clean tokens.
/// Sampled tokens are constants: each term backpropagates through its own
/// forward pass only.
pub fn sundae_loss_from_corrupted(
    weights: &Weights,
    batch: &Batch,
    corrupted: TokenBatch,
    settings: &DiffusionSettings,
    rng: &mut impl Rng,
) -> Result<SundaeOutput> {
    settings.validate()?;
    let picks = denoise_picks(&batch.tokens, batch);
    if picks.is_empty() {
        return Err(Error::EmptyLossMask);
    }
    let mask = AttentionMask::build(AttentionMode::FullBidirectional, batch.seq_len())?;
    let mut grads = weights.zeros_like();

    let (logits1, cache1) = forward_with_cache(weights, &corrupted, &mask)?;
    let (l1, d1) = cross_entropy(&logits1, &picks, settings.w1)?;
    if settings.w1 != 0.0 {
        backward_into(weights, &cache1, &d1, &mut grads);
    }
    drop(cache1);

    let mut unrolled = batch.tokens.clone();
    let v = logits1.vocab_size;
    for &(row, _) in &picks {
        let l = &logits1.data[row * v..(row + 1) * v];
        unrolled.ids_mut()[row] = sample_token(l, settings.unroll_temperature, rng);
    }

    let (logits2, cache2) = forward_with_cache(weights, &unrolled, &mask)?;
    let (l2, d2) = cross_entropy(&logits2, &picks, settings.w2)?;
    if settings.w2 != 0.0 {
        backward_into(weights, &cache2, &d2, &mut grads);
    }

    Ok(SundaeOutput {
        loss: settings.w1 * l1 + settings.w2 * l2,
        l1,
        l2,
        grads,
        corrupted,
        unrolled,
    })
}

pub fn sundae_loss_detailed(
    weights: &Weights,
    batch: &Batch,
    settings: &DiffusionSettings,
    regular: Range<u32>,
    rng: &mut impl Rng,
) -> Result<SundaeOutput> {
    let corrupted = corrupt_batch(batch, regular, rng);
    sundae_loss_from_corrupted(weights, batch, corrupted, settings, rng)
}

/// `w1 * L1 + w2 * L2` with gradients.
pub fn sundae_loss(
    weights: &Weights,
    batch: &Batch,
    settings: &DiffusionSettings,
    regular: Range<u32>,
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    let out = sundae_loss_detailed(weights, batch, settings, regular, rng)?;
    Ok(LossOutput {
        loss: out.loss,
        grads: out.grads,
        l1: Some(out.l1),
        l2: Some(out.l2),
    })
}
