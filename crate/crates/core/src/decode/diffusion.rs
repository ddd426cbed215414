//! Parallel iterative-refinement decoding with model-score reranking.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SEP;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{forward, AttentionMask, AttentionMode, Logits, TokenBatch, Weights};
use crate::rng;
use crate::sampling::sample_token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_tau")]
    pub tau: f32,
    pub target_window: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    10
}
fn default_samples() -> usize {
    8
}
fn default_tau() -> f32 {
    0.2
}

impl SamplerSettings {
    pub fn new(target_window: usize) -> Self {
        SamplerSettings {
            num_steps: default_steps(),
            num_samples: default_samples(),
            tau: default_tau(),
            target_window,
            seed: 0,
        }
    }

    /// Checks the settings against a model capacity and prompt length.
    pub fn validate(&self, max_seq_len: usize, prompt_len: usize) -> Result<()> {
        if self.num_steps == 0 || self.num_samples == 0 {
            return Err(Error::InvalidSettings(
                "num_steps and num_samples must be at least 1".into(),
            ));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidSettings("tau must be >= 0".into()));
        }
        if self.target_window == 0 {
            return Err(Error::InvalidSettings(
                "target_window must be positive".into(),
            ));
        }
        let len = prompt_len + 1 + self.target_window;
        if len > max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: max_seq_len,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Target regions, each exactly `target_window` long.
    pub candidates: Vec<Vec<u32>>,
    pub scores: Vec<f64>,
    pub winner_index: usize,
    pub steps_executed: usize,
}

impl DecodeResult {
    pub fn winner(&self) -> &[u32] {
        &self.candidates[self.winner_index]
    }
}

/// `num_samples` rows of `prompt ⊕ SEP ⊕ window`, the window drawn uniformly
/// from `regular` independently per row.
pub fn diffusion_init(
    prompt: &[u32],
    settings: &SamplerSettings,
    regular: Range<u32>,
    rng: &mut impl Rng,
) -> Result<TokenBatch> {
    let seq = prompt.len() + 1 + settings.target_window;
    let mut ids = Vec::with_capacity(settings.num_samples * seq);
    for _ in 0..settings.num_samples {
        ids.extend_from_slice(prompt);
        ids.push(SEP);
        ids.extend((0..settings.target_window).map(|_| rng.random_range(regular.clone())));
    }
    TokenBatch::new(ids, settings.num_samples, seq)
}

/// One denoising step: a batched forward pass, then every position from
/// `start` on is resampled at temperature `tau`. Returns the logits the
/// step was computed from, i.e. those of the input it received.
pub fn diffusion_step(
    weights: &Weights,
    candidates: &mut TokenBatch,
    start: usize,
    tau: f32,
    rng: &mut impl Rng,
) -> Result<Logits> {
    let seq = candidates.seq_len();
    let mask = AttentionMask::build(AttentionMode::FullBidirectional, seq)?;
    let logits = forward(weights, candidates, &mask)?;
    for b in 0..candidates.batch_size() {
        for t in start..seq {
            candidates.ids_mut()[b * seq + t] = sample_token(logits.at(b, t), tau, rng);
        }
    }
    Ok(logits)
}

/// Per row, the sum over positions `start..` of the log-probability the
/// logits assign to the input token there. Higher is better.
pub fn model_score(logits: &Logits, input: &TokenBatch, start: usize) -> Result<Vec<f64>> {
    if logits.batch_size != input.batch_size() || logits.seq_len != input.seq_len() {
        return Err(Error::ShapeMismatch(
            "logits and decoder input disagree".into(),
        ));
    }
    let mut lp = vec![0.0f32; logits.vocab_size];
    Ok((0..input.batch_size())
        .map(|b| {
            (start..input.seq_len())
                .map(|t| {
                    linalg::log_softmax(logits.at(b, t), &mut lp);
                    lp[input.row(b)[t] as usize] as f64
                })
                .sum()
        })
        .collect())
}

/// Index of the maximum score; ties resolve to the lowest index.
pub fn rerank(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Runs `num_steps` denoising steps over `num_samples` parallel candidates
/// and reranks them. Each candidate's score is taken on the final step: the
/// decoder input of that step against the logits it produced.
pub fn diffusion_decode(
    weights: &Weights,
    prompt: &[u32],
    settings: &SamplerSettings,
    regular: Range<u32>,
) -> Result<DecodeResult> {
    settings.validate(weights.config.max_seq_len, prompt.len())?;
    if regular.is_empty() || regular.end as usize > weights.config.vocab_size {
        return Err(Error::InvalidSettings(
            "replacement range must be a nonempty subset of the vocabulary".into(),
        ));
    }
    let mut r = rng::stream(rng::derive(settings.seed, "diffusion-decode"), 0);
    let start = prompt.len() + 1;
    let mut x = diffusion_init(prompt, settings, regular, &mut r)?;
    let mut scores = Vec::new();
    for step in 0..settings.num_steps {
        let input = (step + 1 == settings.num_steps).then(|| x.clone());
        let logits = diffusion_step(weights, &mut x, start, settings.tau, &mut r)?;
        if let Some(input) = input {
            scores = model_score(&logits, &input, start)?;
        }
    }
    let candidates: Vec<Vec<u32>> = (0..x.batch_size())
        .map(|b| x.row(b)[start..].to_vec())
        .collect();
    let winner_index = rerank(&scores);
    Ok(DecodeResult {
        candidates,
        scores,
        winner_index,
        steps_executed: settings.num_steps,
    })
}
