//! Text-level decode requests over the fixed task layout.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ar::{ar_decode, ArMode};
use super::diffusion::{diffusion_decode, DecodeResult, SamplerSettings};
use crate::data::{TaskLayout, Vocab, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKind {
    Ar,
    Diffusion,
}

/// Unset fields fall back to the caller's defaults. For `ar`, a missing
/// temperature means greedy decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub prompt: String,
    pub mode: DecodeKind,
    #[serde(default)]
    pub temperature: Option<f32>,
    #[serde(default)]
    pub num_steps: Option<usize>,
    #[serde(default)]
    pub num_samples: Option<usize>,
    #[serde(default)]
    pub tau: Option<f32>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    pub timing_ms: f64,
}

/// Drops trailing pad tokens.
pub fn strip_padding(ids: &[u32]) -> &[u32] {
    let end = ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &ids[..end]
}

/// Target tokens generated left to right for a source, pads stripped.
pub fn ar_task_decode(
    weights: &Weights,
    layout: &TaskLayout,
    source: &[u32],
    mode: ArMode,
) -> Result<Vec<u32>> {
    let mut prompt = layout.prompt(source)?;
    prompt.push(SEP);
    let n = prompt.len();
    let out = ar_decode(weights, &prompt, mode, layout.target_window)?;
    Ok(strip_padding(&out[n..]).to_vec())
}

/// Diffusion decode for a source under the task layout. Candidates keep
/// their padding; strip it with [`strip_padding`] before comparing.
pub fn diffusion_task_decode(
    weights: &Weights,
    layout: &TaskLayout,
    source: &[u32],
    settings: &SamplerSettings,
    vocab: &Vocab,
) -> Result<DecodeResult> {
    if settings.target_window != layout.target_window {
        return Err(Error::InvalidSettings(format!(
            "target_window {} differs from the layout's {}",
            settings.target_window, layout.target_window
        )));
    }
    let prompt = layout.prompt(source)?;
    diffusion_decode(
        weights,
        &prompt,
        settings,
        vocab.first_regular()..vocab.len() as u32,
    )
}

pub fn handle_request(
    weights: &Weights,
    vocab: &Vocab,
    layout: &TaskLayout,
    defaults: &SamplerSettings,
    req: &DecodeRequest,
) -> Result<DecodeResponse> {
    if weights.config.vocab_size != vocab.len() {
        return Err(Error::InvalidSettings(format!(
            "model vocabulary of {} does not match tokenizer of {}",
            weights.config.vocab_size,
            vocab.len()
        )));
    }
    let source = vocab.tokenize(&req.prompt)?;
    let t0 = Instant::now();
    match req.mode {
        DecodeKind::Ar => {
            let mode = match req.temperature {
                Some(t) if t > 0.0 => ArMode::Temperature {
                    temperature: t,
                    seed: req.seed.unwrap_or(defaults.seed),
                },
                _ => ArMode::Greedy,
            };
            let out = ar_task_decode(weights, layout, &source, mode)?;
            Ok(DecodeResponse {
                output: vocab.detokenize(&out)?,
                candidates: None,
                scores: None,
                timing_ms: t0.elapsed().as_secs_f64() * 1e3,
            })
        }
        DecodeKind::Diffusion => {
            let settings = SamplerSettings {
                num_steps: req.num_steps.unwrap_or(defaults.num_steps),
                num_samples: req.num_samples.unwrap_or(defaults.num_samples),
                tau: req.tau.unwrap_or(defaults.tau),
                target_window: layout.target_window,
                seed: req.seed.unwrap_or(defaults.seed),
            };
            let res = diffusion_task_decode(weights, layout, &source, &settings, vocab)?;
            let timing_ms = t0.elapsed().as_secs_f64() * 1e3;
            let text = |c: &[u32]| vocab.detokenize(strip_padding(c));
            Ok(DecodeResponse {
                output: text(res.winner())?,
                candidates: Some(
                    res.candidates
                        .iter()
                        .map(|c| text(c))
                        .collect::<Result<_>>()?,
                ),
                scores: Some(res.scores),
                timing_ms,
            })
        }
    }
}
