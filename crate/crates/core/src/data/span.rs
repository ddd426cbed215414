//! Span-corruption formatting with sentinel tokens.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::example::TrainingExample;
use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanCorruption {
    pub noise_density: f64,
    pub mean_span_len: usize,
    pub target_len: usize,
}

impl Default for SpanCorruption {
    fn default() -> Self {
        SpanCorruption {
            noise_density: 0.15,
            mean_span_len: 3,
            target_len: 32,
        }
    }
}

/// Corrupted spans as `(start, len)` pairs, sorted and non-overlapping.
pub fn choose_spans(
    len: usize,
    cfg: &SpanCorruption,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if !(cfg.noise_density > 0.0 && cfg.noise_density < 1.0) {
        return Err(Error::InvalidSettings(format!(
            "noise_density must lie in (0, 1), got {}",
            cfg.noise_density
        )));
    }
    if cfg.mean_span_len == 0 {
        return Err(Error::InvalidSettings(
            "mean_span_len must be positive".into(),
        ));
    }
    if len == 0 {
        return Err(Error::InvalidExample(
            "cannot corrupt an empty document".into(),
        ));
    }
    let mut num_noise = ((len as f64) * cfg.noise_density).round() as usize;
    num_noise = num_noise.min(len.saturating_sub(1));
    if num_noise == 0 {
        // Zero-span draw: one span of length 1 so the target is never empty.
        let start = rng.random_range(0..len);
        return Ok(vec![(start, 1)]);
    }
    let num_clean = len - num_noise;
    let num_spans = ((num_noise as f64 / cfg.mean_span_len as f64).round() as usize)
        .max(1)
        .min(num_clean);
    let noise_lens = random_segmentation(num_noise, num_spans, rng);
    let clean_lens = random_segmentation(num_clean, num_spans, rng);
    // Clean and noise segments alternate, starting with clean text.
    let mut spans = Vec::with_capacity(num_spans);
    let mut pos = 0;
    for (c, n) in clean_lens.iter().zip(&noise_lens) {
        pos += c;
        spans.push((pos, *n));
        pos += n;
    }
    Ok(spans)
}

/// Splits `n` items into `k` non-empty segments uniformly at random.
fn random_segmentation(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= n);
    let mut cuts: Vec<usize> = sample(rng, n - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(n - prev);
    out
}

/// Builds the example for explicit spans: each span is replaced in the input
/// by a fresh sentinel; the target lists `sentinel_i, span_i...` for every
/// span and ends with one more sentinel, padded to `target_len`.
pub fn span_corruption_from_spans(
    doc: &[u32],
    spans: &[(usize, usize)],
    target_len: usize,
    vocab: &Vocab,
) -> Result<TrainingExample> {
    if spans.is_empty() {
        return Err(Error::InvalidExample(
            "at least one span is required".into(),
        ));
    }
    if spans.len() + 1 > vocab.num_sentinels() {
        return Err(Error::InvalidExample(format!(
            "{} spans need {} sentinels, only {} available",
            spans.len(),
            spans.len() + 1,
            vocab.num_sentinels()
        )));
    }
    let mut input = Vec::with_capacity(doc.len());
    let mut target = Vec::new();
    let mut pos = 0;
    for (i, &(start, len)) in spans.iter().enumerate() {
        if start < pos || len == 0 || start + len > doc.len() {
            return Err(Error::InvalidExample(format!("bad span ({start}, {len})")));
        }
        let s = vocab.sentinel(i)?;
        input.extend_from_slice(&doc[pos..start]);
        input.push(s);
        target.push(s);
        target.extend_from_slice(&doc[start..start + len]);
        pos = start + len;
    }
    input.extend_from_slice(&doc[pos..]);
    target.push(vocab.sentinel(spans.len())?);
    if target.len() > target_len {
        return Err(Error::InvalidExample(format!(
            "span target of {} tokens exceeds target_len {target_len}",
            target.len()
        )));
    }
    target.resize(target_len, PAD);
    let prefix_len = input.len();
    let mut loss_mask = vec![false; prefix_len];
    loss_mask.resize(prefix_len + target_len, true);
    input.extend(target);
    Ok(TrainingExample {
        tokens: input,
        prefix_len,
        loss_mask,
    })
}

pub fn make_span_corruption_example(
    doc: &[u32],
    cfg: &SpanCorruption,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let spans = choose_spans(doc.len(), cfg, rng)?;
    span_corruption_from_spans(doc, &spans, cfg.target_len, vocab)
}

/// Reinserts target spans at their sentinels, recovering the original document.
pub fn reconstruct(example: &TrainingExample, vocab: &Vocab) -> Result<Vec<u32>> {
    let malformed = |m: &str| Error::InvalidExample(m.to_string());
    let mut groups: Vec<Vec<u32>> = Vec::new();
    for &t in example.target().iter().take_while(|&&t| t != PAD) {
        if vocab.is_sentinel(t) {
            if t != vocab.sentinel(groups.len())? {
                return Err(malformed("target sentinels out of order"));
            }
            groups.push(Vec::new());
        } else {
            groups
                .last_mut()
                .ok_or_else(|| malformed("target must start with a sentinel"))?
                .push(t);
        }
    }
    match groups.pop() {
        Some(term) if term.is_empty() => {}
        _ => return Err(malformed("target lacks a terminating sentinel")),
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(malformed("empty span"));
    }
    let mut doc = Vec::new();
    let mut next = 0;
    for &t in example.input() {
        if vocab.is_sentinel(t) {
            if next >= groups.len() || t != vocab.sentinel(next)? {
                return Err(malformed("input sentinels out of order"));
            }
            doc.extend_from_slice(&groups[next]);
            next += 1;
        } else {
            doc.push(t);
        }
    }
    if next != groups.len() {
        return Err(malformed("unused target spans"));
    }
    Ok(doc)
}
