//! Wall-clock decode latency of left-to-right against diffusion decoding.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{ar_decode_exact, diffusion_decode, ArMode, SamplerSettings};
use crate::error::{Error, Result};
use crate::model::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Ar,
    Diffusion,
}

/// One timed configuration. `per_unit_ms` is per generated token for `ar`
/// and per denoising step for `diffusion`; `steps` counts those units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub kind: DecoderKind,
    pub length: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub per_unit_ms: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySettings {
    pub warmup: usize,
    pub min_reps: usize,
    pub num_steps: usize,
    /// Repetitions double until their summed time reaches this.
    pub min_total_ms: f64,
}

impl Default for LatencySettings {
    fn default() -> Self {
        LatencySettings {
            warmup: 2,
            min_reps: 3,
            num_steps: 10,
            min_total_ms: 1.0,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median time of `f` in milliseconds and the repetition count used.
pub fn time_median(
    settings: &LatencySettings,
    mut f: impl FnMut() -> Result<()>,
) -> Result<(f64, usize)> {
    for _ in 0..settings.warmup {
        f()?;
    }
    let mut reps = settings.min_reps.max(3);
    loop {
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            f()?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let total: f64 = times.iter().sum();
        if total >= settings.min_total_ms || reps >= 1 << 20 {
            // Sub-resolution timings read as zero; floor at one nanosecond.
            return Ok((median(&times).max(1e-6), reps));
        }
        reps *= 2;
    }
}

/// Greedy decode of exactly `length` tokens after a one-token prompt.
pub fn time_ar(
    weights: &Weights,
    length: usize,
    prompt_token: u32,
    settings: &LatencySettings,
) -> Result<LatencyRecord> {
    let (median_ms, reps) = time_median(settings, || {
        ar_decode_exact(weights, &[prompt_token], ArMode::Greedy, length).map(drop)
    })?;
    Ok(LatencyRecord {
        kind: DecoderKind::Ar,
        length,
        reps,
        median_ms,
        per_unit_ms: median_ms / length as f64,
        steps: length,
    })
}

/// Diffusion decode over a window of `length` with one candidate and
/// `num_steps` steps after a one-token prompt.
pub fn time_diffusion(
    weights: &Weights,
    length: usize,
    num_steps: usize,
    regular: Range<u32>,
    settings: &LatencySettings,
) -> Result<LatencyRecord> {
    let sampler = SamplerSettings {
        num_steps,
        num_samples: 1,
        target_window: length,
        ..SamplerSettings::new(length)
    };
    let prompt = [regular.start];
    let (median_ms, reps) = time_median(settings, || {
        diffusion_decode(weights, &prompt, &sampler, regular.clone()).map(drop)
    })?;
    Ok(LatencyRecord {
        kind: DecoderKind::Diffusion,
        length,
        reps,
        median_ms,
        per_unit_ms: median_ms / num_steps as f64,
        steps: num_steps,
    })
}

/// For every length: AR then diffusion, one decode at a time on the calling
/// thread.
pub fn latency_benchmark(
    weights: &Weights,
    lengths: &[usize],
    settings: &LatencySettings,
    regular: Range<u32>,
) -> Result<Vec<LatencyRecord>> {
    if lengths.is_empty() {
        return Err(Error::InvalidSettings("no lengths to benchmark".into()));
    }
    let cap = weights.config.max_seq_len;
    if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l + 2 > cap) {
        return Err(Error::SequenceTooLong {
            len: l + 2,
            max: cap,
        });
    }
    let mut out = Vec::with_capacity(2 * lengths.len());
    for &l in lengths {
        log::info!("timing length {l}");
        out.push(time_ar(weights, l, regular.start, settings)?);
        out.push(time_diffusion(
            weights,
            l,
            settings.num_steps,
            regular.clone(),
            settings,
        )?);
    }
    Ok(out)
}
