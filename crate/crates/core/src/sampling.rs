//! Token selection from a row of logits.

use rand::Rng;

use crate::linalg;

/// Draws a token from `softmax(logits / temperature)`. A temperature of zero
/// selects the argmax, with ties going to the lowest id.
pub fn sample_token(logits: &[f32], temperature: f32, rng: &mut impl Rng) -> u32 {
    if temperature <= 0.0 {
        return linalg::argmax(logits) as u32;
    }
    let inv = 1.0 / temperature;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| (((l - max) * inv) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    // Rounding left `u` just past the last bucket.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_temperature_is_argmax_with_low_tie_break() {
        let mut r = rng::stream(0, 0);
        assert_eq!(sample_token(&[0.0, 2.0, 2.0, 1.0], 0.0, &mut r), 1);
    }

    #[test]
    fn temperature_sampling_tracks_softmax() {
        let mut r = rng::stream(1, 0);
        let logits = [0.0f32, (3.0f32).ln()];
        let n = 20_000;
        let ones = (0..n)
            .filter(|_| sample_token(&logits, 1.0, &mut r) == 1)
            .count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.015, "{frac}");
    }

    #[test]
    fn low_temperature_concentrates_mass() {
        let mut r = rng::stream(2, 0);
        let logits = [1.0f32, 1.5, 0.0];
        let hits = (0..1000)
            .filter(|_| sample_token(&logits, 0.05, &mut r) == 1)
            .count();
        assert!(hits > 995);
    }
}
