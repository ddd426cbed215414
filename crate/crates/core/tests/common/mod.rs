//! Shared oracles for the integration and acceptance suites: an independent
//! f64 re-implementation of the transformer and its losses, and finite
//! differences on top of it.

#![allow(dead_code)]

use ar2diff::data::{Batch, TaskLayout, TaskSpec, Vocab};
use ar2diff::model::{tensor_layout, ModelConfig, Weights};

/// Parameters as f64 tensors in canonical layout order.
#[derive(Debug, Clone)]
pub struct RefModel {
    pub config: ModelConfig,
    pub tensors: Vec<Vec<f64>>,
}

const PER_LAYER: usize = 12;

impl RefModel {
    pub fn from_weights(w: &Weights) -> Self {
        let tensors = w
            .tensors()
            .iter()
            .map(|t| t.data.iter().map(|&x| x as f64).collect())
            .collect();
        RefModel {
            config: w.config,
            tensors,
        }
    }

    fn layer(&self, l: usize, k: usize) -> &[f64] {
        &self.tensors[2 + l * PER_LAYER + k]
    }

    fn tail(&self, k: usize) -> &[f64] {
        &self.tensors[2 + self.config.n_layers * PER_LAYER + k]
    }

    /// Logits `[T][V]` for one sequence; `allowed(i, j)` is the attention mask.
    pub fn logits(&self, ids: &[u32], allowed: &dyn Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let c = &self.config;
        let (d, h) = (c.d_model, c.n_heads);
        let dh = d / h;
        let t_len = ids.len();
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                (0..d)
                    .map(|i| self.tensors[0][id as usize * d + i] + self.tensors[1][t * d + i])
                    .collect()
            })
            .collect();
        for l in 0..c.n_layers {
            let h1: Vec<Vec<f64>> = x
                .iter()
                .map(|r| ln(r, self.layer(l, 0), self.layer(l, 1)))
                .collect();
            let qkv: Vec<Vec<f64>> = h1
                .iter()
                .map(|r| affine(r, self.layer(l, 2), self.layer(l, 3)))
                .collect();
            let mut att = vec![vec![0.0; d]; t_len];
            for head in 0..h {
                let off = head * dh;
                for i in 0..t_len {
                    let mut scores: Vec<Option<f64>> = (0..t_len)
                        .map(|j| {
                            allowed(i, j).then(|| {
                                (0..dh)
                                    .map(|e| qkv[i][off + e] * qkv[j][d + off + e])
                                    .sum::<f64>()
                                    / (dh as f64).sqrt()
                            })
                        })
                        .collect();
                    let max = scores
                        .iter()
                        .flatten()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                    for s in scores.iter_mut().flatten() {
                        *s = (*s - max).exp() / z;
                    }
                    for (j, p) in scores.iter().enumerate() {
                        if let Some(p) = p {
                            for e in 0..dh {
                                att[i][off + e] += p * qkv[j][2 * d + off + e];
                            }
                        }
                    }
                }
            }
            let mid: Vec<Vec<f64>> = att
                .iter()
                .zip(&x)
                .map(|(a, xr)| add(&affine(a, self.layer(l, 4), self.layer(l, 5)), xr))
                .collect();
            x = mid
                .iter()
                .map(|m| {
                    let h2 = ln(m, self.layer(l, 6), self.layer(l, 7));
                    let f: Vec<f64> = affine(&h2, self.layer(l, 8), self.layer(l, 9))
                        .into_iter()
                        .map(gelu)
                        .collect();
                    add(&affine(&f, self.layer(l, 10), self.layer(l, 11)), m)
                })
                .collect();
        }
        x.iter()
            .map(|r| {
                affine(
                    &ln(r, self.tail(0), self.tail(1)),
                    self.tail(2),
                    self.tail(3),
                )
            })
            .collect()
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `x · w + b` for row-major `w` of shape `[x.len(), b.len()]`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut out = b.to_vec();
    for (k, &xk) in x.iter().enumerate() {
        for j in 0..n {
            out[j] += xk * w[k * n + j];
        }
    }
    out
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let rs = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mu) * rs * g + b)
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - z).collect()
}

pub fn causal(i: usize, j: usize) -> bool {
    j <= i
}

pub fn full(_: usize, _: usize) -> bool {
    true
}

/// Mean next-token negative log-likelihood over loss-masked targets.
pub fn ref_ar_loss(m: &RefModel, batch: &Batch) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for b in 0..batch.batch_size() {
        let ids = batch.tokens.row(b);
        let logits = m.logits(ids, &causal);
        for (t, &carries) in batch.mask_row(b).iter().enumerate().skip(1) {
            if carries {
                total -= log_softmax(&logits[t - 1])[ids[t] as usize];
                n += 1;
            }
        }
    }
    total / n as f64
}

/// Mean denoising negative log-likelihood of the clean batch given `noisy`
/// inputs, bidirectional attention.
pub fn ref_denoise_loss(m: &RefModel, batch: &Batch, noisy: &[u32]) -> f64 {
    let t_len = batch.seq_len();
    let (mut total, mut n) = (0.0, 0usize);
    for b in 0..batch.batch_size() {
        let clean = batch.tokens.row(b);
        let logits = m.logits(&noisy[b * t_len..(b + 1) * t_len], &full);
        for (t, &carries) in batch.mask_row(b).iter().enumerate() {
            if carries {
                total -= log_softmax(&logits[t])[clean[t] as usize];
                n += 1;
            }
        }
    }
    total / n as f64
}

/// Central difference of `f` along one coordinate of one tensor.
pub fn central_difference(
    m: &RefModel,
    tensor: usize,
    index: usize,
    h: f64,
    f: &dyn Fn(&RefModel) -> f64,
) -> f64 {
    let mut p = m.clone();
    p.tensors[tensor][index] += h;
    let up = f(&p);
    p.tensors[tensor][index] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Relative error with a small floor so exactly-zero gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// `(tensor, index)` coordinates spread over every tensor, `per_tensor` each.
pub fn coordinates(config: &ModelConfig, per_tensor: usize, seed: u64) -> Vec<(usize, usize)> {
    use rand::Rng;
    let mut r = ar2diff::rng::stream(seed, 0);
    let mut out = Vec::new();
    for (ti, (_, shape)) in tensor_layout(config).iter().enumerate() {
        let n: usize = shape.iter().product();
        for _ in 0..per_tensor {
            out.push((ti, r.random_range(0..n)));
        }
    }
    out
}

pub fn tiny_config(vocab_size: usize, max_seq_len: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len,
        seed,
    }
}

pub fn regular(v: &Vocab) -> std::ops::Range<u32> {
    v.first_regular()..v.len() as u32
}

pub fn cipher(min_len: usize, max_len: usize) -> TaskSpec {
    TaskSpec::SubstitutionCipher {
        min_len,
        max_len,
        key: ar2diff::data::cipher_key(0),
    }
}

pub fn square_layout(n: usize) -> TaskLayout {
    TaskLayout {
        source_window: n,
        target_window: n,
    }
}

pub fn random_ids(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    use rand::Rng;
    let mut r = ar2diff::rng::stream(seed, 7);
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}

/// Pushes weights away from the small-output initialization so every path
/// through the network carries signal.
pub fn perturbed(w: &Weights, seed: u64) -> Weights {
    use rand::Rng;
    let mut out = w.clone();
    let mut r = ar2diff::rng::stream(seed, 1);
    for t in out.tensors_mut() {
        for x in &mut t.data {
            *x += r.random_range(-0.3f32..0.3);
        }
    }
    out
}
