//! Incremental causal forward pass over cached keys and values.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{masked_softmax, Weights};

/// Per-layer keys and values for positions `0..len`, each row `d_model` wide.
#[derive(Debug, Clone)]
pub struct KVCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    capacity: usize,
    d_model: usize,
}

struct Scratch {
    ln: Vec<f32>,
    qkv: Vec<f32>,
    att: Vec<f32>,
    tmp: Vec<f32>,
    fc: Vec<f32>,
    scores: Vec<f32>,
}

fn norm_row(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let (mut mean, mut rstd) = ([0.0], [0.0]);
    linalg::layer_norm(x, gain, bias, out, &mut mean, &mut rstd);
}

impl KVCache {
    pub fn new(weights: &Weights) -> Self {
        let cfg = &weights.config;
        KVCache {
            keys: vec![Vec::with_capacity(cfg.max_seq_len * cfg.d_model); cfg.n_layers],
            values: vec![Vec::with_capacity(cfg.max_seq_len * cfg.d_model); cfg.n_layers],
            len: 0,
            capacity: cfg.max_seq_len,
            d_model: cfg.d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.keys
            .iter_mut()
            .chain(self.values.iter_mut())
            .for_each(Vec::clear);
        self.len = 0;
    }

    /// Appends `token` at position `len` and returns its next-token logits.
    pub fn step(&mut self, weights: &Weights, token: u32) -> Result<Vec<f32>> {
        let cfg = &weights.config;
        if cfg.d_model != self.d_model || cfg.n_layers != self.keys.len() {
            return Err(Error::ShapeMismatch(
                "cache was built for a different model".into(),
            ));
        }
        if self.len >= self.capacity {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: self.capacity,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                index: self.len,
                vocab_size: cfg.vocab_size,
            });
        }
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f32).sqrt();
        let pos = self.len;
        let n = pos + 1;
        let mut s = Scratch {
            ln: vec![0.0; d],
            qkv: vec![0.0; 3 * d],
            att: vec![0.0; d],
            tmp: vec![0.0; d],
            fc: vec![0.0; f],
            scores: vec![0.0; n],
        };
        let allowed = vec![true; n];

        let te = &weights.tok_emb.data[token as usize * d..(token as usize + 1) * d];
        let pe = &weights.pos_emb.data[pos * d..(pos + 1) * d];
        let mut x: Vec<f32> = te.iter().zip(pe).map(|(a, b)| a + b).collect();

        for (l, lw) in weights.layers.iter().enumerate() {
            norm_row(&x, &lw.ln1_gain.data, &lw.ln1_bias.data, &mut s.ln);
            linalg::vecmat(&s.ln, &lw.qkv_weight.data, &lw.qkv_bias.data, &mut s.qkv);
            self.keys[l].extend_from_slice(&s.qkv[d..2 * d]);
            self.values[l].extend_from_slice(&s.qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            for head in 0..h {
                let q = &s.qkv[head * dh..(head + 1) * dh];
                for (j, sc) in s.scores.iter_mut().enumerate() {
                    let k = &keys[j * d + head * dh..j * d + (head + 1) * dh];
                    *sc = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                masked_softmax(&mut s.scores, &allowed);
                let out = &mut s.att[head * dh..(head + 1) * dh];
                out.fill(0.0);
                for (j, &p) in s.scores.iter().enumerate() {
                    let v = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    out.iter_mut().zip(v).for_each(|(o, vi)| *o += p * vi);
                }
            }
            linalg::vecmat(
                &s.att,
                &lw.attn_out_weight.data,
                &lw.attn_out_bias.data,
                &mut s.tmp,
            );
            x.iter_mut().zip(&s.tmp).for_each(|(xi, t)| *xi += t);

            norm_row(&x, &lw.ln2_gain.data, &lw.ln2_bias.data, &mut s.ln);
            linalg::vecmat(&s.ln, &lw.fc_weight.data, &lw.fc_bias.data, &mut s.fc);
            s.fc.iter_mut().for_each(|z| *z = linalg::gelu(*z));
            linalg::vecmat(&s.fc, &lw.proj_weight.data, &lw.proj_bias.data, &mut s.tmp);
            x.iter_mut().zip(&s.tmp).for_each(|(xi, t)| *xi += t);
        }
        norm_row(
            &x,
            &weights.lnf_gain.data,
            &weights.lnf_bias.data,
            &mut s.ln,
        );
        let mut logits = vec![0.0; cfg.vocab_size];
        linalg::vecmat(
            &s.ln,
            &weights.out_weight.data,
            &weights.out_bias.data,
            &mut logits,
        );
        self.len += 1;
        Ok(logits)
    }

    /// Feeds every token of `prompt`; returns the logits after the last one.
    pub fn prefill(&mut self, weights: &Weights, prompt: &[u32]) -> Result<Vec<f32>> {
        if prompt.is_empty() {
            return Err(Error::InvalidSettings("prompt must be nonempty".into()));
        }
        let mut last = Vec::new();
        for &t in prompt {
            last = self.step(weights, t)?;
        }
        Ok(last)
    }
}
