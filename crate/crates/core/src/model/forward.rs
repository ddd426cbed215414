//! Forward pass and exact reverse-mode gradients.
//!
//! Layout is pre-norm: `x += attn(ln1(x))`, `x += mlp(ln2(x))`, then a final
//! layer norm and an untied projection to the vocabulary.

use super::{AttentionMask, Gradients, Weights};
use crate::error::{Error, Result};
use crate::linalg::{self, View, ViewMut};

/// Row-major `[batch_size, seq_len]` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<u32>,
    batch_size: usize,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch_size: usize, seq_len: usize) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 || ids.len() != batch_size * seq_len {
            return Err(Error::ShapeMismatch(format!(
                "{} ids do not form a [{batch_size}, {seq_len}] batch",
                ids.len()
            )));
        }
        Ok(TokenBatch {
            ids,
            batch_size,
            seq_len,
        })
    }

    pub fn single(ids: &[u32]) -> Result<Self> {
        Self::new(ids.to_vec(), 1, ids.len())
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Raw pre-softmax scores, `[batch, seq_len, vocab_size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub data: Vec<f32>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
}

impl Logits {
    pub fn at(&self, b: usize, t: usize) -> &[f32] {
        let off = (b * self.seq_len + t) * self.vocab_size;
        &self.data[off..off + self.vocab_size]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch_size, self.seq_len, self.vocab_size]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default)]
struct LnCache {
    out: Vec<f32>,
    mean: Vec<f32>,
    rstd: Vec<f32>,
}

impl LnCache {
    fn run(x: &[f32], gain: &[f32], bias: &[f32], rows: usize) -> Self {
        let mut c = LnCache {
            out: vec![0.0; x.len()],
            mean: vec![0.0; rows],
            rstd: vec![0.0; rows],
        };
        linalg::layer_norm(x, gain, bias, &mut c.out, &mut c.mean, &mut c.rstd);
        c
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    x_in: Vec<f32>,
    ln1: LnCache,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    ln2: LnCache,
    fc_pre: Vec<f32>,
    fc_act: Vec<f32>,
}

/// Activations retained for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch_size: usize,
    seq_len: usize,
    tokens: Vec<u32>,
    mask: AttentionMask,
    layers: Vec<LayerCache>,
    x_final: Vec<f32>,
    lnf: LnCache,
}

fn validate(weights: &Weights, tokens: &TokenBatch, mask: &AttentionMask) -> Result<()> {
    let cfg = &weights.config;
    if tokens.seq_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.seq_len,
            max: cfg.max_seq_len,
        });
    }
    if mask.seq_len() != tokens.seq_len {
        return Err(Error::ShapeMismatch(format!(
            "mask is {0}x{0} but sequences have length {1}",
            mask.seq_len(),
            tokens.seq_len
        )));
    }
    if let Some((index, &id)) = tokens
        .ids
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= cfg.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            index,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Masked, scaled dot-product attention for every (batch, head) pair.
/// Writes probabilities `[B, H, T, T]` and head outputs into `att` `[B*T, D]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    qkv: &[f32],
    mask: &AttentionMask,
    batch: usize,
    seq: usize,
    d_model: usize,
    n_heads: usize,
    probs: &mut [f32],
    att: &mut [f32],
) {
    let dh = d_model / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let stride = 3 * d_model;
    for b in 0..batch {
        let base = b * seq * stride;
        for h in 0..n_heads {
            let q = View::new(&qkv[base + h * dh..], seq, dh, stride, 1);
            let k = View::new(&qkv[base + d_model + h * dh..], seq, dh, stride, 1);
            let v = View::new(&qkv[base + 2 * d_model + h * dh..], seq, dh, stride, 1);
            let p = &mut probs[(b * n_heads + h) * seq * seq..(b * n_heads + h + 1) * seq * seq];
            linalg::gemm(scale, q, k.t(), 0.0, ViewMut::dense(p, seq, seq));
            for i in 0..seq {
                masked_softmax(&mut p[i * seq..(i + 1) * seq], mask.row(i));
            }
            let out = ViewMut::new(&mut att[b * seq * d_model + h * dh..], seq, dh, d_model, 1);
            linalg::gemm(1.0, View::dense(p, seq, seq), v, 0.0, out);
        }
    }
}

/// In-place softmax over permitted entries; forbidden entries become exactly zero.
pub(crate) fn masked_softmax(row: &mut [f32], allowed: &[bool]) {
    let mut max = f32::NEG_INFINITY;
    for (v, &a) in row.iter().zip(allowed) {
        if a && *v > max {
            max = *v;
        }
    }
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &a) in row.iter_mut().zip(allowed) {
        *v = if a { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn embed(weights: &Weights, tokens: &TokenBatch) -> Vec<f32> {
    let d = weights.config.d_model;
    let mut x = vec![0.0; tokens.ids.len() * d];
    for (r, (&id, row)) in tokens.ids.iter().zip(x.chunks_exact_mut(d)).enumerate() {
        let t = r % tokens.seq_len;
        let te = &weights.tok_emb.data[id as usize * d..(id as usize + 1) * d];
        let pe = &weights.pos_emb.data[t * d..(t + 1) * d];
        for i in 0..d {
            row[i] = te[i] + pe[i];
        }
    }
    x
}

fn run(
    weights: &Weights,
    tokens: &TokenBatch,
    mask: &AttentionMask,
    keep: bool,
) -> Result<(Logits, Option<ForwardCache>)> {
    validate(weights, tokens, mask)?;
    let cfg = &weights.config;
    let (b, t, d, f, v, h) = (
        tokens.batch_size,
        tokens.seq_len,
        cfg.d_model,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.n_heads,
    );
    let rows = b * t;
    let mut x = embed(weights, tokens);
    let mut caches = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });

    for lw in &weights.layers {
        let ln1 = LnCache::run(&x, &lw.ln1_gain.data, &lw.ln1_bias.data, rows);
        let mut qkv = vec![0.0; rows * 3 * d];
        linalg::linear(
            &ln1.out,
            &lw.qkv_weight.data,
            &lw.qkv_bias.data,
            rows,
            d,
            3 * d,
            &mut qkv,
        );
        let mut probs = vec![0.0; b * h * t * t];
        let mut att = vec![0.0; rows * d];
        attention_forward(&qkv, mask, b, t, d, h, &mut probs, &mut att);
        let mut x_mid = vec![0.0; rows * d];
        linalg::linear(
            &att,
            &lw.attn_out_weight.data,
            &lw.attn_out_bias.data,
            rows,
            d,
            d,
            &mut x_mid,
        );
        x_mid.iter_mut().zip(&x).for_each(|(m, xi)| *m += xi);

        let ln2 = LnCache::run(&x_mid, &lw.ln2_gain.data, &lw.ln2_bias.data, rows);
        let mut fc_pre = vec![0.0; rows * f];
        linalg::linear(
            &ln2.out,
            &lw.fc_weight.data,
            &lw.fc_bias.data,
            rows,
            d,
            f,
            &mut fc_pre,
        );
        let fc_act: Vec<f32> = fc_pre.iter().map(|&z| linalg::gelu(z)).collect();
        let mut x_out = vec![0.0; rows * d];
        linalg::linear(
            &fc_act,
            &lw.proj_weight.data,
            &lw.proj_bias.data,
            rows,
            f,
            d,
            &mut x_out,
        );
        x_out.iter_mut().zip(&x_mid).for_each(|(o, m)| *o += m);

        let x_in = std::mem::replace(&mut x, x_out);
        if keep {
            caches.push(LayerCache {
                x_in,
                ln1,
                qkv,
                probs,
                att,
                x_mid,
                ln2,
                fc_pre,
                fc_act,
            });
        }
    }

    let lnf = LnCache::run(&x, &weights.lnf_gain.data, &weights.lnf_bias.data, rows);
    let mut logits = vec![0.0; rows * v];
    linalg::linear(
        &lnf.out,
        &weights.out_weight.data,
        &weights.out_bias.data,
        rows,
        d,
        v,
        &mut logits,
    );
    let logits = Logits {
        data: logits,
        batch_size: b,
        seq_len: t,
        vocab_size: v,
    };
    let cache = keep.then(|| ForwardCache {
        batch_size: b,
        seq_len: t,
        tokens: tokens.ids.clone(),
        mask: mask.clone(),
        layers: caches,
        x_final: x,
        lnf,
    });
    Ok((logits, cache))
}

/// Logits for every position of every sequence in the batch.
pub fn forward(weights: &Weights, tokens: &TokenBatch, mask: &AttentionMask) -> Result<Logits> {
    run(weights, tokens, mask, false).map(|(l, _)| l)
}

/// Like [`forward`], keeping the activations needed by [`backward`].
pub fn forward_with_cache(
    weights: &Weights,
    tokens: &TokenBatch,
    mask: &AttentionMask,
) -> Result<(Logits, ForwardCache)> {
    run(weights, tokens, mask, true).map(|(l, c)| (l, c.expect("cache requested")))
}

/// Accumulates parameter gradients for upstream logit gradients `dlogits`
/// (same layout as [`Logits::data`]) into `grads`.
pub fn backward_into(
    weights: &Weights,
    cache: &ForwardCache,
    dlogits: &[f32],
    grads: &mut Gradients,
) {
    let cfg = &weights.config;
    let (b, t, d, f, v, h) = (
        cache.batch_size,
        cache.seq_len,
        cfg.d_model,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.n_heads,
    );
    let rows = b * t;
    assert_eq!(dlogits.len(), rows * v, "dlogits shape");

    let mut d_lnf = vec![0.0; rows * d];
    linalg::linear_backward(
        &cache.lnf.out,
        &weights.out_weight.data,
        dlogits,
        rows,
        d,
        v,
        &mut d_lnf,
        &mut grads.out_weight.data,
        &mut grads.out_bias.data,
        false,
    );
    let mut dx = vec![0.0; rows * d];
    linalg::layer_norm_backward(
        &cache.x_final,
        &weights.lnf_gain.data,
        &cache.lnf.mean,
        &cache.lnf.rstd,
        &d_lnf,
        &mut dx,
        &mut grads.lnf_gain.data,
        &mut grads.lnf_bias.data,
    );

    let dh = d / h;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut d_fc = vec![0.0; rows * f];
    let mut d_ln = vec![0.0; rows * d];
    let mut d_att = vec![0.0; rows * d];
    let mut d_qkv = vec![0.0; rows * 3 * d];
    let mut d_p = vec![0.0; t * t];

    for (lw, (lc, lg)) in weights
        .layers
        .iter()
        .zip(cache.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid)))).
        linalg::linear_backward(
            &lc.fc_act,
            &lw.proj_weight.data,
            &dx,
            rows,
            f,
            d,
            &mut d_fc,
            &mut lg.proj_weight.data,
            &mut lg.proj_bias.data,
            false,
        );
        for (g, &z) in d_fc.iter_mut().zip(&lc.fc_pre) {
            *g *= linalg::gelu_grad(z);
        }
        linalg::linear_backward(
            &lc.ln2.out,
            &lw.fc_weight.data,
            &d_fc,
            rows,
            d,
            f,
            &mut d_ln,
            &mut lg.fc_weight.data,
            &mut lg.fc_bias.data,
            false,
        );
        linalg::layer_norm_backward(
            &lc.x_mid,
            &lw.ln2_gain.data,
            &lc.ln2.mean,
            &lc.ln2.rstd,
            &d_ln,
            &mut dx,
            &mut lg.ln2_gain.data,
            &mut lg.ln2_bias.data,
        );

        // Attention branch: x_mid = x_in + out_proj(attn(qkv(ln1(x_in)))).
        linalg::linear_backward(
            &lc.att,
            &lw.attn_out_weight.data,
            &dx,
            rows,
            d,
            d,
            &mut d_att,
            &mut lg.attn_out_weight.data,
            &mut lg.attn_out_bias.data,
            false,
        );
        d_qkv.fill(0.0);
        let stride = 3 * d;
        for bi in 0..b {
            let base = bi * t * stride;
            for hi in 0..h {
                let p = &lc.probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                let d_out = View::new(&d_att[bi * t * d + hi * dh..], t, dh, d, 1);
                let v_view = View::new(&lc.qkv[base + 2 * d + hi * dh..], t, dh, stride, 1);
                linalg::gemm(1.0, d_out, v_view.t(), 0.0, ViewMut::dense(&mut d_p, t, t));
                linalg::gemm(
                    1.0,
                    View::dense(p, t, t).t(),
                    d_out,
                    1.0,
                    ViewMut::new(&mut d_qkv[base + 2 * d + hi * dh..], t, dh, stride, 1),
                );
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let gr = &mut d_p[i * t..(i + 1) * t];
                    let dot: f32 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (g, &pv) in gr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                let q_view = View::new(&lc.qkv[base + hi * dh..], t, dh, stride, 1);
                let k_view = View::new(&lc.qkv[base + d + hi * dh..], t, dh, stride, 1);
                linalg::gemm(
                    scale,
                    View::dense(&d_p, t, t),
                    k_view,
                    1.0,
                    ViewMut::new(&mut d_qkv[base + hi * dh..], t, dh, stride, 1),
                );
                linalg::gemm(
                    scale,
                    View::dense(&d_p, t, t).t(),
                    q_view,
                    1.0,
                    ViewMut::new(&mut d_qkv[base + d + hi * dh..], t, dh, stride, 1),
                );
            }
        }
        linalg::linear_backward(
            &lc.ln1.out,
            &lw.qkv_weight.data,
            &d_qkv,
            rows,
            d,
            3 * d,
            &mut d_ln,
            &mut lg.qkv_weight.data,
            &mut lg.qkv_bias.data,
            false,
        );
        linalg::layer_norm_backward(
            &lc.x_in,
            &lw.ln1_gain.data,
            &lc.ln1.mean,
            &lc.ln1.rstd,
            &d_ln,
            &mut dx,
            &mut lg.ln1_gain.data,
            &mut lg.ln1_bias.data,
        );
    }

    for (r, (&id, g)) in cache.tokens.iter().zip(dx.chunks_exact(d)).enumerate() {
        let pos = r % t;
        let te = &mut grads.tok_emb.data[id as usize * d..(id as usize + 1) * d];
        te.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        let pe = &mut grads.pos_emb.data[pos * d..(pos + 1) * d];
        pe.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Fresh gradient set for upstream logit gradients `dlogits`.
pub fn backward(weights: &Weights, cache: &ForwardCache, dlogits: &[f32]) -> Gradients {
    let mut grads = weights.zeros_like();
    backward_into(weights, cache, dlogits, &mut grads);
    grads
}

/// Scalar loss and its exact gradient for any loss expressed on the logits.
/// `loss_fn` returns the loss value and `d loss / d logits`.
pub fn value_and_grad<F>(
    weights: &Weights,
    tokens: &TokenBatch,
    mask: &AttentionMask,
    loss_fn: F,
) -> Result<(f32, Gradients)>
where
    F: FnOnce(&Logits) -> Result<(f32, Vec<f32>)>,
{
    let (logits, cache) = forward_with_cache(weights, tokens, mask)?;
    let (loss, dlogits) = loss_fn(&logits)?;
    Ok((loss, backward(weights, &cache, &dlogits)))
}

impl ForwardCache {
    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }
}
