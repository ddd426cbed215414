use serde::{Deserialize, Serialize};

use super::vocab::{PAD, SEP};
use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Input region followed by target region, with the positions that carry loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: Vec<u32>,
    pub prefix_len: usize,
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidExample(m));
        if self.tokens.len() != self.loss_mask.len() {
            return bad("tokens and loss_mask lengths differ".into());
        }
        if self.tokens.len() > max_seq_len {
            return bad(format!(
                "{} tokens exceed max_seq_len {max_seq_len}",
                self.tokens.len()
            ));
        }
        if self.prefix_len > self.tokens.len() {
            return bad("prefix_len past end of example".into());
        }
        if self.loss_mask[..self.prefix_len].iter().any(|&m| m) {
            return bad("loss mask set inside the input region".into());
        }
        if !self.loss_mask.iter().any(|&m| m) {
            return bad("loss mask is empty".into());
        }
        Ok(())
    }

    pub fn input(&self) -> &[u32] {
        &self.tokens[..self.prefix_len]
    }

    pub fn target(&self) -> &[u32] {
        &self.tokens[self.prefix_len..]
    }
}

/// Prefix-LM formatting: `doc[..split] + SEP` as input, `doc[split..]`
/// truncated or padded to `target_len` as target. The whole target region,
/// padding included, carries loss.
pub fn make_prefix_lm_example(
    doc: &[u32],
    split: usize,
    total_len: usize,
    target_len: usize,
) -> Result<TrainingExample> {
    if split == 0 || split >= doc.len() {
        return Err(Error::InvalidExample(format!(
            "split {split} must lie in [1, {})",
            doc.len()
        )));
    }
    if target_len == 0 {
        return Err(Error::InvalidExample("target_len must be positive".into()));
    }
    let prefix_len = split + 1;
    if prefix_len + target_len > total_len {
        return Err(Error::InvalidExample(format!(
            "input of {prefix_len} plus target of {target_len} exceeds capacity {total_len}"
        )));
    }
    let mut tokens = Vec::with_capacity(prefix_len + target_len);
    tokens.extend_from_slice(&doc[..split]);
    tokens.push(SEP);
    tokens.extend(doc[split..].iter().copied().take(target_len));
    tokens.resize(prefix_len + target_len, PAD);
    let mut loss_mask = vec![false; prefix_len];
    loss_mask.resize(prefix_len + target_len, true);
    Ok(TrainingExample {
        tokens,
        prefix_len,
        loss_mask,
    })
}

/// Fixed windows for supervised task examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLayout {
    pub source_window: usize,
    pub target_window: usize,
}

impl TaskLayout {
    pub fn prefix_len(&self) -> usize {
        self.source_window + 1
    }

    pub fn seq_len(&self) -> usize {
        self.source_window + 1 + self.target_window
    }

    /// Conditioning tokens: the source right-padded to `source_window`.
    pub fn prompt(&self, source: &[u32]) -> Result<Vec<u32>> {
        if source.len() > self.source_window {
            return Err(Error::InvalidExample(format!(
                "source of {} tokens exceeds window {}",
                source.len(),
                self.source_window
            )));
        }
        let mut p = source.to_vec();
        p.resize(self.source_window, PAD);
        Ok(p)
    }
}

/// Task formatting: source padded to a fixed window, SEP, target padded to a
/// fixed window. Fixed windows keep source position `i` at a constant offset
/// from target position `i`.
pub fn make_task_example(
    source: &[u32],
    target: &[u32],
    layout: &TaskLayout,
) -> Result<TrainingExample> {
    if target.len() > layout.target_window {
        return Err(Error::InvalidExample(format!(
            "target of {} tokens exceeds window {}",
            target.len(),
            layout.target_window
        )));
    }
    if layout.target_window == 0 {
        return Err(Error::InvalidExample(
            "target window must be positive".into(),
        ));
    }
    let mut tokens = layout.prompt(source)?;
    tokens.push(SEP);
    tokens.extend_from_slice(target);
    tokens.resize(layout.seq_len(), PAD);
    let mut loss_mask = vec![false; layout.prefix_len()];
    loss_mask.resize(layout.seq_len(), true);
    Ok(TrainingExample {
        tokens,
        prefix_len: layout.prefix_len(),
        loss_mask,
    })
}

/// Right-padded batch of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub prefix_lens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.tokens.batch_size()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.seq_len()
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        let t = self.seq_len();
        &self.loss_mask[b * t..(b + 1) * t]
    }

    pub fn num_loss_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// A batch holding only the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let t = self.seq_len();
        let mut ids = Vec::with_capacity(rows.len() * t);
        let mut mask = Vec::with_capacity(rows.len() * t);
        for &b in rows {
            ids.extend_from_slice(self.tokens.row(b));
            mask.extend_from_slice(self.mask_row(b));
        }
        Ok(Batch {
            tokens: TokenBatch::new(ids, rows.len(), t)?,
            prefix_lens: rows.iter().map(|&b| self.prefix_lens[b]).collect(),
            loss_mask: mask,
        })
    }
}

/// Stacks examples into a `[n, pad_to]` batch, right-padding with pad ids.
/// Batch padding never carries loss.
pub fn batch(examples: &[TrainingExample], pad_to: usize) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut ids = Vec::with_capacity(examples.len() * pad_to);
    let mut mask = Vec::with_capacity(examples.len() * pad_to);
    for (i, ex) in examples.iter().enumerate() {
        if ex.tokens.len() > pad_to {
            return Err(Error::InvalidExample(format!(
                "example {i} has {} tokens, exceeding pad_to {pad_to}",
                ex.tokens.len()
            )));
        }
        ids.extend_from_slice(&ex.tokens);
        ids.resize((i + 1) * pad_to, PAD);
        mask.extend_from_slice(&ex.loss_mask);
        mask.resize((i + 1) * pad_to, false);
    }
    Ok(Batch {
        tokens: TokenBatch::new(ids, examples.len(), pad_to)?,
        prefix_lens: examples.iter().map(|e| e.prefix_len).collect(),
        loss_mask: mask,
    })
}

/// Splits `examples` into consecutive batches of at most `batch_size`.
pub fn batches(
    examples: &[TrainingExample],
    batch_size: usize,
    pad_to: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidSettings("batch_size must be positive".into()));
    }
    examples
        .chunks(batch_size)
        .map(|c| batch(c, pad_to))
        .collect()
}
