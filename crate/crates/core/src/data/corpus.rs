//! Synthetic pretraining mixture and the batch streams fed to training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::example::{
    batch, make_prefix_lm_example, make_task_example, Batch, TaskLayout, TrainingExample,
};
use super::span::{make_span_corruption_example, SpanCorruption};
use super::tasks::TaskSpec;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::rng;

const DETS: &[&str] = &["the", "a", "one", "every", "that"];
const ADJS: &[&str] = &[
    "small", "red", "quiet", "old", "bright", "lazy", "quick", "green",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "river", "house", "bird", "tree", "city", "road", "friend", "book",
];
const VERBS: &[&str] = &[
    "sees", "finds", "likes", "follows", "keeps", "moves", "reads", "builds",
];
const PREPS: &[&str] = &["near", "under", "behind", "over", "with"];
const IDENTS: &[&str] = &[
    "x", "y", "n", "i", "total", "items", "count", "value", "acc",
];
const FUNCS: &[&str] = &["f", "g", "step", "run", "update", "size"];

/// Mixture of natural-text-like and python-like documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub natural_fraction: f64,
    pub max_chars: usize,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            natural_fraction: 0.8,
            max_chars: 48,
        }
    }
}

fn pick<'a>(r: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs[r.random_range(0..xs.len())]
}

fn sentence(r: &mut impl Rng) -> String {
    let mut s = format!("{} ", pick(r, DETS));
    if r.random_bool(0.5) {
        s.push_str(pick(r, ADJS));
        s.push(' ');
    }
    s.push_str(pick(r, NOUNS));
    s.push(' ');
    s.push_str(pick(r, VERBS));
    s.push(' ');
    s.push_str(pick(r, DETS));
    s.push(' ');
    s.push_str(pick(r, NOUNS));
    if r.random_bool(0.3) {
        s.push_str(&format!(
            " {} {} {}",
            pick(r, PREPS),
            pick(r, DETS),
            pick(r, NOUNS)
        ));
    }
    s.push_str(". ");
    s
}

fn code_line(r: &mut impl Rng) -> String {
    let a = pick(r, IDENTS);
    let b = pick(r, IDENTS);
    match r.random_range(0..5) {
        0 => format!("def {}({}):\n", pick(r, FUNCS), a),
        1 => format!("    return {a}+{}\n", r.random_range(0..10)),
        2 => format!("{a} = {b}*{}\n", r.random_range(1..10)),
        3 => format!("for {a} in range({}):\n", r.random_range(1..20)),
        _ => format!("    {a} += {b}\n"),
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.natural_fraction) || self.max_chars < 2 {
            return Err(Error::InvalidSettings(
                "mixture needs natural_fraction in [0, 1] and max_chars >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Document number `index`, at most `max_chars` characters and at least 2.
    pub fn doc(&self, seed: u64, index: u64) -> String {
        let mut r = rng::stream(rng::derive(seed, "mixture"), index);
        let natural = r.random_bool(self.natural_fraction);
        let mut text = String::new();
        while text.len() < self.max_chars {
            if natural {
                text.push_str(&sentence(&mut r));
            } else {
                text.push_str(&code_line(&mut r));
            }
        }
        let start = if natural {
            0
        } else {
            r.random_range(0..text.len() / 2)
        };
        let len = r.random_range(self.max_chars / 2..=self.max_chars).max(2);
        text[start..].chars().take(len).collect()
    }
}

/// Example format used for pretraining documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PretrainObjective {
    PrefixLm,
    SpanCorruption(SpanCorruption),
}

/// Deterministic source of training batches: batch `step` is a pure function
/// of the source's settings and `step`, so training can resume anywhere.
pub trait BatchSource {
    fn batch(&self, step: u64) -> Result<Batch>;

    /// Short identifier recorded in manifests.
    fn describe(&self) -> String;
}

/// Pretraining documents from the synthetic mixture.
#[derive(Debug, Clone)]
pub struct PretrainStream {
    pub vocab: Vocab,
    pub mixture: MixtureSpec,
    pub objective: PretrainObjective,
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainStream {
    pub fn example(&self, index: u64) -> Result<TrainingExample> {
        let text = self.mixture.doc(self.seed, index);
        let doc = self.vocab.tokenize(&text)?;
        let mut r = rng::stream(rng::derive(self.seed, "pretrain-format"), index);
        match self.objective {
            PretrainObjective::PrefixLm => {
                let doc = &doc[..doc.len().min(self.seq_len - 1)];
                let split = r.random_range(1..doc.len());
                make_prefix_lm_example(doc, split, self.seq_len, self.seq_len - split - 1)
            }
            PretrainObjective::SpanCorruption(cfg) => {
                // Each span shrinks to one sentinel, so the input never
                // outgrows the document.
                let keep = doc.len().min(self.seq_len.saturating_sub(cfg.target_len));
                let ex = make_span_corruption_example(&doc[..keep], &cfg, &self.vocab, &mut r)?;
                if ex.tokens.len() > self.seq_len {
                    return Err(Error::InvalidExample(format!(
                        "span-corruption example of {} tokens exceeds seq_len {}",
                        ex.tokens.len(),
                        self.seq_len
                    )));
                }
                Ok(ex)
            }
        }
    }
}

impl BatchSource for PretrainStream {
    fn batch(&self, step: u64) -> Result<Batch> {
        let base = step * self.batch_size as u64;
        let examples = (0..self.batch_size as u64)
            .map(|i| self.example(base + i))
            .collect::<Result<Vec<_>>>()?;
        batch(&examples, self.seq_len)
    }

    fn describe(&self) -> String {
        format!(
            "mixture(natural={},max_chars={},seed={})",
            self.mixture.natural_fraction, self.mixture.max_chars, self.seed
        )
    }
}

/// A fixed example set drawn in epoch-shuffled order.
#[derive(Debug, Clone)]
pub struct ExampleSet {
    pub examples: Vec<TrainingExample>,
    pub batch_size: usize,
    pub pad_to: usize,
    pub seed: u64,
    pub label: String,
}

impl ExampleSet {
    /// Formats task pairs with a fixed layout.
    pub fn from_pairs(
        pairs: &[(String, String)],
        vocab: &Vocab,
        layout: &TaskLayout,
        batch_size: usize,
        seed: u64,
        label: impl Into<String>,
    ) -> Result<Self> {
        let examples = pairs
            .iter()
            .map(|(s, t)| make_task_example(&vocab.tokenize(s)?, &vocab.tokenize(t)?, layout))
            .collect::<Result<Vec<_>>>()?;
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(ExampleSet {
            examples,
            batch_size,
            pad_to: layout.seq_len(),
            seed,
            label: label.into(),
        })
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut rng::stream(rng::derive(self.seed, "epoch"), epoch));
        order
    }
}

impl BatchSource for ExampleSet {
    fn batch(&self, step: u64) -> Result<Batch> {
        let n = self.examples.len() as u64;
        let start = step * self.batch_size as u64;
        let mut picked = Vec::with_capacity(self.batch_size);
        let mut epoch = u64::MAX;
        let mut order = Vec::new();
        for p in start..start + self.batch_size as u64 {
            if p / n != epoch {
                epoch = p / n;
                order = self.epoch_order(epoch);
            }
            picked.push(self.examples[order[(p % n) as usize]].clone());
        }
        batch(&picked, self.pad_to)
    }

    fn describe(&self) -> String {
        format!(
            "{}(n={},seed={})",
            self.label,
            self.examples.len(),
            self.seed
        )
    }
}

/// Pairs for a task, formatted with its layout.
pub fn task_examples(
    spec: &TaskSpec,
    seed: u64,
    n: usize,
    vocab: &Vocab,
    layout: &TaskLayout,
) -> Result<Vec<TrainingExample>> {
    super::tasks::generate_task_pairs(spec, seed, n)
        .iter()
        .map(|(s, t)| make_task_example(&vocab.tokenize(s)?, &vocab.tokenize(t)?, layout))
        .collect()
}
