//! Task metrics and the inference-hyperparameter sweep.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{TaskLayout, TaskSpec, Vocab};
use crate::decode::{
    ar_task_decode, diffusion_task_decode, strip_padding, ArMode, SamplerSettings,
};
use crate::error::{Error, Result};
use crate::model::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    TokenF1,
    PassAtK,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::ExactMatch, Metric::TokenF1, Metric::PassAtK];
}

/// Decode settings echoed into a report; fields that do not apply are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SettingsEcho {
    pub steps: Option<usize>,
    pub samples: Option<usize>,
    pub tau: Option<f32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub model: String,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    #[serde(flatten)]
    pub settings: SettingsEcho,
}

/// Output of one decode: the chosen sequence and every candidate considered,
/// all with trailing padding removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub output: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
}

/// Anything that maps a source to decoded targets.
pub trait Decoder {
    fn decode(&self, source: &[u32], index: usize) -> Result<Decoded>;

    fn settings(&self) -> SettingsEcho;
}

pub struct DiffusionDecoder<'a> {
    pub weights: &'a Weights,
    pub layout: TaskLayout,
    pub vocab: &'a Vocab,
    pub settings: SamplerSettings,
}

/// Per-example decode seed: distinct examples get independent streams.
fn example_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Decoder for DiffusionDecoder<'_> {
    fn decode(&self, source: &[u32], index: usize) -> Result<Decoded> {
        let settings = SamplerSettings {
            seed: example_seed(self.settings.seed, index),
            ..self.settings
        };
        let res = diffusion_task_decode(self.weights, &self.layout, source, &settings, self.vocab)?;
        Ok(Decoded {
            output: strip_padding(res.winner()).to_vec(),
            candidates: res
                .candidates
                .iter()
                .map(|c| strip_padding(c).to_vec())
                .collect(),
        })
    }

    fn settings(&self) -> SettingsEcho {
        SettingsEcho {
            steps: Some(self.settings.num_steps),
            samples: Some(self.settings.num_samples),
            tau: Some(self.settings.tau),
            seed: Some(self.settings.seed),
        }
    }
}

pub struct ArDecoder<'a> {
    pub weights: &'a Weights,
    pub layout: TaskLayout,
    pub mode: ArMode,
}

impl Decoder for ArDecoder<'_> {
    fn decode(&self, source: &[u32], index: usize) -> Result<Decoded> {
        let mode = match self.mode {
            ArMode::Greedy => ArMode::Greedy,
            ArMode::Temperature { temperature, seed } => ArMode::Temperature {
                temperature,
                seed: example_seed(seed, index),
            },
        };
        let out = ar_task_decode(self.weights, &self.layout, source, mode)?;
        Ok(Decoded {
            candidates: vec![out.clone()],
            output: out,
        })
    }

    fn settings(&self) -> SettingsEcho {
        match self.mode {
            ArMode::Greedy => SettingsEcho::default(),
            ArMode::Temperature { temperature, seed } => SettingsEcho {
                tau: Some(temperature),
                seed: Some(seed),
                ..Default::default()
            },
        }
    }
}

/// Multiset overlap F1 between two token sequences. Two empty sequences
/// score 1; exactly one empty sequence scores 0.
pub fn token_f1(prediction: &[u32], reference: &[u32]) -> f64 {
    if prediction.is_empty() || reference.is_empty() {
        return if prediction.is_empty() && reference.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for &t in prediction {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / prediction.len() as f64;
    let r = common as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// An evaluation split: the task (for structural correctness checks) and its
/// `(source, target)` pairs.
pub struct EvalSet<'a> {
    pub task: &'a TaskSpec,
    pub pairs: &'a [(String, String)],
    pub vocab: &'a Vocab,
}

/// Decodes every example once and computes all metrics. Exact match compares
/// the pad-stripped output with the reference; pass@k counts an example when
/// any candidate satisfies the task relation.
pub fn evaluate_all(
    decoder: &dyn Decoder,
    set: &EvalSet<'_>,
    model: &str,
) -> Result<Vec<MetricReport>> {
    if set.pairs.is_empty() {
        return Err(Error::InvalidSettings("evaluation split is empty".into()));
    }
    let mut exact = 0usize;
    let mut passed = 0usize;
    let mut f1 = 0.0f64;
    for (i, (source, target)) in set.pairs.iter().enumerate() {
        let at = |e: Error| Error::DecodeAt {
            index: i,
            source: Box::new(e),
        };
        let src = set.vocab.tokenize(source).map_err(at)?;
        let reference = set.vocab.tokenize(target).map_err(at)?;
        let d = decoder.decode(&src, i).map_err(at)?;
        if d.output == reference {
            exact += 1;
        }
        f1 += token_f1(&d.output, &reference);
        let any = d.candidates.iter().any(|c| match set.vocab.detokenize(c) {
            Ok(text) => set.task.is_correct(source, &text),
            Err(_) => false,
        });
        if any {
            passed += 1;
        }
    }
    let n = set.pairs.len();
    let settings = decoder.settings();
    let make = |metric, value| MetricReport {
        task: set.task.id().to_string(),
        model: model.to_string(),
        metric,
        value,
        n,
        settings,
    };
    Ok(vec![
        make(Metric::ExactMatch, exact as f64 / n as f64),
        make(Metric::TokenF1, f1 / n as f64),
        make(Metric::PassAtK, passed as f64 / n as f64),
    ])
}

pub fn evaluate(
    decoder: &dyn Decoder,
    set: &EvalSet<'_>,
    model: &str,
    metric: Metric,
) -> Result<MetricReport> {
    Ok(evaluate_all(decoder, set, model)?
        .into_iter()
        .find(|r| r.metric == metric)
        .expect("every metric is reported"))
}

/// One report per `(num_steps, num_samples)` cell, all on the same split and
/// base seed.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    weights: &Weights,
    layout: TaskLayout,
    base: &SamplerSettings,
    set: &EvalSet<'_>,
    model: &str,
    metric: Metric,
    steps_grid: &[usize],
    samples_grid: &[usize],
) -> Result<Vec<MetricReport>> {
    if steps_grid.is_empty() || samples_grid.is_empty() {
        return Err(Error::InvalidSettings(
            "sweep grids must be nonempty".into(),
        ));
    }
    let mut out = Vec::with_capacity(steps_grid.len() * samples_grid.len());
    for &num_steps in steps_grid {
        for &num_samples in samples_grid {
            let decoder = DiffusionDecoder {
                weights,
                layout,
                vocab: set.vocab,
                settings: SamplerSettings {
                    num_steps,
                    num_samples,
                    ..*base
                },
            };
            out.push(evaluate(&decoder, set, model, metric)?);
        }
    }
    Ok(out)
}
