//! Tokenization, example formatting, synthetic tasks and batch streams.

mod corpus;
mod example;
mod span;
mod tasks;
mod vocab;

pub use corpus::{
    task_examples, BatchSource, ExampleSet, MixtureSpec, PretrainObjective, PretrainStream,
};
pub use example::{
    batch, batches, make_prefix_lm_example, make_task_example, Batch, TaskLayout, TrainingExample,
};
pub use span::{
    choose_spans, make_span_corruption_example, reconstruct, span_corruption_from_spans,
    SpanCorruption,
};
pub use tasks::{
    check_python_template, cipher_key, decipher, encipher, generate_task_pairs, read_pairs_jsonl,
    write_pairs_jsonl, CodeTemplate, TaskSpec,
};
pub use vocab::{Vocab, BOS, DEFAULT_SENTINELS, PAD, SEP};
