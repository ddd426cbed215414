//! Run configuration: one JSON document, every section but `model` optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::{
    cipher_key, MixtureSpec, PretrainObjective, PretrainStream, TaskLayout, TaskSpec, Vocab,
    DEFAULT_SENTINELS,
};
use crate::decode::SamplerSettings;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{
    default_lr, AdamConfig, DiffusionSettings, EarlyStopping, LrSchedule, StageKind, StageSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub num_sentinels: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            num_sentinels: DEFAULT_SENTINELS,
        }
    }
}

fn default_layout() -> TaskLayout {
    TaskLayout {
        source_window: 16,
        target_window: 16,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainDataConfig {
    pub mixture: MixtureSpec,
    pub objective: PretrainObjective,
    pub seq_len: usize,
    pub batch_size: usize,
}

impl Default for PretrainDataConfig {
    fn default() -> Self {
        PretrainDataConfig {
            mixture: MixtureSpec::default(),
            objective: PretrainObjective::PrefixLm,
            seq_len: 64,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub spec: TaskSpec,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub batch_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            spec: TaskSpec::SubstitutionCipher {
                min_len: 4,
                max_len: 16,
                key: cipher_key(0),
            },
            train_examples: 1000,
            eval_examples: 200,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default)]
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f32>,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
}

fn default_clip() -> Option<f32> {
    AdamConfig::default().clip_norm
}

impl StageConfig {
    fn with(steps: u64, warmup_steps: u64) -> Self {
        StageConfig {
            steps,
            learning_rate: default_lr(),
            warmup_steps,
            checkpoint_every: 0,
            clip_norm: default_clip(),
            early_stopping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub pretrain: StageConfig,
    pub adapt: StageConfig,
    pub finetune: StageConfig,
    pub adaptation_steps: Vec<u64>,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            pretrain: StageConfig::with(2000, 100),
            adapt: StageConfig::with(0, 0),
            finetune: StageConfig::with(1000, 0),
            adaptation_steps: vec![0],
        }
    }
}

/// Sampler defaults; the target window always comes from the layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub num_samples: usize,
    pub tau: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let s = SamplerSettings::new(1);
        SamplerConfig {
            num_steps: s.num_steps,
            num_samples: s.num_samples,
            tau: s.tau,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            checkpoints: "runs/checkpoints".into(),
            logs: "runs/logs".into(),
            reports: "runs/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default = "default_layout")]
    pub layout: TaskLayout,
    #[serde(default)]
    pub pretrain_data: PretrainDataConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub stages: StagesConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub diffusion: DiffusionSettings,
    #[serde(default)]
    pub paths: Paths,
}

fn field(path: &str, reason: impl Into<String>) -> Error {
    Error::ConfigField {
        path: path.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact serialization.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab.num_sentinels)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| field("model", e.to_string()))?;
        let vocab = self.vocab();
        if self.model.vocab_size != vocab.len() {
            return Err(field(
                "model.vocab_size",
                format!(
                    "must equal the tokenizer size {} for {} sentinels",
                    vocab.len(),
                    self.vocab.num_sentinels
                ),
            ));
        }
        if self.layout.source_window == 0 || self.layout.target_window == 0 {
            return Err(field("layout", "windows must be positive"));
        }
        if self.layout.seq_len() > self.model.max_seq_len {
            return Err(field(
                "model.max_seq_len",
                format!(
                    "must hold the task layout of {} tokens",
                    self.layout.seq_len()
                ),
            ));
        }
        let pd = &self.pretrain_data;
        pd.mixture
            .validate()
            .map_err(|e| field("pretrain_data.mixture", e.to_string()))?;
        if pd.seq_len < 3 || pd.seq_len > self.model.max_seq_len {
            return Err(field(
                "pretrain_data.seq_len",
                "must lie in [3, model.max_seq_len]",
            ));
        }
        if pd.batch_size == 0 {
            return Err(field("pretrain_data.batch_size", "must be positive"));
        }
        if let PretrainObjective::SpanCorruption(sc) = pd.objective {
            if !(sc.noise_density > 0.0 && sc.noise_density < 1.0) || sc.mean_span_len == 0 {
                return Err(field(
                    "pretrain_data.objective",
                    "needs noise_density in (0, 1) and mean_span_len > 0",
                ));
            }
            if pd.mixture.max_chars + 1 + sc.target_len > pd.seq_len {
                return Err(field(
                    "pretrain_data.objective.target_len",
                    "documents plus targets exceed seq_len",
                ));
            }
        }
        self.task
            .spec
            .validate()
            .map_err(|e| field("task.spec", e.to_string()))?;
        let (src, tgt) = self.task.spec.max_lens();
        if src > self.layout.source_window {
            return Err(field(
                "layout.source_window",
                format!("task sources reach {src} characters"),
            ));
        }
        if tgt > self.layout.target_window {
            return Err(field(
                "layout.target_window",
                format!("task targets reach {tgt} characters"),
            ));
        }
        if self.task.train_examples == 0 || self.task.eval_examples == 0 {
            return Err(field(
                "task",
                "train_examples and eval_examples must be positive",
            ));
        }
        if self.task.batch_size == 0 {
            return Err(field("task.batch_size", "must be positive"));
        }
        for (name, s) in [
            ("pretrain", &self.stages.pretrain),
            ("adapt", &self.stages.adapt),
            ("finetune", &self.stages.finetune),
        ] {
            if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
                return Err(field(
                    &format!("stages.{name}.learning_rate"),
                    "must be positive",
                ));
            }
            if let Some(c) = s.clip_norm {
                if !(c > 0.0) {
                    return Err(field(
                        &format!("stages.{name}.clip_norm"),
                        "must be positive",
                    ));
                }
            }
            if let Some(es) = s.early_stopping {
                if es.eval_every == 0 || es.patience == 0 {
                    return Err(field(
                        &format!("stages.{name}.early_stopping"),
                        "eval_every and patience must be positive",
                    ));
                }
            }
        }
        if self.stages.adaptation_steps.is_empty() {
            return Err(field(
                "stages.adaptation_steps",
                "must list at least one budget",
            ));
        }
        if self.sampler.num_steps == 0 {
            return Err(field("sampler.num_steps", "must be at least 1"));
        }
        if self.sampler.num_samples == 0 {
            return Err(field("sampler.num_samples", "must be at least 1"));
        }
        if !(self.sampler.tau >= 0.0) {
            return Err(field(
                "sampler.tau",
                format!("must be >= 0, got {}", self.sampler.tau),
            ));
        }
        if !(self.diffusion.unroll_temperature >= 0.0) {
            return Err(field("diffusion.unroll_temperature", "must be >= 0"));
        }
        let (w1, w2) = (self.diffusion.w1, self.diffusion.w2);
        if !(w1 >= 0.0) {
            return Err(field("diffusion.w1", "must be >= 0"));
        }
        if !(w2 >= 0.0) {
            return Err(field("diffusion.w2", "must be >= 0"));
        }
        if w1 == 0.0 && w2 == 0.0 {
            return Err(field("diffusion", "w1 and w2 cannot both be zero"));
        }
        Ok(())
    }

    /// Creates every output directory and checks it accepts new files.
    pub fn check_paths(&self) -> Result<()> {
        for (name, dir) in [
            ("paths.checkpoints", &self.paths.checkpoints),
            ("paths.logs", &self.paths.logs),
            ("paths.reports", &self.paths.reports),
        ] {
            fs::create_dir_all(dir).map_err(|e| field(name, format!("{}: {e}", dir.display())))?;
            let probe = dir.join(".write-probe");
            fs::write(&probe, b"")
                .map_err(|e| field(name, format!("{} is not writable: {e}", dir.display())))?;
            fs::remove_file(&probe).map_err(|e| field(name, format!("{}: {e}", dir.display())))?;
        }
        Ok(())
    }

    pub fn sampler_settings(&self) -> SamplerSettings {
        SamplerSettings {
            num_steps: self.sampler.num_steps,
            num_samples: self.sampler.num_samples,
            tau: self.sampler.tau,
            target_window: self.layout.target_window,
            seed: self.sampler.seed,
        }
    }

    pub fn pretrain_stream(&self) -> PretrainStream {
        PretrainStream {
            vocab: self.vocab(),
            mixture: self.pretrain_data.mixture,
            objective: self.pretrain_data.objective,
            seq_len: self.pretrain_data.seq_len,
            batch_size: self.pretrain_data.batch_size,
            seed: self.seed,
        }
    }

    pub fn stage_spec(&self, name: &str, kind: StageKind, cfg: &StageConfig) -> StageSpec {
        StageSpec {
            schedule: LrSchedule {
                peak: cfg.learning_rate,
                warmup_steps: cfg.warmup_steps,
            },
            checkpoint_every: cfg.checkpoint_every,
            diffusion: self.diffusion,
            adam: AdamConfig {
                clip_norm: cfg.clip_norm,
                ..AdamConfig::default()
            },
            early_stopping: cfg.early_stopping,
            ..StageSpec::new(name, kind, cfg.steps, self.seed)
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}
