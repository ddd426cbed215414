//! One training stage: a fixed number of optimizer updates over a batch
//! source, with periodic checkpoints and a per-step metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loss::{ar_loss, sundae_loss, DiffusionSettings, LossOutput};
use super::optim::{Adam, AdamConfig, LrSchedule};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta, Moments, Sidecar};
use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Weights};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Ar,
    Diffusion,
}

impl StageKind {
    /// The attention mode every stage of this kind runs under.
    pub fn attention(self) -> AttentionMode {
        match self {
            StageKind::Ar => AttentionMode::Causal,
            StageKind::Diffusion => AttentionMode::FullBidirectional,
        }
    }
}

/// Stop once the validation metric (higher is better) has not improved for
/// `patience` consecutive evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub eval_every: u64,
    #[serde(default = "default_patience")]
    pub patience: u32,
}

fn default_patience() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    pub steps: u64,
    pub attention: AttentionMode,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Zero writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub diffusion: DiffusionSettings,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, kind: StageKind, steps: u64, seed: u64) -> Self {
        StageSpec {
            name: name.into(),
            kind,
            steps,
            attention: kind.attention(),
            schedule: LrSchedule::default(),
            checkpoint_every: 0,
            seed,
            diffusion: DiffusionSettings::default(),
            adam: AdamConfig::default(),
            early_stopping: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::StageConfig {
                stage: self.name.clone(),
                reason,
            })
        };
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return fail("stage name must be a non-empty file-name fragment".into());
        }
        if self.attention != self.kind.attention() {
            return fail(format!(
                "{:?} stages require {} attention, got {}",
                self.kind,
                self.kind.attention(),
                self.attention
            ));
        }
        if let Some(es) = self.early_stopping {
            if es.eval_every == 0 || es.patience == 0 {
                return fail("early stopping needs eval_every > 0 and patience > 0".into());
            }
        }
        self.schedule.validate()?;
        self.diffusion.validate()
    }

    pub fn checkpoint_name(&self, step: u64) -> String {
        format!("{}_{}.ckpt", self.name, step)
    }
}

/// Where a stage begins: weights, optional optimizer moments, and the number
/// of updates already applied.
#[derive(Debug, Clone)]
pub struct StageStart {
    pub weights: Weights,
    pub moments: Option<Moments>,
    pub step: u64,
}

impl StageStart {
    pub fn fresh(weights: Weights) -> Self {
        StageStart {
            weights,
            moments: None,
            step: 0,
        }
    }

    /// Resumes from a checkpoint written by the same stage.
    pub fn resume(ckpt: Checkpoint) -> Self {
        StageStart {
            step: ckpt.meta.step,
            weights: ckpt.weights,
            moments: ckpt.moments,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageIo {
    pub out_dir: PathBuf,
    /// Per-step JSON-lines log, appended to.
    pub metrics_log: Option<PathBuf>,
    /// Hash of the checkpoint this stage started from.
    pub parent_sha256: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub weights: Weights,
    pub moments: Moments,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<Sidecar>,
    pub losses: Vec<f32>,
    pub stopped_early: bool,
}

impl StageOutcome {
    pub fn final_sha256(&self) -> &str {
        &self
            .checkpoints
            .last()
            .expect("a stage always writes a final checkpoint")
            .sha256
    }
}

/// Validation hook for early stopping: metric for the current weights.
pub type Validator<'a> = dyn FnMut(&Weights, u64) -> Result<f64> + 'a;

#[derive(Serialize)]
struct MetricsRecord<'a> {
    step: u64,
    stage: &'a str,
    loss: f32,
    #[serde(rename = "L1", skip_serializing_if = "Option::is_none")]
    l1: Option<f32>,
    #[serde(rename = "L2", skip_serializing_if = "Option::is_none")]
    l2: Option<f32>,
    learning_rate: f32,
    wall_ms: f64,
}

struct Run<'a> {
    stage: &'a StageSpec,
    io: &'a StageIo,
    checkpoints: Vec<Sidecar>,
}

impl Run<'_> {
    fn save(&mut self, weights: &Weights, moments: &Moments, step: u64) -> Result<PathBuf> {
        let path = self.io.out_dir.join(self.stage.checkpoint_name(step));
        let parent = match self.checkpoints.last() {
            Some(prev) => Some(prev.sha256.clone()),
            None => self.io.parent_sha256.clone(),
        };
        let ckpt = Checkpoint {
            weights: weights.clone(),
            meta: CheckpointMeta {
                stage: self.stage.name.clone(),
                step,
                attention_mode: self.stage.attention,
            },
            moments: Some(moments.clone()),
        };
        let side = checkpoint::save_with_sidecar(&path, &ckpt, parent)?;
        self.checkpoints.push(side);
        Ok(path)
    }

    fn dump_non_finite(&self, weights: &Weights, step: u64, loss: f32) -> Result<Error> {
        let dump = self
            .io
            .out_dir
            .join(format!("{}_{}.nonfinite.json", self.stage.name, step));
        let first_bad = weights
            .named_tensors()
            .into_iter()
            .find(|(_, t)| t.data.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n);
        let state = serde_json::json!({
            "stage": self.stage.name,
            "step": step,
            "loss": loss.to_string(),
            "first_non_finite_tensor": first_bad,
            "learning_rate": self.stage.schedule.at(step),
        });
        checkpoint::write_atomic(&dump, serde_json::to_string_pretty(&state)?.as_bytes())?;
        let ckpt = Checkpoint {
            weights: weights.clone(),
            meta: CheckpointMeta {
                stage: self.stage.name.clone(),
                step,
                attention_mode: self.stage.attention,
            },
            moments: None,
        };
        checkpoint::save(
            &self
                .io
                .out_dir
                .join(format!("{}_{}.nonfinite.ckpt", self.stage.name, step)),
            &ckpt,
        )?;
        Ok(Error::NonFiniteLoss {
            stage: self.stage.name.clone(),
            step,
            dump,
        })
    }
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Loss and gradients for one step of `stage`.
pub fn stage_loss(
    stage: &StageSpec,
    weights: &Weights,
    data: &dyn BatchSource,
    regular: Range<u32>,
    step: u64,
) -> Result<LossOutput> {
    let batch = data.batch(step)?;
    match stage.kind {
        StageKind::Ar => ar_loss(weights, &batch, stage.attention),
        StageKind::Diffusion => {
            let mut r = rng::stream(rng::derive(stage.seed, "step"), step);
            sundae_loss(weights, &batch, &stage.diffusion, regular, &mut r)
        }
    }
}

/// Runs `stage.steps - start.step` updates. Batch `s` and the randomness of
/// update `s` depend only on `s`, so resuming from a checkpoint written at
/// step `k` reproduces the uninterrupted run bit for bit.
pub fn train(
    stage: &StageSpec,
    start: StageStart,
    data: &dyn BatchSource,
    regular: Range<u32>,
    io: &StageIo,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<StageOutcome> {
    stage.validate()?;
    if start.step > stage.steps {
        return Err(Error::StageConfig {
            stage: stage.name.clone(),
            reason: format!(
                "start step {} is past the stage length {}",
                start.step, stage.steps
            ),
        });
    }
    if stage.early_stopping.is_some() && validator.is_none() {
        return Err(Error::StageConfig {
            stage: stage.name.clone(),
            reason: "early stopping requires a validator".into(),
        });
    }
    fs::create_dir_all(&io.out_dir).map_err(|e| Error::io(&io.out_dir, e))?;
    let mut log = io.metrics_log.as_deref().map(open_log).transpose()?;
    let mut weights = start.weights;
    let mut opt = match start.moments {
        Some(m) => Adam::from_moments(&weights, stage.adam, m)?,
        None => Adam::new(&weights, stage.adam),
    };
    let mut run = Run {
        stage,
        io,
        checkpoints: Vec::new(),
    };
    let mut losses = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0u32;
    let mut stopped_early = false;
    let mut step = start.step;
    let mut last_saved = None;
    let t0 = Instant::now();

    while step < stage.steps {
        let mut out = stage_loss(stage, &weights, data, regular.clone(), step)?;
        if !out.loss.is_finite() || !out.grads.is_finite() {
            return Err(run.dump_non_finite(&weights, step, out.loss)?);
        }
        let lr = stage.schedule.at(step);
        opt.step(&mut weights, &mut out.grads, lr);
        if !weights.is_finite() {
            return Err(run.dump_non_finite(&weights, step + 1, out.loss)?);
        }
        step += 1;
        losses.push(out.loss);
        if let Some(log) = log.as_mut() {
            let rec = MetricsRecord {
                step,
                stage: &stage.name,
                loss: out.loss,
                l1: out.l1,
                l2: out.l2,
                learning_rate: lr,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            serde_json::to_writer(&mut *log, &rec)?;
            writeln!(log).map_err(|e| Error::io(io.metrics_log.clone().unwrap_or_default(), e))?;
        }
        if step.is_multiple_of(100) {
            log::info!(
                "{} step {step}/{} loss {:.4}",
                stage.name,
                stage.steps,
                out.loss
            );
        }
        if stage.checkpoint_every > 0 && step.is_multiple_of(stage.checkpoint_every) {
            run.save(&weights, &opt.moments, step)?;
            last_saved = Some(step);
        }
        if let (Some(es), Some(v)) = (stage.early_stopping, validator.as_mut()) {
            if step.is_multiple_of(es.eval_every) {
                let metric = v(&weights, step)?;
                if metric > best {
                    best = metric;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= es.patience {
                        log::info!(
                            "{}: no improvement for {} evaluations, stopping at {step}",
                            stage.name,
                            es.patience
                        );
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    if let Some(log) = log.as_mut() {
        log.flush()
            .map_err(|e| Error::io(io.metrics_log.clone().unwrap_or_default(), e))?;
    }
    let final_checkpoint = if last_saved == Some(step) {
        io.out_dir.join(stage.checkpoint_name(step))
    } else {
        run.save(&weights, &opt.moments, step)?
    };
    Ok(StageOutcome {
        weights,
        moments: opt.moments,
        final_step: step,
        final_checkpoint,
        checkpoints: run.checkpoints,
        losses,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ExampleSet, TaskLayout, Vocab};
    use crate::model::{init_weights, ModelConfig};

    fn setup() -> (Weights, ExampleSet, Vocab) {
        let v = Vocab::default();
        let layout = TaskLayout {
            source_window: 4,
            target_window: 4,
        };
        let pairs: Vec<(String, String)> = (0..8)
            .map(|i| (format!("ab{i}"), format!("{i}ba")))
            .collect();
        let set = ExampleSet::from_pairs(&pairs, &v, &layout, 4, 1, "toy").unwrap();
        let w = init_weights(&ModelConfig {
            vocab_size: v.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: layout.seq_len(),
            seed: 2,
        })
        .unwrap();
        (w, set, v)
    }

    fn regular(v: &Vocab) -> Range<u32> {
        v.first_regular()..v.len() as u32
    }

    #[test]
    fn zero_steps_writes_start_as_final_checkpoint() {
        let (w, set, v) = setup();
        let dir = tempfile::tempdir().unwrap();
        let stage = StageSpec::new("ft", StageKind::Diffusion, 0, 1);
        let io = StageIo {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let out = train(
            &stage,
            StageStart::fresh(w.clone()),
            &set,
            regular(&v),
            &io,
            None,
        )
        .unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.checkpoints.len(), 1);
        let ck = checkpoint::load(&out.final_checkpoint).unwrap();
        assert_eq!(ck.weights, w);
        assert_eq!(ck.meta.attention_mode, AttentionMode::FullBidirectional);
    }

    #[test]
    fn diffusion_stage_rejects_causal_mask() {
        let (w, set, v) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut stage = StageSpec::new("ft", StageKind::Diffusion, 1, 1);
        stage.attention = AttentionMode::Causal;
        let io = StageIo {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let err = train(&stage, StageStart::fresh(w), &set, regular(&v), &io, None).unwrap_err();
        assert!(matches!(err, Error::StageConfig { .. }), "{err}");
    }

    #[test]
    fn checkpoints_metrics_and_resume() {
        let (w, set, v) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut stage = StageSpec::new("ft", StageKind::Diffusion, 6, 3);
        stage.checkpoint_every = 4;
        let log = dir.path().join("metrics.jsonl");
        let io = StageIo {
            out_dir: dir.path().to_path_buf(),
            metrics_log: Some(log.clone()),
            parent_sha256: Some("abc".into()),
        };
        let full = train(&stage, StageStart::fresh(w), &set, regular(&v), &io, None).unwrap();
        let names: Vec<&str> = full.checkpoints.iter().map(|s| s.file.as_str()).collect();
        assert_eq!(names, ["ft_4.ckpt", "ft_6.ckpt"]);
        assert_eq!(full.checkpoints[0].parent_sha256.as_deref(), Some("abc"));
        assert_eq!(
            full.checkpoints[1].parent_sha256,
            Some(full.checkpoints[0].sha256.clone())
        );

        let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 6);
        for key in [
            "step",
            "stage",
            "loss",
            "L1",
            "L2",
            "learning_rate",
            "wall_ms",
        ] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }

        let mid = checkpoint::load(&dir.path().join("ft_4.ckpt")).unwrap();
        let io2 = StageIo {
            out_dir: dir.path().join("resumed"),
            ..Default::default()
        };
        let resumed = train(
            &stage,
            StageStart::resume(mid),
            &set,
            regular(&v),
            &io2,
            None,
        )
        .unwrap();
        assert_eq!(resumed.weights, full.weights);
        assert_eq!(resumed.losses[..], full.losses[4..]);
    }

    #[test]
    fn early_stopping_halts_on_flat_metric() {
        let (w, set, v) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut stage = StageSpec::new("ar", StageKind::Ar, 100, 3);
        stage.early_stopping = Some(EarlyStopping {
            eval_every: 2,
            patience: 3,
        });
        let io = StageIo {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let mut flat = |_: &Weights, _: u64| Ok(0.5);
        let out = train(
            &stage,
            StageStart::fresh(w),
            &set,
            regular(&v),
            &io,
            Some(&mut flat),
        )
        .unwrap();
        assert!(out.stopped_early);
        // First evaluation sets the best; three more without improvement.
        assert_eq!(out.final_step, 8);
    }

    #[test]
    fn non_finite_loss_dumps_state() {
        let (mut w, set, v) = setup();
        w.out_bias.data[5] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let stage = StageSpec::new("ar", StageKind::Ar, 3, 3);
        let io = StageIo {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        match train(&stage, StageStart::fresh(w), &set, regular(&v), &io, None) {
            Err(Error::NonFiniteLoss { step, dump, .. }) => {
                assert_eq!(step, 0);
                assert!(dump.exists());
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
