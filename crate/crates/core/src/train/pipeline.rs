//! Three-stage AR-to-diffusion orchestration: AR pretraining, optional
//! diffusion continued pretraining for N steps, diffusion fine-tuning.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stage::{train, StageIo, StageKind, StageOutcome, StageSpec, StageStart};
use crate::checkpoint;
use crate::data::{Batch, BatchSource};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub pretrain: StageSpec,
    /// Template for the continued-pretraining stage; its `steps` is replaced
    /// by each adaptation budget in turn.
    pub adapt: StageSpec,
    pub finetune: StageSpec,
    pub adaptation_steps: Vec<u64>,
    /// Fine-tuning seeds; every variant is fine-tuned once per seed.
    #[serde(default)]
    pub finetune_seeds: Vec<u64>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let check_kind = |s: &StageSpec, kind: StageKind| {
            if s.kind != kind {
                return Err(Error::StageConfig {
                    stage: s.name.clone(),
                    reason: format!("expected a {kind:?} stage"),
                });
            }
            s.validate()
        };
        check_kind(&self.pretrain, StageKind::Ar)?;
        check_kind(&self.adapt, StageKind::Diffusion)?;
        check_kind(&self.finetune, StageKind::Diffusion)?;
        if self.adaptation_steps.is_empty() {
            return Err(Error::InvalidSettings(
                "plan needs at least one adaptation budget".into(),
            ));
        }
        Ok(())
    }

    fn seeds(&self) -> Vec<u64> {
        if self.finetune_seeds.is_empty() {
            vec![self.finetune.seed]
        } else {
            self.finetune_seeds.clone()
        }
    }
}

/// Shifts a batch source so that step `s` yields the inner source's batch
/// `s + offset`; continued pretraining sees data the first stage has not.
pub struct Offset<'a> {
    pub inner: &'a dyn BatchSource,
    pub offset: u64,
}

impl BatchSource for Offset<'_> {
    fn batch(&self, step: u64) -> Result<Batch> {
        self.inner.batch(step + self.offset)
    }

    fn describe(&self) -> String {
        format!("{}+{}", self.inner.describe(), self.offset)
    }
}

pub struct PipelineData<'a> {
    pub pretrain: &'a dyn BatchSource,
    pub finetune: &'a dyn BatchSource,
    /// Replacement range for diffusion corruption.
    pub regular: Range<u32>,
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub adaptation_steps: u64,
    pub seed: u64,
    pub weights: Weights,
    pub checkpoint: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Ar2DiffOutcome {
    pub ancestor: PathBuf,
    pub ancestor_sha256: String,
    pub variants: Vec<Variant>,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    pub attention: AttentionMode,
    pub seed: u64,
    pub start_step: u64,
    pub end_step: u64,
    pub data: String,
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub parent_sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stages: Vec<StageRecord>,
    pub adaptation_steps: Vec<u64>,
    pub seeds: Vec<u64>,
}

fn record(
    spec: &StageSpec,
    start_step: u64,
    data: &dyn BatchSource,
    out: &StageOutcome,
    parent: Option<String>,
) -> StageRecord {
    StageRecord {
        name: spec.name.clone(),
        kind: spec.kind,
        attention: spec.attention,
        seed: spec.seed,
        start_step,
        end_step: out.final_step,
        data: data.describe(),
        checkpoint: out.final_checkpoint.clone(),
        sha256: out.final_sha256().to_string(),
        parent_sha256: parent,
    }
}

/// Runs every variant of the plan under `out_dir`.
///
/// With `ancestor` set, stage 1 is not run and that checkpoint is used as the
/// shared AR ancestor. Adaptation budgets are run as one continued stage,
/// snapshotting at each budget; updates depend only on the step index, so
/// each snapshot equals a separate run of that length.
pub fn run_ar2diff(
    plan: &StagePlan,
    init: Weights,
    data: &PipelineData<'_>,
    out_dir: &Path,
    ancestor: Option<&Path>,
) -> Result<Ar2DiffOutcome> {
    plan.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut stages = Vec::new();

    let (ancestor_path, ancestor_weights, ancestor_sha) = match ancestor {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.meta.attention_mode == AttentionMode::FullBidirectional {
                return Err(Error::StageConfig {
                    stage: plan.pretrain.name.clone(),
                    reason: format!("ancestor {} is not an AR checkpoint", p.display()),
                });
            }
            (p.to_path_buf(), ck.weights, checkpoint::file_hash(p)?)
        }
        None => {
            let io = StageIo {
                out_dir: out_dir.join(&plan.pretrain.name),
                metrics_log: Some(out_dir.join("metrics.jsonl")),
                parent_sha256: None,
            };
            let out = train(
                &plan.pretrain,
                StageStart::fresh(init),
                data.pretrain,
                data.regular.clone(),
                &io,
                None,
            )?;
            stages.push(record(&plan.pretrain, 0, data.pretrain, &out, None));
            let sha = out.final_sha256().to_string();
            (out.final_checkpoint, out.weights, sha)
        }
    };

    let mut budgets = plan.adaptation_steps.clone();
    budgets.sort_unstable();
    budgets.dedup();

    // Adapted weights per budget, in ascending order.
    let mut adapted: Vec<(u64, Weights, String)> = Vec::new();
    let adapt_data = Offset {
        inner: data.pretrain,
        offset: plan.pretrain.steps,
    };
    let mut start = StageStart::fresh(ancestor_weights.clone());
    let mut parent = ancestor_sha.clone();
    for &n in &budgets {
        if n == 0 {
            adapted.push((0, ancestor_weights.clone(), ancestor_sha.clone()));
            continue;
        }
        let spec = StageSpec {
            steps: n,
            ..plan.adapt.clone()
        };
        let io = StageIo {
            out_dir: out_dir.join(&plan.adapt.name),
            metrics_log: Some(out_dir.join("metrics.jsonl")),
            parent_sha256: Some(parent.clone()),
        };
        let from = start.step;
        let out = train(&spec, start, &adapt_data, data.regular.clone(), &io, None)?;
        stages.push(record(&spec, from, &adapt_data, &out, Some(parent.clone())));
        parent = out.final_sha256().to_string();
        adapted.push((n, out.weights.clone(), parent.clone()));
        start = StageStart {
            weights: out.weights,
            moments: Some(out.moments),
            step: out.final_step,
        };
    }

    let seeds = plan.seeds();
    let mut variants = Vec::new();
    for &n in &plan.adaptation_steps {
        let (_, weights, parent) = adapted
            .iter()
            .find(|(b, _, _)| *b == n)
            .expect("every budget was adapted");
        for &seed in &seeds {
            let spec = StageSpec {
                seed,
                ..plan.finetune.clone()
            };
            let io = StageIo {
                out_dir: out_dir.join(format!("{}_n{n}_s{seed}", plan.finetune.name)),
                metrics_log: Some(out_dir.join("metrics.jsonl")),
                parent_sha256: Some(parent.clone()),
            };
            let out = train(
                &spec,
                StageStart::fresh(weights.clone()),
                data.finetune,
                data.regular.clone(),
                &io,
                None,
            )?;
            stages.push(record(&spec, 0, data.finetune, &out, Some(parent.clone())));
            variants.push(Variant {
                adaptation_steps: n,
                seed,
                sha256: out.final_sha256().to_string(),
                checkpoint: out.final_checkpoint,
                weights: out.weights,
            });
        }
    }

    let manifest = PipelineManifest {
        stages,
        adaptation_steps: plan.adaptation_steps.clone(),
        seeds,
    };
    let manifest_path = out_dir.join("manifest.json");
    checkpoint::write_atomic(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(Ar2DiffOutcome {
        ancestor: ancestor_path,
        ancestor_sha256: ancestor_sha,
        variants,
        manifest: manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        ExampleSet, MixtureSpec, PretrainObjective, PretrainStream, TaskLayout, Vocab,
    };
    use crate::model::{init_weights, ModelConfig};

    fn fixture() -> (Weights, PretrainStream, ExampleSet, Vocab) {
        let v = Vocab::default();
        let layout = TaskLayout {
            source_window: 6,
            target_window: 6,
        };
        let pairs: Vec<(String, String)> =
            (0..8).map(|i| (format!("x{i}"), format!("y{i}"))).collect();
        let ft = ExampleSet::from_pairs(&pairs, &v, &layout, 4, 1, "toy").unwrap();
        let pre = PretrainStream {
            vocab: v.clone(),
            mixture: MixtureSpec {
                max_chars: 12,
                ..Default::default()
            },
            objective: PretrainObjective::PrefixLm,
            seq_len: 13,
            batch_size: 2,
            seed: 4,
        };
        let w = init_weights(&ModelConfig {
            vocab_size: v.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 13,
            seed: 1,
        })
        .unwrap();
        (w, pre, ft, v)
    }

    fn plan(budgets: Vec<u64>) -> StagePlan {
        StagePlan {
            pretrain: StageSpec::new("pretrain", StageKind::Ar, 3, 1),
            adapt: StageSpec::new("adapt", StageKind::Diffusion, 0, 2),
            finetune: StageSpec::new("finetune", StageKind::Diffusion, 2, 3),
            adaptation_steps: budgets,
            finetune_seeds: vec![],
        }
    }

    #[test]
    fn variants_share_the_ancestor_and_snapshots_match_separate_runs() {
        let (w, pre, ft, v) = fixture();
        let data = PipelineData {
            pretrain: &pre,
            finetune: &ft,
            regular: v.first_regular()..v.len() as u32,
        };
        let dir = tempfile::tempdir().unwrap();
        let joint = run_ar2diff(&plan(vec![0, 2, 5]), w.clone(), &data, dir.path(), None).unwrap();
        assert_eq!(joint.variants.len(), 3);

        // Reusing the ancestor, a lone N=5 run must reproduce the snapshot.
        let dir2 = tempfile::tempdir().unwrap();
        let alone =
            run_ar2diff(&plan(vec![5]), w, &data, dir2.path(), Some(&joint.ancestor)).unwrap();
        assert_eq!(alone.ancestor_sha256, joint.ancestor_sha256);
        assert_eq!(alone.variants[0].weights, joint.variants[2].weights);

        let m: PipelineManifest =
            serde_json::from_slice(&fs::read(&joint.manifest).unwrap()).unwrap();
        assert_eq!(m.stages[0].kind, StageKind::Ar);
        assert_eq!(m.stages[0].attention, AttentionMode::Causal);
        assert!(m
            .stages
            .iter()
            .skip(1)
            .all(|s| s.attention == AttentionMode::FullBidirectional));
        let n0 = m
            .stages
            .iter()
            .find(|s| s.checkpoint.to_string_lossy().contains("finetune_n0"))
            .unwrap();
        assert_eq!(
            n0.parent_sha256.as_deref(),
            Some(joint.ancestor_sha256.as_str())
        );
    }

    #[test]
    fn missing_ancestor_is_reported() {
        let (w, pre, ft, v) = fixture();
        let data = PipelineData {
            pretrain: &pre,
            finetune: &ft,
            regular: v.first_regular()..v.len() as u32,
        };
        let dir = tempfile::tempdir().unwrap();
        let err = run_ar2diff(
            &plan(vec![0]),
            w,
            &data,
            dir.path(),
            Some(&dir.path().join("nope.ckpt")),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingAncestor(_)));
    }
}
