//! Command-line entry points.

mod artifacts;
mod config;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use artifacts::{orphans, Artifact, DirLock, RunManifest, LOCK_FILE};
pub use config::{
    load_config, Paths, PretrainDataConfig, RunConfig, SamplerConfig, StageConfig, StagesConfig,
    TaskConfig, VocabConfig,
};

use crate::bench::{
    evaluate_all, latency_benchmark, report, sweep, ArDecoder, Decoder, DiffusionDecoder, EvalSet,
    LatencySettings, Metric, MetricReport,
};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::data::{generate_task_pairs, BatchSource, ExampleSet, Vocab};
use crate::decode::{handle_request, ArMode, DecodeKind, DecodeRequest};
use crate::error::{Error, Result};
use crate::model::{init_weights, AttentionMode, Weights};
use crate::rng;
use crate::train::{train, Offset, StageIo, StageKind, StageOutcome, StageSpec, StageStart};

#[derive(Debug, Parser)]
#[command(
    name = "ar2diff",
    version,
    about = "Train, decode and evaluate AR and diffusion decoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Overrides for the selected stage's config section.
#[derive(Debug, Args, Default)]
pub struct StageFlags {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f32>,
    /// Continue a run of the same stage from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct DiffusionFlags {
    #[arg(long)]
    pub unroll_temperature: Option<f32>,
    #[arg(long)]
    pub w1: Option<f32>,
    #[arg(long)]
    pub w2: Option<f32>,
}

#[derive(Debug, Args, Default)]
pub struct SamplerFlags {
    #[arg(long)]
    pub num_steps: Option<usize>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub tau: Option<f32>,
    #[arg(long)]
    pub sampler_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ar,
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    ExactMatch,
    TokenF1,
    PassAtK,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::ExactMatch => Metric::ExactMatch,
            MetricArg::TokenF1 => Metric::TokenF1,
            MetricArg::PassAtK => Metric::PassAtK,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Left-to-right pretraining on the synthetic mixture.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Continued diffusion pretraining from a causal checkpoint. With
    /// `--steps 0` the checkpoint is copied with bidirectional attention.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        stage: StageFlags,
        #[command(flatten)]
        diffusion: DiffusionFlags,
    },
    /// Fine-tuning on the configured task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_enum, default_value = "diffusion")]
        mode: ModeArg,
        #[command(flatten)]
        stage: StageFlags,
        #[command(flatten)]
        diffusion: DiffusionFlags,
    },
    /// Decodes one prompt and prints the response as JSON.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Left-to-right sampling temperature; greedy when omitted.
        #[arg(long)]
        temperature: Option<f32>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Scores a checkpoint on the task's evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's attention mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        temperature: Option<f32>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Evaluates a diffusion checkpoint over a steps by samples grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        steps_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        samples_grid: Vec<usize>,
        #[arg(long, value_enum, default_value = "exact-match")]
        metric: MetricArg,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Wall-clock latency of both decoders across target lengths.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Untrained weights from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 10)]
        num_steps: usize,
    },
}

fn apply_stage(cfg: &mut StageConfig, f: &StageFlags) {
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = f.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = f.clip_norm {
        cfg.clip_norm = Some(v);
    }
}

fn apply_diffusion(cfg: &mut RunConfig, f: &DiffusionFlags) {
    if let Some(v) = f.unroll_temperature {
        cfg.diffusion.unroll_temperature = v;
    }
    if let Some(v) = f.w1 {
        cfg.diffusion.w1 = v;
    }
    if let Some(v) = f.w2 {
        cfg.diffusion.w2 = v;
    }
}

fn apply_sampler(cfg: &mut RunConfig, f: &SamplerFlags) {
    if let Some(v) = f.num_steps {
        cfg.sampler.num_steps = v;
    }
    if let Some(v) = f.num_samples {
        cfg.sampler.num_samples = v;
    }
    if let Some(v) = f.tau {
        cfg.sampler.tau = v;
    }
    if let Some(v) = f.sampler_seed {
        cfg.sampler.seed = v;
    }
}

fn load(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    edit(&mut cfg);
    cfg.validate()?;
    cfg.check_paths()?;
    Ok(cfg)
}

fn regular(v: &Vocab) -> std::ops::Range<u32> {
    v.first_regular()..v.len() as u32
}

type Pairs = Vec<(String, String)>;

/// Train and evaluation pairs; evaluation sources never occur in training.
pub fn task_splits(cfg: &RunConfig) -> (Pairs, Pairs) {
    let spec = &cfg.task.spec;
    let train = generate_task_pairs(
        spec,
        rng::derive(cfg.seed, "train"),
        cfg.task.train_examples,
    );
    let seen: HashSet<&str> = train.iter().map(|(s, _)| s.as_str()).collect();
    let eval_seed = rng::derive(cfg.seed, "eval");
    let mut eval = Vec::with_capacity(cfg.task.eval_examples);
    let mut i = 0u64;
    // Bounded so a tiny task space cannot loop forever.
    while eval.len() < cfg.task.eval_examples && i < 100 * cfg.task.eval_examples as u64 {
        let p = spec.pair(eval_seed, i);
        if !seen.contains(p.0.as_str()) {
            eval.push(p);
        }
        i += 1;
    }
    (train, eval)
}

fn load_expecting(path: &Path, mode: AttentionMode, what: &str) -> Result<Checkpoint> {
    let ck = checkpoint::load(path)?;
    if ck.meta.attention_mode != mode {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "{what} needs a {mode} checkpoint, found {}",
                ck.meta.attention_mode
            ),
        });
    }
    Ok(ck)
}

fn load_weights(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = checkpoint::load(path)?;
    if ck.weights.config.vocab_size != cfg.model.vocab_size {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "vocabulary size differs from the config".into(),
        });
    }
    Ok(ck)
}

struct StageRun<'a> {
    cfg: &'a RunConfig,
    spec: StageSpec,
    start: StageStart,
    parent: Option<PathBuf>,
    data: &'a dyn BatchSource,
}

fn run_stage(command: &str, run: StageRun<'_>, resume: Option<&Path>) -> Result<serde_json::Value> {
    let cfg = run.cfg;
    let _lock = DirLock::acquire(&cfg.paths.checkpoints)?;
    let mut manifest = RunManifest::new(command, cfg, vec![cfg.seed]);
    let mut start = run.start;
    let mut parent_sha = None;
    if let Some(p) = &run.parent {
        manifest.consume(p)?;
        parent_sha = Some(checkpoint::file_hash(p)?);
    }
    if let Some(r) = resume {
        let ck = checkpoint::load(r)?;
        if ck.meta.stage != run.spec.name || ck.meta.attention_mode != run.spec.attention {
            return Err(Error::Checkpoint {
                path: r.to_path_buf(),
                reason: format!(
                    "cannot resume stage {} from a {} checkpoint",
                    run.spec.name, ck.meta.stage
                ),
            });
        }
        manifest.consume(r)?;
        parent_sha = Some(checkpoint::file_hash(r)?);
        start = StageStart::resume(ck);
    }
    let metrics_log = cfg
        .paths
        .logs
        .join(format!("{}.metrics.jsonl", run.spec.name));
    let io = StageIo {
        out_dir: cfg.paths.checkpoints.clone(),
        metrics_log: Some(metrics_log.clone()),
        parent_sha256: parent_sha,
    };
    let out: StageOutcome = train(&run.spec, start, run.data, regular(&cfg.vocab()), &io, None)?;
    for side in &out.checkpoints {
        manifest.produce(&cfg.paths.checkpoints.join(&side.file))?;
    }
    if metrics_log.exists() {
        manifest.produce(&metrics_log)?;
    }
    let m = manifest.write(&cfg.paths.logs)?;
    Ok(serde_json::json!({
        "checkpoint": out.final_checkpoint,
        "sha256": out.final_sha256(),
        "step": out.final_step,
        "final_loss": out.losses.last(),
        "stopped_early": out.stopped_early,
        "manifest": m,
    }))
}

fn cmd_pretrain(common: &Common, flags: &StageFlags) -> Result<serde_json::Value> {
    let cfg = load(common, |c| apply_stage(&mut c.stages.pretrain, flags))?;
    let spec = cfg.stage_spec("pretrain", StageKind::Ar, &cfg.stages.pretrain);
    let stream = cfg.pretrain_stream();
    let run = StageRun {
        cfg: &cfg,
        spec,
        start: StageStart::fresh(init_weights(&cfg.model)?),
        parent: None,
        data: &stream,
    };
    run_stage("pretrain", run, flags.resume.as_deref())
}

fn cmd_adapt(
    common: &Common,
    from: &Path,
    flags: &StageFlags,
    diff: &DiffusionFlags,
) -> Result<serde_json::Value> {
    let cfg = load(common, |c| {
        apply_stage(&mut c.stages.adapt, flags);
        apply_diffusion(c, diff);
    })?;
    let source = load_expecting(from, AttentionMode::Causal, "adapt")?;
    let spec = cfg.stage_spec("adapt", StageKind::Diffusion, &cfg.stages.adapt);
    if spec.steps == 0 && flags.resume.is_none() {
        // Zero adaptation steps: same weights, bidirectional attention.
        let _lock = DirLock::acquire(&cfg.paths.checkpoints)?;
        let mut manifest = RunManifest::new("adapt", &cfg, vec![cfg.seed]);
        manifest.consume(from)?;
        let out = cfg.paths.checkpoints.join(spec.checkpoint_name(0));
        let ck = Checkpoint {
            weights: source.weights,
            meta: CheckpointMeta {
                stage: spec.name.clone(),
                step: 0,
                attention_mode: AttentionMode::FullBidirectional,
            },
            moments: None,
        };
        let side = checkpoint::save_with_sidecar(&out, &ck, Some(checkpoint::file_hash(from)?))?;
        manifest.produce(&out)?;
        let m = manifest.write(&cfg.paths.logs)?;
        return Ok(
            serde_json::json!({"checkpoint": out, "sha256": side.sha256, "step": 0, "manifest": m}),
        );
    }
    let stream = cfg.pretrain_stream();
    let data = Offset {
        inner: &stream,
        offset: cfg.stages.pretrain.steps,
    };
    let run = StageRun {
        cfg: &cfg,
        spec,
        start: StageStart::fresh(source.weights),
        parent: Some(from.to_path_buf()),
        data: &data,
    };
    run_stage("adapt", run, flags.resume.as_deref())
}

fn cmd_finetune(
    common: &Common,
    from: &Path,
    mode: ModeArg,
    flags: &StageFlags,
    diff: &DiffusionFlags,
) -> Result<serde_json::Value> {
    let cfg = load(common, |c| {
        apply_stage(&mut c.stages.finetune, flags);
        apply_diffusion(c, diff);
    })?;
    let (name, kind) = match mode {
        ModeArg::Ar => ("finetune-ar", StageKind::Ar),
        ModeArg::Diffusion => ("finetune-diffusion", StageKind::Diffusion),
    };
    let source = load_expecting(from, kind.attention(), "finetune")?;
    let (train_pairs, _) = task_splits(&cfg);
    let set = ExampleSet::from_pairs(
        &train_pairs,
        &cfg.vocab(),
        &cfg.layout,
        cfg.task.batch_size,
        rng::derive(cfg.seed, "finetune-order"),
        cfg.task.spec.id(),
    )?;
    let mut spec = cfg.stage_spec(name, kind, &cfg.stages.finetune);
    if spec.early_stopping.is_some() {
        // The CLI trains without a validator; early stopping needs the library API.
        log::warn!("early stopping is ignored by the finetune command");
        spec.early_stopping = None;
    }
    let run = StageRun {
        cfg: &cfg,
        spec,
        start: StageStart::fresh(source.weights),
        parent: Some(from.to_path_buf()),
        data: &set,
    };
    run_stage("finetune", run, flags.resume.as_deref())
}

fn mode_of(ck: &Checkpoint, flag: Option<ModeArg>) -> ModeArg {
    flag.unwrap_or(match ck.meta.attention_mode {
        AttentionMode::FullBidirectional => ModeArg::Diffusion,
        _ => ModeArg::Ar,
    })
}

fn ar_mode(temperature: Option<f32>, seed: u64) -> ArMode {
    match temperature {
        Some(t) if t > 0.0 => ArMode::Temperature {
            temperature: t,
            seed,
        },
        _ => ArMode::Greedy,
    }
}

fn cmd_decode(
    common: &Common,
    path: &Path,
    prompt: &str,
    mode: ModeArg,
    temperature: Option<f32>,
    sampler: &SamplerFlags,
) -> Result<serde_json::Value> {
    let cfg = load(common, |c| apply_sampler(c, sampler))?;
    let ck = load_weights(path, &cfg)?;
    let req = DecodeRequest {
        prompt: prompt.to_string(),
        mode: match mode {
            ModeArg::Ar => DecodeKind::Ar,
            ModeArg::Diffusion => DecodeKind::Diffusion,
        },
        temperature,
        num_steps: None,
        num_samples: None,
        tau: None,
        seed: None,
    };
    let resp = handle_request(
        &ck.weights,
        &cfg.vocab(),
        &cfg.layout,
        &cfg.sampler_settings(),
        &req,
    )?;
    let mut manifest = RunManifest::new("decode", &cfg, vec![cfg.sampler.seed]);
    manifest.consume(path)?;
    manifest.write(&cfg.paths.logs)?;
    Ok(serde_json::to_value(resp)?)
}

fn decoder_for<'a>(
    cfg: &'a RunConfig,
    weights: &'a Weights,
    vocab: &'a Vocab,
    mode: ModeArg,
    temperature: Option<f32>,
) -> Box<dyn Decoder + 'a> {
    match mode {
        ModeArg::Ar => Box::new(ArDecoder {
            weights,
            layout: cfg.layout,
            mode: ar_mode(temperature, cfg.sampler.seed),
        }),
        ModeArg::Diffusion => Box::new(DiffusionDecoder {
            weights,
            layout: cfg.layout,
            vocab,
            settings: cfg.sampler_settings(),
        }),
    }
}

fn finish_report(
    command: &str,
    cfg: &RunConfig,
    consumed: &Path,
    metrics: &[MetricReport],
) -> Result<serde_json::Value> {
    let mut manifest = RunManifest::new(command, cfg, vec![cfg.seed, cfg.sampler.seed]);
    manifest.consume(consumed)?;
    let out_dir = cfg.paths.reports.join(command);
    for p in report(
        &out_dir,
        &[],
        metrics,
        &manifest.config_hash,
        &manifest.seeds,
    )? {
        manifest.produce(&p)?;
    }
    let m = manifest.write(&cfg.paths.logs)?;
    Ok(serde_json::json!({"reports": out_dir, "metrics": metrics, "manifest": m}))
}

fn cmd_eval(
    common: &Common,
    path: &Path,
    mode: Option<ModeArg>,
    temperature: Option<f32>,
    sampler: &SamplerFlags,
) -> Result<serde_json::Value> {
    let cfg = load(common, |c| apply_sampler(c, sampler))?;
    let ck = load_weights(path, &cfg)?;
    let vocab = cfg.vocab();
    let mode = mode_of(&ck, mode);
    let (_, eval_pairs) = task_splits(&cfg);
    let decoder = decoder_for(&cfg, &ck.weights, &vocab, mode, temperature);
    let set = EvalSet {
        task: &cfg.task.spec,
        pairs: &eval_pairs,
        vocab: &vocab,
    };
    let model = format!("{}:{}", ck.meta.stage, ck.meta.step);
    let metrics = evaluate_all(decoder.as_ref(), &set, &model)?;
    finish_report("eval", &cfg, path, &metrics)
}

fn cmd_sweep(
    common: &Common,
    path: &Path,
    steps: &[usize],
    samples: &[usize],
    metric: MetricArg,
    sampler: &SamplerFlags,
) -> Result<serde_json::Value> {
    let cfg = load(common, |c| apply_sampler(c, sampler))?;
    let ck = load_weights(path, &cfg)?;
    let vocab = cfg.vocab();
    let (_, eval_pairs) = task_splits(&cfg);
    let set = EvalSet {
        task: &cfg.task.spec,
        pairs: &eval_pairs,
        vocab: &vocab,
    };
    let model = format!("{}:{}", ck.meta.stage, ck.meta.step);
    let metrics = sweep(
        &ck.weights,
        cfg.layout,
        &cfg.sampler_settings(),
        &set,
        &model,
        metric.into(),
        steps,
        samples,
    )?;
    finish_report("sweep", &cfg, path, &metrics)
}

fn cmd_bench(
    common: &Common,
    path: Option<&Path>,
    lengths: &[usize],
    reps: usize,
    num_steps: usize,
) -> Result<serde_json::Value> {
    let cfg = load(common, |_| {})?;
    let longest = lengths.iter().copied().max().unwrap_or(0);
    let weights = match path {
        Some(p) => load_weights(p, &cfg)?.weights,
        None => {
            let mut m = cfg.model;
            m.max_seq_len = m.max_seq_len.max(longest + 2);
            init_weights(&m)?
        }
    };
    let settings = LatencySettings {
        min_reps: reps,
        num_steps,
        ..LatencySettings::default()
    };
    let records = latency_benchmark(&weights, lengths, &settings, regular(&cfg.vocab()))?;
    let mut manifest = RunManifest::new("bench", &cfg, vec![cfg.seed]);
    if let Some(p) = path {
        manifest.consume(p)?;
    }
    let out_dir = cfg.paths.reports.join("bench");
    for p in report(
        &out_dir,
        &records,
        &[],
        &manifest.config_hash,
        &manifest.seeds,
    )? {
        manifest.produce(&p)?;
    }
    let m = manifest.write(&cfg.paths.logs)?;
    Ok(serde_json::json!({"reports": out_dir, "records": records, "manifest": m}))
}

/// Runs one parsed command and returns its JSON result.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Pretrain { common, stage } => cmd_pretrain(common, stage),
        Command::Adapt {
            common,
            from,
            stage,
            diffusion,
        } => cmd_adapt(common, from, stage, diffusion),
        Command::Finetune {
            common,
            from,
            mode,
            stage,
            diffusion,
        } => cmd_finetune(common, from, *mode, stage, diffusion),
        Command::Decode {
            common,
            checkpoint,
            prompt,
            mode,
            temperature,
            sampler,
        } => cmd_decode(common, checkpoint, prompt, *mode, *temperature, sampler),
        Command::Eval {
            common,
            checkpoint,
            mode,
            temperature,
            sampler,
        } => cmd_eval(common, checkpoint, *mode, *temperature, sampler),
        Command::Sweep {
            common,
            checkpoint,
            steps_grid,
            samples_grid,
            metric,
            sampler,
        } => cmd_sweep(
            common,
            checkpoint,
            steps_grid,
            samples_grid,
            *metric,
            sampler,
        ),
        Command::Bench {
            common,
            checkpoint,
            lengths,
            reps,
            num_steps,
        } => cmd_bench(common, checkpoint.as_deref(), lengths, *reps, *num_steps),
    }
}

/// Process entry point: prints the result as one JSON line on success, or a
/// one-line JSON error on stderr and exit code 1 on failure.
pub fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AR2DIFF_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!(
                "{}",
                serde_json::json!({"error": "usage", "message": first})
            );
            return std::process::ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": e.kind(), "message": e.to_string()})
            );
            std::process::ExitCode::FAILURE
        }
    }
}
