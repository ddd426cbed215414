mod common;

use ar2diff::checkpoint::{self, load_sidecar};
use ar2diff::data::{generate_task_pairs, ExampleSet, Vocab};
use ar2diff::model::{init_weights, Weights};
use ar2diff::rng;
use ar2diff::train::*;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn random_like(w: &Weights, seed: u64, scale: f32) -> Weights {
    let mut g = w.zeros_like();
    let mut r = rng::stream(seed, 0);
    for t in g.tensors_mut() {
        for x in &mut t.data {
            *x = r.random_range(-scale..scale);
        }
    }
    g
}

/// Textbook Adam in f64 with global-norm clipping.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, clip: f64) {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        for i in 0..w.len() {
            let gi = g[i] * s;
            self.m[i] = 0.9 * self.m[i] + 0.1 * gi;
            self.v[i] = 0.99 * self.v[i] + 0.01 * gi * gi;
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.99f64.powi(self.t));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

#[test]
fn adam_matches_reference_over_several_steps() {
    let w0 = init_weights(&tiny_config(11, 6, 2)).unwrap();
    let mut w = w0.clone();
    let mut opt = Adam::new(&w, AdamConfig::default());
    let mut rw: Vec<f64> = w0.flatten().iter().map(|&x| x as f64).collect();
    let mut reference = RefAdam {
        m: vec![0.0; rw.len()],
        v: vec![0.0; rw.len()],
        t: 0,
    };
    let schedule = LrSchedule {
        peak: 1e-2,
        warmup_steps: 3,
    };
    for step in 0..6u64 {
        // Alternate gradients above and below the clipping threshold.
        let scale = if step % 2 == 0 { 0.5 } else { 1e-3 };
        let mut g = random_like(&w, step, scale);
        let rg: Vec<f64> = g.flatten().iter().map(|&x| x as f64).collect();
        let lr = schedule.at(step);
        opt.step(&mut w, &mut g, lr);
        reference.step(&mut rw, &rg, lr as f64, 1.0);
    }
    for (a, b) in w.flatten().iter().zip(&rw) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn warmup_reaches_peak_then_holds() {
    let s = LrSchedule::pretraining();
    assert!((s.at(0) - 1e-5).abs() < 1e-9);
    assert!((s.at(49) - 5e-4).abs() < 1e-9);
    assert_eq!(s.at(99), 1e-3);
    assert_eq!(s.at(100_000), 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clipping_bounds_the_norm(seed in any::<u64>(), scale in 1e-4f32..10.0, max in 0.1f32..5.0) {
        let w = init_weights(&tiny_config(11, 6, 1)).unwrap();
        let mut g = random_like(&w, seed, scale);
        let before = g.clone();
        let pre = clip(&mut g, max);
        let after = global_norm(&g);
        prop_assert!(after <= max * (1.0 + 1e-5));
        if pre <= max {
            prop_assert_eq!(g, before);
        } else {
            prop_assert!((after - max).abs() / max < 1e-4);
        }
    }
}

fn cipher_set(n: usize, seed: u64) -> (ExampleSet, Vocab) {
    let v = Vocab::default();
    let pairs = generate_task_pairs(&cipher(2, 5), seed, n);
    (
        ExampleSet::from_pairs(&pairs, &v, &square_layout(5), 8, seed, "cipher").unwrap(),
        v,
    )
}

fn small_weights(seed: u64) -> Weights {
    let cfg = ar2diff::model::ModelConfig {
        d_model: 16,
        d_ff: 32,
        ..tiny_config(Vocab::default().len(), 11, seed)
    };
    init_weights(&cfg).unwrap()
}

#[test]
fn both_objectives_reduce_loss() {
    let (set, v) = cipher_set(64, 1);
    for kind in [StageKind::Ar, StageKind::Diffusion] {
        let dir = tempfile::tempdir().unwrap();
        let stage = StageSpec::new("s", kind, 150, 3);
        let io = StageIo {
            out_dir: dir.path().into(),
            metrics_log: None,
            parent_sha256: None,
        };
        let out = train(
            &stage,
            StageStart::fresh(small_weights(2)),
            &set,
            regular(&v),
            &io,
            None,
        )
        .unwrap();
        let head: f32 = out.losses[..10].iter().sum::<f32>() / 10.0;
        let tail: f32 = out.losses[140..].iter().sum::<f32>() / 10.0;
        assert!(tail < 0.8 * head, "{kind:?}: {head} -> {tail}");
    }
}

#[test]
fn resume_from_disk_is_bit_identical() {
    let (set, v) = cipher_set(32, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut stage = StageSpec::new("d", StageKind::Diffusion, 12, 5);
    stage.checkpoint_every = 5;
    let io = |sub: &str| StageIo {
        out_dir: dir.path().join(sub),
        metrics_log: Some(dir.path().join(sub).join("m.jsonl")),
        parent_sha256: None,
    };
    let straight = train(
        &stage,
        StageStart::fresh(small_weights(6)),
        &set,
        regular(&v),
        &io("a"),
        None,
    )
    .unwrap();
    let mut short = stage.clone();
    short.steps = 5;
    train(
        &short,
        StageStart::fresh(small_weights(6)),
        &set,
        regular(&v),
        &io("b"),
        None,
    )
    .unwrap();
    let mid = dir.path().join("b").join("d_5.ckpt");
    let ck = checkpoint::load(&mid).unwrap();
    let parent = checkpoint::file_hash(&mid).unwrap();
    let resumed_io = StageIo {
        parent_sha256: Some(parent.clone()),
        ..io("b")
    };
    let resumed = train(
        &stage,
        StageStart::resume(ck),
        &set,
        regular(&v),
        &resumed_io,
        None,
    )
    .unwrap();
    assert_eq!(resumed.weights, straight.weights);
    assert_eq!(resumed.moments, straight.moments);
    assert_eq!(resumed.final_sha256(), straight.final_sha256());
    assert_eq!(&straight.losses[5..], &resumed.losses[..]);
    // The resumed run's first checkpoint names the checkpoint it started from.
    let side = load_sidecar(&dir.path().join("b").join("d_10.ckpt")).unwrap();
    assert_eq!(side.parent_sha256, Some(parent));
    let log = std::fs::read_to_string(dir.path().join("a").join("m.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    let rec: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    for key in [
        "step",
        "stage",
        "loss",
        "L1",
        "L2",
        "learning_rate",
        "wall_ms",
    ] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn stage_rejects_mismatched_attention() {
    let (set, v) = cipher_set(8, 1);
    let dir = tempfile::tempdir().unwrap();
    let mut stage = StageSpec::new("x", StageKind::Diffusion, 1, 0);
    stage.attention = ar2diff::model::AttentionMode::Causal;
    let io = StageIo {
        out_dir: dir.path().into(),
        metrics_log: None,
        parent_sha256: None,
    };
    let err = train(
        &stage,
        StageStart::fresh(small_weights(1)),
        &set,
        regular(&v),
        &io,
        None,
    )
    .unwrap_err();
    assert_eq!(err.kind(), "stage_config");
}
