//! Optimizer arithmetic, the learning-rate cycle, snapshots and seeded
//! training on a miniature corpus.

use ndarray::{Array1, ArrayViewD, ArrayViewMutD, IxDyn};
use proptest::prelude::*;
use s2i_core::autodiff::Parameters;
use s2i_core::config::RunConfig;
use s2i_core::corpus::{gen_toy_corpus, Corpus, Split, ToyCorpusSpec};
use s2i_core::encoders::{EncoderConfig, ModelParams};
use s2i_core::frontend::{FeatureMatrix, FrontendConfig};
use s2i_core::objective::LossConfig;
use s2i_core::retrieval::rank_caption_to_image;
use s2i_core::trainer::{
    adam_step, cyclic_lr, ensemble, lr_at_fraction, select_snapshots, train, AdamConfig, AdamState,
    Ensemble, SaveContext, Snapshot, TrainConfig,
};
use s2i_core::Error;

#[derive(Clone, Debug)]
struct Vector(Array1<f64>);

impl Parameters<f64> for Vector {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("x".into(), self.0.view().into_dyn())]
    }
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![("x".into(), self.0.view_mut().into_dyn())]
    }
}

fn scalar(v: f64) -> Vector {
    Vector(Array1::from(vec![v]))
}

#[test]
fn first_adam_step_moves_by_lr_against_the_gradient() {
    let mut p = scalar(0.0);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &scalar(2.0), &mut st, 1e-3, &AdamConfig::default()).unwrap();
    assert!((p.0[0] + 1e-3).abs() < 1e-10, "{}", p.0[0]);
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut p = Vector(Array1::from(vec![0.3, -1.5, 7.0]));
    let before = p.0.clone();
    let mut st = AdamState::new(&p);
    let g = p.zeros_like();
    for _ in 0..50 {
        adam_step(&mut p, &g, &mut st, 1e-2, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p.0, before);
}

#[test]
fn five_steps_on_a_parabola_follow_the_hand_iteration() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut x = 1.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut want = Vec::new();
    for t in 1..=5 {
        let g = 2.0 * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        want.push(x);
    }
    let mut p = scalar(1.0);
    let mut st = AdamState::new(&p);
    for w in want {
        let g = scalar(2.0 * p.0[0]);
        adam_step(&mut p, &g, &mut st, lr, &AdamConfig::default()).unwrap();
        assert!((p.0[0] - w).abs() < 1e-14, "{} vs {w}", p.0[0]);
    }
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let mut model = ModelParams::<f32>::init(&EncoderConfig::toy(39, 16), 0).unwrap();
    let mut grads = model.zeros_like();
    for (name, mut t) in grads.tensors_mut() {
        if name == "caption.gru2.bwd.u" {
            t[IxDyn(&[1, 1])] = f32::NAN;
        }
    }
    let before = model.clone();
    let mut st = AdamState::new(&model);
    let err = adam_step(&mut model, &grads, &mut st, 1e-3, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("caption.gru2.bwd.u"), "{err}");
    assert_eq!(model, before);
}

#[test]
fn schedule_examples() {
    assert_eq!(lr_at_fraction(0.0, 1e-6, 2e-4), 2e-4);
    assert!((lr_at_fraction(0.5, 1e-6, 2e-4) - 1.005e-4).abs() < 1e-15);
    assert!((lr_at_fraction(1.0 - 1e-9, 1e-6, 2e-4) - 1e-6).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn lr_stays_within_bounds(step in 0usize..100_000, spc in 1usize..5_000, lo in 0.0f64..1e-3, span in 1e-6f64..1e-2) {
        let lr = cyclic_lr(step, spc, lo, lo + span).unwrap();
        prop_assert!(lr >= lo - 1e-15 && lr <= lo + span + 1e-15);
    }

    #[test]
    fn snapshot_steps_sit_at_the_minimum(spc in 1usize..5_000, cycle in 1usize..20) {
        let lr = cyclic_lr(cycle * spc - 1, spc, 1e-6, 2e-4).unwrap();
        prop_assert!((lr - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_the_identity(vals in prop::collection::vec(-10f64..10.0, 1..8), seed in any::<u64>()) {
        let mut p = Vector(Array1::from(vals));
        let before = p.0.clone();
        let g = Vector(p.0.mapv(|v| (v * seed as f64).sin()));
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.0, &AdamConfig::default()).unwrap();
        prop_assert_eq!(p.0, before);
    }
}

// ---------------------------------------------------------------- training

fn tiny_encoder(corpus: &Corpus) -> EncoderConfig {
    EncoderConfig {
        image_dim: corpus.images.dim(),
        feat_dim: corpus.feat_dim().unwrap(),
        conv_channels: 6,
        conv_kernel: 6,
        conv_stride: 2,
        conv_padding: 0,
        gru_hidden: 6,
        gru_layers: 3,
        attn_hidden: 4,
    }
}

fn tiny_corpus(dir: &std::path::Path) -> Corpus {
    let mut spec = ToyCorpusSpec::new(20, 6, 5);
    spec.captions_per_image = 2;
    spec.caption_len_range = (2, 3);
    spec.image_dim = 12;
    let out = gen_toy_corpus(&spec, dir).unwrap();
    Corpus::load(
        &out.manifest,
        &out.image_features,
        &FrontendConfig::default(),
    )
    .unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        snapshot_every: 2,
        batch_size: 4,
        lr_max: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn seeded_runs_repeat_exactly_and_snapshots_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let enc = tiny_encoder(&corpus);
    let mut epochs_seen = Vec::new();
    let a = train(&corpus, &enc, &tiny_train(), &LossConfig::default(), |e| {
        epochs_seen.push(e.epoch)
    })
    .unwrap();
    let b = train(&corpus, &enc, &tiny_train(), &LossConfig::default(), |_| {}).unwrap();
    assert_eq!(epochs_seen, vec![1, 2, 3, 4]);
    assert_eq!(a.snapshots.len(), 2);
    assert_eq!(
        a.snapshots.iter().map(|s| s.epoch).collect::<Vec<_>>(),
        vec![2, 4]
    );
    assert_eq!(a.snapshots, b.snapshots);
    assert_eq!(a.log, b.log);
    assert!(a.log.iter().all(|e| e.mean_loss.is_finite()));
    // last update of every cycle runs at the minimum
    assert!((a.log[1].lr_last - 1e-6).abs() < 1e-12);
    assert!((a.log[3].lr_last - 1e-6).abs() < 1e-12);
    assert!(a.log[2].lr_first > a.log[1].lr_last);

    let ctx = SaveContext {
        config_hash: "abc".into(),
        frontend: FrontendConfig::default(),
    };
    let out = dir.path().join("run");
    let paths = a.save(&out, &ctx).unwrap();
    assert!(out.join("train_log.jsonl").exists());
    let test = corpus.split(Split::Test);
    let feats: Vec<&FeatureMatrix> = test.captions.iter().map(|&i| &corpus.features[i]).collect();
    for (snap, path) in a.snapshots.iter().zip(&paths) {
        let (loaded, meta) = Snapshot::load(path).unwrap();
        assert_eq!(meta.config_hash, "abc");
        assert_eq!(&loaded, snap);
        let x = Ensemble::new(vec![snap.params.clone()]).unwrap();
        let y = Ensemble::new(vec![loaded.params]).unwrap();
        assert_eq!(
            x.embed_captions(&feats).unwrap(),
            y.embed_captions(&feats).unwrap()
        );
        assert_eq!(
            x.embed_images(corpus.images.matrix.view()).unwrap(),
            y.embed_images(corpus.images.matrix.view()).unwrap()
        );
    }
}

#[test]
fn self_ensemble_keeps_every_rank() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let model = ModelParams::<f32>::init(&tiny_encoder(&corpus), 4).unwrap();
    let test = corpus.split(Split::Test);
    let feats: Vec<&FeatureMatrix> = test.captions.iter().map(|&i| &corpus.features[i]).collect();
    let imgs = corpus
        .images
        .matrix
        .select(ndarray::Axis(0), &test.image_rows);
    let ranks = |e: &Ensemble| {
        let c = e.embed_captions(&feats).unwrap();
        let i = e.embed_images(imgs.view()).unwrap();
        rank_caption_to_image(c.view(), i.view(), &test.caption_image).unwrap()
    };
    let one = Ensemble::new(vec![model.clone()]).unwrap();
    let two = Ensemble::new(vec![model.clone(), model]).unwrap();
    assert_eq!(ranks(&one), ranks(&two));
    assert_eq!(
        one.evaluate(&corpus, Split::Test).unwrap(),
        two.evaluate(&corpus, Split::Test).unwrap()
    );
}

#[test]
fn selection_prefers_the_best_dev_scores() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let run = train(
        &corpus,
        &tiny_encoder(&corpus),
        &TrainConfig {
            epochs: 6,
            ..tiny_train()
        },
        &LossConfig::default(),
        |_| {},
    )
    .unwrap();
    assert_eq!(run.snapshots.len(), 3);
    let picked = select_snapshots(&run.snapshots, 2).unwrap();
    assert_eq!(picked.len(), 2);
    let worst = run
        .snapshots
        .iter()
        .map(|s| s.dev.selector())
        .fold(f64::INFINITY, f64::min);
    assert!(picked[0].dev.selector() >= picked[1].dev.selector());
    assert!(picked[1].dev.selector() >= worst);
    assert_eq!(select_snapshots(&run.snapshots, 10).unwrap().len(), 3);
    assert!(select_snapshots(&[], 2).is_err());
    assert!(ensemble(&run.snapshots[..1], 2).unwrap().members.len() == 1);
}

#[test]
fn bad_configs_are_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let enc = tiny_encoder(&corpus);
    let bad = TrainConfig {
        epochs: 5,
        ..tiny_train()
    };
    assert!(matches!(
        train(&corpus, &enc, &bad, &LossConfig::default(), |_| {}),
        Err(Error::Config(_))
    ));
    let wrong_dim = EncoderConfig {
        image_dim: 3,
        ..enc
    };
    assert!(train(
        &corpus,
        &wrong_dim,
        &tiny_train(),
        &LossConfig::default(),
        |_| {}
    )
    .is_err());
    assert!(RunConfig::from_json("{\"nope\": 1}").is_err());
}
