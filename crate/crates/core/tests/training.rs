use std::collections::HashMap;

use candle_core::DType;
use motext::data::{synth_dataset, unify, Dataset, MotionLayout, MotionSequence, Source};
use motext::gradsuite::gradient_suite;
use motext::loss::SwipeConfig;
use motext::model::{ModelConfig, RetrievalModel};
use motext::motion_encoder::EncoderConfig;
use motext::nn::Ctx;
use motext::train::{
    batch_loss, build_teacher, build_vocab, epoch_seed, make_batches, train, GradCheckConfig, LossMode, TrainConfig,
    TrainOutput, TrainSink,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(epochs: usize) -> TrainConfig {
    let motion = EncoderConfig {
        depth: 2,
        heads: 2,
        ffn_width: 32,
        model_width: 16,
        latent_dim: 16,
        max_frames: 64,
        ..EncoderConfig::desk()
    };
    TrainConfig {
        epochs,
        batch_size: 8,
        swipe: SwipeConfig::new(1, 3).unwrap(),
        model: ModelConfig::matching(motion),
        ..TrainConfig::desk()
    }
}

fn run(cfg: &TrainConfig, ds: &Dataset) -> TrainOutput {
    train(cfg, ds, &TrainSink::default()).unwrap()
}

fn features(model: &RetrievalModel, ds: &Dataset) -> Vec<Vec<f32>> {
    let motions: Vec<_> = ds.pairs.iter().map(|p| p.motion.load().unwrap()).collect();
    let refs: Vec<&MotionSequence> = motions.iter().map(|m| m.as_ref()).collect();
    model.motion_features(&refs, 32).unwrap()
}

#[test]
fn first_batch_loss_is_finite_and_positive() {
    let ds = synth_dataset(1, 32, 4).unwrap();
    let cfg = small_config(1);
    let model = RetrievalModel::new(&cfg.model, build_vocab(&ds), DType::F32, 0).unwrap();
    let teacher = build_teacher(&cfg, &ds).unwrap();
    let batch = &make_batches(&ds, cfg.batch_size, epoch_seed(cfg.seed, 0)).unwrap()[0];
    let motions: Vec<_> = batch.iter().map(|it| ds.pairs[it.pair].motion.load().unwrap()).collect();
    let refs: Vec<&MotionSequence> = motions.iter().map(|m| m.as_ref()).collect();
    let captions: Vec<&str> = batch.iter().map(|it| ds.pairs[it.pair].texts[it.caption].as_str()).collect();
    for mode in [LossMode::Cccl, LossMode::InfonceF, LossMode::CcclSelf, LossMode::CcclSupervised, LossMode::Infonce] {
        let cfg = TrainConfig { loss_mode: mode, ..cfg.clone() };
        let loss = batch_loss(
            &model,
            &cfg,
            &refs,
            &captions,
            Some(&teacher),
            mode.lambda(0, &cfg.swipe),
            &mut ChaCha8Rng::seed_from_u64(0),
            &Ctx::eval(),
        )
        .unwrap();
        let total = loss.terms[0].1;
        assert!(total.is_finite() && total > 0.0, "{mode:?}: {total}");
    }
}

#[test]
fn every_pair_is_drawn_equally_often() {
    let ds = synth_dataset(2, 100, 4).unwrap();
    let epochs = 1000;
    let mut counts = vec![0usize; ds.len()];
    for e in 0..epochs {
        let batches = make_batches(&ds, 32, epoch_seed(9, e)).unwrap();
        assert_eq!(batches.len(), 3);
        for b in &batches {
            for it in b {
                counts[it.pair] += 1;
            }
        }
    }
    let expected = (epochs * 96) as f64 / 100.0;
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - expected).abs() <= 0.05 * expected, "pair {i}: {c} vs {expected}");
    }
}

#[test]
fn captions_are_drawn_uniformly() {
    let mut ds = synth_dataset(3, 16, 2).unwrap();
    for p in &mut ds.pairs {
        p.texts = vec!["a person walks".into(), "someone walks forward".into(), "a walk".into()];
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let epochs = 2000;
    for e in 0..epochs {
        for b in make_batches(&ds, 8, epoch_seed(4, e)).unwrap() {
            for it in b {
                *counts.entry(it.caption).or_default() += 1;
            }
        }
    }
    let expected = (epochs * 16) as f64 / 3.0;
    for c in 0..3 {
        let got = counts[&c] as f64;
        assert!((got - expected).abs() <= 0.05 * expected, "caption {c}: {got} vs {expected}");
    }
}

#[test]
fn joint_training_with_an_empty_dataset_matches_single_dataset_training() {
    let mut ds = synth_dataset(5, 24, 3).unwrap();
    ds.pairs.iter_mut().for_each(|p| p.source = Source::A);
    let empty = Dataset::new("empty", MotionLayout::STANDARD);
    let joint = unify(&ds, &empty).unwrap();
    let cfg = small_config(2);
    let a = run(&cfg, &ds);
    let b = run(&cfg, &joint);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(features(&a.model, &ds), features(&b.model, &ds));
}

#[test]
fn lambda_trace_follows_the_swipe() {
    let ds = synth_dataset(6, 16, 2).unwrap();
    let cfg = TrainConfig { swipe: SwipeConfig::new(1, 4).unwrap(), ..small_config(6) };
    let out = run(&cfg, &ds);
    let trace: Vec<f64> = out.history.iter().filter(|r| r.term == "lambda").map(|r| r.value).collect();
    assert_eq!(trace.len(), 6);
    for (t, &l) in trace.iter().enumerate() {
        if t <= 1 {
            assert_eq!(l, 0.0);
        } else if t >= 4 {
            assert_eq!(l, 1.0);
        } else {
            assert!(l > trace[t - 1] && l < 1.0, "epoch {t}: {l}");
        }
    }
}

#[test]
fn self_and_supervised_modes_pin_lambda() {
    let swipe = SwipeConfig::new(8, 20).unwrap();
    for t in [0, 10, 30] {
        assert_eq!(LossMode::CcclSelf.lambda(t, &swipe), Some(1.0));
        assert_eq!(LossMode::CcclSupervised.lambda(t, &swipe), Some(0.0));
        assert_eq!(LossMode::Infonce.lambda(t, &swipe), None);
    }
}

#[test]
fn training_is_seed_deterministic() {
    let ds = synth_dataset(7, 16, 2).unwrap();
    let cfg = small_config(2);
    let a = run(&cfg, &ds);
    let b = run(&cfg, &ds);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(features(&a.model, &ds), features(&b.model, &ds));
    assert!(a.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let ds = synth_dataset(8, 16, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small_config(1), &ds, &TrainSink { out_dir: Some(dir.path().to_path_buf()) }).unwrap();
    let path = dir.path().join("checkpoint.motc");
    let loaded = RetrievalModel::load(&path, DType::F32).unwrap();
    assert_eq!(features(&out.model, &ds), features(&loaded, &ds));
    let texts: Vec<&str> = ds.pairs.iter().map(|p| p.texts[0].as_str()).collect();
    assert_eq!(out.model.text_features(&texts, 8).unwrap(), loaded.text_features(&texts, 8).unwrap());
    let history = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert!(history.lines().count() >= 2);
}

#[test]
fn gradients_match_finite_differences() {
    let reports = gradient_suite(&GradCheckConfig::default()).unwrap();
    assert!(!reports.is_empty());
    for (name, r) in &reports {
        assert!(r.passed, "{name}: max rel error {} at {}", r.max_rel_error, r.worst);
    }
}
