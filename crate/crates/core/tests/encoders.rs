mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use motext::data::{MotionLayout, MotionSequence};
use motext::generative::{to_layout, DecoderConfig, MotionDecoder};
use motext::gradsuite::{tiny_encoder_config, toy_motions};
use motext::model::ModelConfig;
use motext::motion_encoder::{
    build_motion_encoder, AttentionMode, Axis, ClsRouting, EncoderConfig, JointPartition, MotionBatch,
};
use motext::nn::{Ctx, Init, ParamStore};
use motext::text::{build_text_encoder, tokenize, TextBatch, TextConfig, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn mu_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (b, d) = t.dims2().unwrap();
    let v = flat(t);
    (0..b).map(|i| v[i * d..(i + 1) * d].to_vec()).collect()
}

#[test]
fn full_config_produces_256_dim_latents() {
    let cfg = ModelConfig::full();
    let (_, enc) = build_motion_encoder(&cfg.motion, DType::F32, 0).unwrap();
    let motions = toy_motions(1).unwrap();
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let g = enc.encode(&refs, DType::F32, &Ctx::eval()).unwrap();
    assert_eq!(g.mu.dims(), &[3, 256]);
    assert_eq!(g.log_var.dims(), &[3, 256]);

    let texts = ["a person walks", "someone jumps high"];
    let vocab = Vocab::build(texts);
    let (_, tenc) = build_text_encoder(&cfg.text, vocab.size(), DType::F32, 0).unwrap();
    let g = tenc.encode(&texts, &vocab, DType::F32, &Ctx::eval()).unwrap();
    assert_eq!(g.mu.dims(), &[2, 256]);
}

#[test]
fn motion_encoder_is_padding_invariant() {
    for mode in [AttentionMode::FactorizedEncoder, AttentionMode::FactorizedSelfAttention] {
        for routing in [ClsRouting::Both, ClsRouting::SpatialOnly, ClsRouting::TemporalOnly] {
            let cfg = EncoderConfig { attention_mode: mode, cls_routing: routing, ..tiny_encoder_config() };
            let (_, enc) = build_motion_encoder(&cfg, DType::F64, 2).unwrap();
            let motions = toy_motions(3).unwrap();
            let short = &motions[2];
            let alone = MotionBatch::new(&[short], &cfg.partition, DType::F64, None).unwrap();
            let alone = mu_rows(&enc.forward(&alone, &Ctx::eval()).unwrap().mu).remove(0);
            let refs: Vec<&MotionSequence> = motions.iter().collect();
            let padded = MotionBatch::new(&refs, &cfg.partition, DType::F64, Some(9)).unwrap();
            let padded = mu_rows(&enc.forward(&padded, &Ctx::eval()).unwrap().mu).remove(2);
            let err = max_abs_diff(&alone, &padded);
            assert!(err < 1e-10, "{mode:?}/{routing:?}: {err}");
        }
    }
}

#[test]
fn motion_encoder_is_deterministic() {
    let cfg = tiny_encoder_config();
    let (s1, e1) = build_motion_encoder(&cfg, DType::F32, 4).unwrap();
    let (s2, e2) = build_motion_encoder(&cfg, DType::F32, 4).unwrap();
    for ((n1, v1), (n2, v2)) in s1.vars().iter().zip(s2.vars()) {
        assert_eq!(n1, n2);
        assert_eq!(flat(v1.as_tensor()), flat(v2.as_tensor()));
    }
    let motions = toy_motions(5).unwrap();
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let a = e1.encode(&refs, DType::F32, &Ctx::eval()).unwrap();
    let b = e2.encode(&refs, DType::F32, &Ctx::eval()).unwrap();
    assert_eq!(flat(&a.mu), flat(&b.mu));
    assert_eq!(flat(&a.log_var), flat(&b.log_var));
}

#[test]
fn f32_and_f64_builds_share_weights() {
    let cfg = tiny_encoder_config();
    let (s32, _) = build_motion_encoder(&cfg, DType::F32, 6).unwrap();
    let (s64, _) = build_motion_encoder(&cfg, DType::F64, 6).unwrap();
    for ((_, a), (_, b)) in s32.vars().iter().zip(s64.vars()) {
        assert_eq!(flat(a.as_tensor()), flat(b.as_tensor()));
    }
}

/// Indices of positions (rows of width `d`) whose values moved.
fn changed_rows(a: &Tensor, b: &Tensor, d: usize) -> Vec<usize> {
    let (a, b) = (flat(a), flat(b));
    (0..a.len() / d)
        .filter(|&r| max_abs_diff(&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]) > 1e-12)
        .collect()
}

fn perturb(tokens: &Tensor, b: usize, t: usize, g: usize) -> Tensor {
    let (_, tt, gg, d) = tokens.dims4().unwrap();
    let mut v = flat(tokens);
    let at = ((b * tt + t) * gg + g) * d;
    // Not a constant shift, which layer norm would erase.
    v[at..at + d].iter_mut().enumerate().for_each(|(i, x)| *x += 0.5 * (i as f64 + 1.0));
    Tensor::from_vec(v, tokens.dims(), &Device::Cpu).unwrap()
}

#[test]
fn spatial_layers_are_frame_local_and_temporal_layers_group_local() {
    let cfg = tiny_encoder_config();
    let (_, enc) = build_motion_encoder(&cfg, DType::F64, 7).unwrap();
    let (b, t, g, d) = (2, 5, 7, cfg.model_width);
    let tokens = random(&[b, t, g, d], 8);
    let cls = random(&[b, 2, d], 9);
    let mask = Tensor::ones((b, t), DType::F64, &Device::Cpu).unwrap();
    let ctx = Ctx::eval();
    let stages = enc.stages();
    let spatial = stages.iter().find(|(a, _)| *a == Axis::Spatial).unwrap().1.clone();
    let temporal = stages.iter().find(|(a, _)| *a == Axis::Temporal).unwrap().1.clone();

    // Frame 2 of item 0, group 3.
    let moved = perturb(&tokens, 0, 2, 3);
    let base = enc.run_stage(Axis::Spatial, spatial.clone(), &tokens, &cls, &mask, &ctx).unwrap();
    let out = enc.run_stage(Axis::Spatial, spatial, &moved, &cls, &mask, &ctx).unwrap();
    let rows = changed_rows(&base.tokens, &out.tokens, d);
    assert!(rows.iter().all(|&r| r / g == 2), "spatial stage leaked across frames: {rows:?}");
    assert!(rows.len() > 1, "attention should mix groups within the frame: {rows:?}");
    let reps = changed_rows(&base.cls_replicas, &out.cls_replicas, d);
    assert!(!reps.is_empty() && reps.iter().all(|&r| r / 2 == 2), "{reps:?}");

    let base = enc.run_stage(Axis::Temporal, temporal.clone(), &tokens, &cls, &mask, &ctx).unwrap();
    let out = enc.run_stage(Axis::Temporal, temporal, &moved, &cls, &mask, &ctx).unwrap();
    let rows = changed_rows(&base.tokens, &out.tokens, d);
    assert!(rows.iter().all(|&r| r / (t * g) == 0 && r % g == 3), "temporal stage leaked across groups: {rows:?}");
    assert!(rows.len() > 1, "attention should mix frames within the group");
    let reps = changed_rows(&base.cls_replicas, &out.cls_replicas, d);
    assert!(!reps.is_empty() && reps.iter().all(|&r| r / 2 == 3), "{reps:?}");
}

#[test]
fn both_attention_modes_have_equal_parameter_counts() {
    let a = EncoderConfig { attention_mode: AttentionMode::FactorizedEncoder, ..EncoderConfig::desk() };
    let b = EncoderConfig { attention_mode: AttentionMode::FactorizedSelfAttention, ..EncoderConfig::desk() };
    let (sa, _) = build_motion_encoder(&a, DType::F32, 0).unwrap();
    let (sb, _) = build_motion_encoder(&b, DType::F32, 0).unwrap();
    assert_eq!(sa.numel(), sb.numel());
}

fn tiny_text() -> (Vocab, TextConfig) {
    let vocab = Vocab::build(["a person walks forward slowly", "someone waves", "a man jumps twice"]);
    let cfg = TextConfig { depth: 2, heads: 2, ffn_width: 8, model_width: 8, latent_dim: 6, dropout: 0.0 };
    (vocab, cfg)
}

#[test]
fn text_encoder_is_padding_invariant() {
    let (vocab, cfg) = tiny_text();
    let (_, enc) = build_text_encoder(&cfg, vocab.size(), DType::F64, 10).unwrap();
    let texts = ["someone waves", "a person walks forward slowly"];
    let toks: Vec<_> = texts.iter().map(|s| tokenize(s, &vocab).unwrap()).collect();
    let alone = TextBatch::new(&toks[..1], DType::F64, None).unwrap();
    let alone = mu_rows(&enc.forward(&alone, &Ctx::eval()).unwrap().mu).remove(0);
    let padded = TextBatch::new(&toks, DType::F64, Some(12)).unwrap();
    let padded = mu_rows(&enc.forward(&padded, &Ctx::eval()).unwrap().mu).remove(0);
    assert!(max_abs_diff(&alone, &padded) < 1e-10);
}

#[test]
fn text_encoder_is_deterministic_and_word_sensitive() {
    let (vocab, cfg) = tiny_text();
    let (_, e1) = build_text_encoder(&cfg, vocab.size(), DType::F32, 11).unwrap();
    let (_, e2) = build_text_encoder(&cfg, vocab.size(), DType::F32, 11).unwrap();
    let texts = ["a man jumps twice", "a man waves twice"];
    let a = flat(&e1.encode(&texts, &vocab, DType::F32, &Ctx::eval()).unwrap().mu);
    let b = flat(&e2.encode(&texts, &vocab, DType::F32, &Ctx::eval()).unwrap().mu);
    assert_eq!(a, b);
    assert!(max_abs_diff(&a[..6], &a[6..]) > 1e-6);
}

fn decoder(seed: u64) -> (ParamStore, MotionDecoder) {
    let cfg = DecoderConfig { depth: 1, heads: 2, ffn_width: 8, model_width: 8, latent_dim: 6 };
    let mut store = ParamStore::new(DType::F64);
    let dec = MotionDecoder::new(&mut Init::new(&mut store, seed), &cfg, &JointPartition::default()).unwrap();
    (store, dec)
}

fn mask(lengths: &[usize], t: usize) -> Tensor {
    let v: Vec<f64> = lengths.iter().flat_map(|&l| (0..t).map(move |i| if i < l { 1.0 } else { 0.0 })).collect();
    Tensor::from_vec(v, (lengths.len(), t), &Device::Cpu).unwrap()
}

#[test]
fn decoder_output_mirrors_the_motion_layout() {
    let (_, dec) = decoder(12);
    let z = random(&[3, 6], 13);
    let m = mask(&[5, 5, 3], 5);
    let out = dec.forward(&z, &m, &Ctx::eval()).unwrap();
    let widths = JointPartition::default().input_widths(&MotionLayout::STANDARD);
    for (g, w) in out.groups.iter().zip(widths) {
        assert_eq!(g.dims(), &[3, 5, w]);
    }
    let layout = to_layout(&out.groups, &JointPartition::default(), &MotionLayout::STANDARD).unwrap();
    assert_eq!(layout.body.dims(), &[3, 5, 21, 12]);
    assert_eq!(layout.root.dims(), &[3, 5, 4]);
    assert_eq!(layout.feet.dims(), &[3, 5, 4]);
    // Padded frames of the short item are zero.
    let root = flat(&layout.root);
    assert!(root[(2 * 5 + 3) * 4..].iter().all(|&v| v == 0.0));
}

#[test]
fn to_layout_inverts_the_grouping() {
    let motions = toy_motions(14).unwrap();
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let p = JointPartition::default();
    let batch = MotionBatch::new(&refs, &p, DType::F64, None).unwrap();
    let back = to_layout(&batch.groups, &p, &MotionLayout::STANDARD).unwrap();
    let body = flat(&back.body);
    let m = &motions[0];
    let want: Vec<f64> = (0..m.frames()).flat_map(|t| m.body_frame(t).to_vec()).map(f64::from).collect();
    assert_eq!(&body[..want.len()], want.as_slice());
}

#[test]
fn zero_decoder_weights_give_zero_output() {
    let (store, dec) = decoder(15);
    zero(&store, "");
    let out = dec.forward(&random(&[2, 6], 16), &mask(&[4, 4], 4), &Ctx::eval()).unwrap();
    for g in &out.groups {
        assert!(flat(g).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn decoder_is_deterministic() {
    let (_, a) = decoder(17);
    let (_, b) = decoder(17);
    let z = random(&[2, 6], 18);
    let m = mask(&[4, 2], 4);
    let ga = a.forward(&z, &m, &Ctx::eval()).unwrap();
    let gb = b.forward(&z, &m, &Ctx::eval()).unwrap();
    for (x, y) in ga.groups.iter().zip(&gb.groups) {
        assert_eq!(flat(x), flat(y));
    }
}
