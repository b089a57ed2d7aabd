//! Finite-difference checks of every loss term and both encoders on tiny
//! f64 instances (batch 3, 4 frames).

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{MotionLayout, MotionSequence};
use crate::error::Result;
use crate::generative::{loss_kl, loss_reconstruction, reparameterize, DecoderConfig, KlTerms, MotionDecoder};
use crate::loss::{
    cccl_total, cosine_matrix, info_nce, info_nce_filtered, loss_cross_to_uni, loss_teacher_to_uni,
    score_distributions, teacher_distribution, CcclConfig, DistributionConfig,
};
use crate::motion_encoder::{build_motion_encoder, EncoderConfig, JointPartition, LatentGaussian, MotionBatch};
use crate::nn::{Ctx, Init, ParamStore};
use crate::text::{build_text_encoder, tokenize, TextBatch, TextConfig, Vocab};
use crate::train::{grad_check, GradCheckConfig, GradReport};

const B: usize = 3;
const T: usize = 4;
const DIM: usize = 5;

/// Encoder shape small enough for exhaustive-ish checking.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        heads: 2,
        ffn_width: 8,
        model_width: 8,
        latent_dim: DIM,
        max_frames: 16,
        dropout: 0.0,
        ..EncoderConfig::desk()
    }
}

fn var(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Var> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?)
}

fn named(pairs: &[(&str, &Var)]) -> Vec<(String, Var)> {
    pairs.iter().map(|(n, v)| (n.to_string(), (*v).clone())).collect()
}

/// Random motions of `T` frames, the last one shortened to exercise padding.
pub fn toy_motions(seed: u64) -> Result<Vec<MotionSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = MotionLayout::STANDARD;
    (0..B)
        .map(|i| {
            let frames = if i + 1 == B { T - 1 } else { T };
            let body = (0..frames * layout.body_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let root = (0..frames * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let feet = (0..frames * 4).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            MotionSequence::new(layout, 20.0, body, root, feet)
        })
        .collect()
}

const TOY_TEXTS: [&str; B] = ["a person walks forward", "someone waves the left hand", "a man jumps"];

/// Runs all checks and returns one named report per check.
pub fn gradient_suite(cfg: &GradCheckConfig) -> Result<Vec<(String, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let t = var(&mut rng, &[B, DIM], 1.0)?;
    let m = var(&mut rng, &[B, DIM], 1.0)?;
    let log_tau = var(&mut rng, &[], 0.5)?;
    let tau = || -> Result<Tensor> { Ok(log_tau.as_tensor().exp()?) };
    let features = named(&[("t", &t), ("m", &m)]);
    let with_tau = named(&[("t", &t), ("m", &m), ("log_tau", &log_tau)]);

    let sim = |a: &Var, b: &Var| cosine_matrix(a.as_tensor(), b.as_tensor());
    out.push(("info_nce".into(), grad_check(|| info_nce(&sim(&t, &m)?, &tau()?), &with_tau, cfg)?));

    // One off-diagonal pair above the threshold, so the filter is active.
    let teacher = Tensor::from_vec(vec![1.0f64, 0.97, 0.2, 0.97, 1.0, 0.4, 0.2, 0.4, 1.0], (B, B), &Device::Cpu)?;
    out.push((
        "info_nce_filtered".into(),
        grad_check(|| info_nce_filtered(&sim(&t, &m)?, &teacher, 0.95, &tau()?), &with_tau, cfg)?,
    ));

    let dcfg = DistributionConfig::default();
    out.push((
        "cross_to_uni".into(),
        grad_check(|| loss_cross_to_uni(&score_distributions(t.as_tensor(), m.as_tensor(), &dcfg)?), &features, cfg)?,
    ));
    let log_gt = teacher_distribution(&teacher, 1.0, false)?;
    out.push((
        "teacher_to_uni".into(),
        grad_check(
            || loss_teacher_to_uni(&log_gt, &score_distributions(t.as_tensor(), m.as_tensor(), &dcfg)?),
            &features,
            cfg,
        )?,
    ));
    let ccfg = CcclConfig::default();
    out.push((
        "cccl_total".into(),
        grad_check(
            || Ok(cccl_total(t.as_tensor(), m.as_tensor(), &tau()?, Some(&teacher), 0.3, &ccfg)?.total),
            &with_tau,
            cfg,
        )?,
    ));

    let partition = JointPartition::default();
    let widths = partition.input_widths(&MotionLayout::STANDARD);
    let mask = Tensor::from_vec(
        (0..B * T).map(|k| if k / T + 1 == B && k % T == T - 1 { 0.0 } else { 1.0 }).collect::<Vec<f64>>(),
        (B, T),
        &Device::Cpu,
    )?;
    let targets = widths
        .iter()
        .map(|&w| Ok(var(&mut rng, &[B, T, w], 1.0)?.as_tensor().broadcast_mul(&mask.unsqueeze(2)?)?))
        .collect::<Result<Vec<_>>>()?;
    let preds = widths.iter().map(|&w| var(&mut rng, &[B, T, w], 1.0)).collect::<Result<Vec<_>>>()?;
    let pred_params: Vec<(String, Var)> = preds.iter().enumerate().map(|(g, v)| (format!("pred{g}"), v.clone())).collect();
    out.push((
        "reconstruction".into(),
        grad_check(
            || {
                let p: Vec<Tensor> = preds.iter().map(|v| v.as_tensor().clone()).collect();
                loss_reconstruction(&targets, &p, &mask)
            },
            &pred_params,
            cfg,
        )?,
    ));

    let mu_m = var(&mut rng, &[B, DIM], 1.0)?;
    let lv_m = var(&mut rng, &[B, DIM], 0.5)?;
    let mu_t = var(&mut rng, &[B, DIM], 1.0)?;
    let lv_t = var(&mut rng, &[B, DIM], 0.5)?;
    let gauss = |mu: &Var, lv: &Var| LatentGaussian { mu: mu.as_tensor().clone(), log_var: lv.as_tensor().clone() };
    out.push((
        "kl".into(),
        grad_check(
            || loss_kl(&gauss(&mu_m, &lv_m), &gauss(&mu_t, &lv_t), KlTerms::default()),
            &named(&[("mu_m", &mu_m), ("log_var_m", &lv_m), ("mu_t", &mu_t), ("log_var_t", &lv_t)]),
            cfg,
        )?,
    ));

    let noise = var(&mut rng, &[B, DIM], 1.0)?.as_tensor().detach();
    let weights = var(&mut rng, &[B, DIM], 1.0)?.as_tensor().detach();
    out.push((
        "reparameterize".into(),
        grad_check(
            || Ok(reparameterize(&gauss(&mu_m, &lv_m), &noise)?.z.mul(&weights)?.sum_all()?),
            &named(&[("mu", &mu_m), ("log_var", &lv_m)]),
            cfg,
        )?,
    ));

    // Encoders: a fixed random projection of (mu, log_var) to a scalar.
    let proj_mu = var(&mut rng, &[B, DIM], 1.0)?.as_tensor().detach();
    let proj_lv = var(&mut rng, &[B, DIM], 1.0)?.as_tensor().detach();
    let project = |g: LatentGaussian| -> Result<Tensor> {
        Ok((g.mu.mul(&proj_mu)?.sum_all()? + g.log_var.mul(&proj_lv)?.sum_all()?)?)
    };

    let ecfg = tiny_encoder_config();
    let motions = toy_motions(cfg.seed)?;
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let batch = MotionBatch::new(&refs, &ecfg.partition, DType::F64, None)?;
    let (store, enc) = build_motion_encoder(&ecfg, DType::F64, cfg.seed)?;
    out.push((
        "motion_encoder".into(),
        grad_check(|| project(enc.forward(&batch, &Ctx::eval())?), store.vars(), cfg)?,
    ));

    let vocab = Vocab::build(TOY_TEXTS);
    let tcfg = TextConfig {
        depth: 2,
        heads: 2,
        ffn_width: 8,
        model_width: 8,
        latent_dim: DIM,
        dropout: 0.0,
    };
    let toks = TOY_TEXTS.iter().map(|s| tokenize(s, &vocab)).collect::<Result<Vec<_>>>()?;
    let tbatch = TextBatch::new(&toks, DType::F64, None)?;
    let (tstore, tenc) = build_text_encoder(&tcfg, vocab.size(), DType::F64, cfg.seed)?;
    out.push((
        "text_encoder".into(),
        grad_check(|| project(tenc.forward(&tbatch, &Ctx::eval())?), tstore.vars(), cfg)?,
    ));

    let dcfg = DecoderConfig { depth: 1, heads: 2, ffn_width: 8, model_width: 8, latent_dim: DIM };
    let mut dstore = ParamStore::new(DType::F64);
    let dec = MotionDecoder::new(&mut Init::new(&mut dstore, cfg.seed), &dcfg, &partition)?;
    let z = mu_m.as_tensor().detach();
    out.push((
        "decoder".into(),
        grad_check(
            || loss_reconstruction(&targets, &dec.forward(&z, &mask, &Ctx::eval())?.groups, &mask),
            dstore.vars(),
            cfg,
        )?,
    ));
    Ok(out)
}
