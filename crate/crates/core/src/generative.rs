//! Variational regularization branch: reparameterized sampling, a small
//! temporal-transformer motion decoder and the reconstruction / KL losses.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::MotionLayout;
use crate::error::{Error, Result};
use crate::motion_encoder::{JointPartition, LatentGaussian, NUM_BODY_GROUPS, NUM_GROUPS};
use crate::nn::{sinusoidal, Ctx, Init, LayerNorm, Linear, Mlp, TransformerLayer};

#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Tensor,
    /// The standard-normal draw, kept for replay.
    pub noise: Tensor,
}

/// `z = mu + noise * exp(log_var / 2)`.
pub fn reparameterize(g: &LatentGaussian, noise: &Tensor) -> Result<LatentSample> {
    if noise.dims() != g.mu.dims() {
        return Err(Error::Invalid(format!(
            "noise shape {:?} does not match mean shape {:?}",
            noise.dims(),
            g.mu.dims()
        )));
    }
    let sigma = (&g.log_var * 0.5)?.exp()?;
    let z = (&g.mu + noise.mul(&sigma)?)?;
    Ok(LatentSample { z, noise: noise.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub model_width: usize,
    pub latent_dim: usize,
}

/// Decoder output, one tensor `[B, T, width_g]` per group in encoder order.
#[derive(Clone, Debug)]
pub struct DecodedMotion {
    pub groups: Vec<Tensor>,
}

/// Decoder output rearranged into the motion layout.
#[derive(Clone, Debug)]
pub struct MotionTensors {
    /// `[B, T, 21, 12]`.
    pub body: Tensor,
    /// `[B, T, 4]`.
    pub root: Tensor,
    /// `[B, T, 4]`.
    pub feet: Tensor,
}

#[derive(Clone, Debug)]
pub struct MotionDecoder {
    cfg: DecoderConfig,
    input: Linear,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    heads: Vec<Mlp>,
}

impl MotionDecoder {
    pub fn new(init: &mut Init, cfg: &DecoderConfig, partition: &JointPartition) -> Result<Self> {
        let d = cfg.model_width;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("{} heads do not divide decoder width {d}", cfg.heads)));
        }
        let widths = partition.input_widths(&MotionLayout::STANDARD);
        init.scoped("decoder", |init| {
            Ok(Self {
                cfg: cfg.clone(),
                input: Linear::new(init, "input", cfg.latent_dim, d)?,
                layers: (0..cfg.depth)
                    .map(|i| TransformerLayer::new(init, &format!("layer{i}"), d, cfg.heads, cfg.ffn_width))
                    .collect::<Result<_>>()?,
                final_norm: LayerNorm::new(init, "final_norm", d)?,
                heads: widths
                    .iter()
                    .enumerate()
                    .map(|(g, &w)| Mlp::new(init, &format!("head{g}"), d, d, w))
                    .collect::<Result<_>>()?,
            })
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// `z`: `[B, latent]`; `mask`: `[B, T]` valid-frame flags.
    pub fn forward(&self, z: &Tensor, mask: &Tensor, ctx: &Ctx) -> Result<DecodedMotion> {
        let (b, t) = mask.dims2()?;
        let d = self.cfg.model_width;
        let h = self.input.forward(z)?.unsqueeze(1)?;
        let time = sinusoidal(t, d, z.dtype(), z.device())?.unsqueeze(0)?;
        let mut x = h.broadcast_add(&time)?.broadcast_mul(&mask.unsqueeze(2)?)?;
        debug_assert_eq!(x.dims(), &[b, t, d]);
        for layer in &self.layers {
            x = layer.forward(&x, Some(mask), ctx)?;
        }
        let x = self.final_norm.forward(&x)?;
        let fmask = mask.unsqueeze(2)?;
        let groups = self
            .heads
            .iter()
            .map(|head| Ok(head.forward(&x)?.broadcast_mul(&fmask)?))
            .collect::<Result<_>>()?;
        Ok(DecodedMotion { groups })
    }
}

pub fn decode_motion(decoder: &MotionDecoder, z: &Tensor, mask: &Tensor, ctx: &Ctx) -> Result<DecodedMotion> {
    decoder.forward(z, mask, ctx)
}

/// Scatters group tensors back into body / root / feet order.
pub fn to_layout(groups: &[Tensor], partition: &JointPartition, layout: &MotionLayout) -> Result<MotionTensors> {
    if groups.len() != NUM_GROUPS {
        return Err(Error::Layout(format!("expected {NUM_GROUPS} group tensors, got {}", groups.len())));
    }
    let (b, t, _) = groups[0].dims3()?;
    let jd = layout.joint_dim;
    let parts = groups[..NUM_BODY_GROUPS]
        .iter()
        .zip(&partition.groups)
        .map(|(g, idx)| g.reshape((b, t, idx.len(), jd)))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let stacked = Tensor::cat(&parts, 2)?;
    let order: Vec<usize> = partition.groups.iter().flatten().copied().collect();
    let mut inverse = vec![0u32; order.len()];
    for (pos, &j) in order.iter().enumerate() {
        inverse[j] = pos as u32;
    }
    let inverse = Tensor::new(inverse.as_slice(), groups[0].device())?;
    Ok(MotionTensors {
        body: stacked.index_select(&inverse, 2)?,
        root: groups[NUM_BODY_GROUPS].clone(),
        feet: groups[NUM_BODY_GROUPS + 1].clone(),
    })
}

/// Sum of elementwise L1 over all groups and valid frames, divided by each
/// item's frame count, averaged over the batch.
pub fn loss_reconstruction(target: &[Tensor], predicted: &[Tensor], mask: &Tensor) -> Result<Tensor> {
    if target.len() != predicted.len() {
        return Err(Error::Layout(format!(
            "reconstruction has {} groups, target has {}",
            predicted.len(),
            target.len()
        )));
    }
    let (b, _) = mask.dims2()?;
    let fmask = mask.unsqueeze(2)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in target.iter().zip(predicted) {
        if x.dims() != y.dims() {
            return Err(Error::Layout(format!("shape {:?} vs {:?}", x.dims(), y.dims())));
        }
        let per_item = (x - y)?.abs()?.broadcast_mul(&fmask)?.sum(2)?.sum(1)?;
        total = Some(match total {
            Some(t) => (t + per_item)?,
            None => per_item,
        });
    }
    let total = total.ok_or_else(|| Error::Layout("no groups to reconstruct".into()))?;
    let frames = mask.sum(1)?;
    Ok((total.div(&frames)?.sum_all()? / b as f64)?)
}

/// Which KL terms enter the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KlTerms {
    pub motion_prior: bool,
    pub text_prior: bool,
    pub text_to_motion: bool,
    pub motion_to_text: bool,
}

impl Default for KlTerms {
    fn default() -> Self {
        Self { motion_prior: true, text_prior: true, text_to_motion: true, motion_to_text: true }
    }
}

/// `KL(p || q)` per batch item for diagonal Gaussians, summed over dims.
pub fn kl_gaussian(p: &LatentGaussian, q: &LatentGaussian) -> Result<Tensor> {
    let var_p = p.log_var.exp()?;
    let var_q = q.log_var.exp()?;
    let diff2 = (&p.mu - &q.mu)?.sqr()?;
    let ratio = (var_p + diff2)?.div(&var_q)?;
    let t = ((&q.log_var - &p.log_var)? + ratio)? - 1.0;
    Ok((t?.sum(1)? * 0.5)?)
}

/// `KL(p || N(0, I))` per batch item.
pub fn kl_standard(p: &LatentGaussian) -> Result<Tensor> {
    let t = ((p.log_var.exp()? + p.mu.sqr()?)? - &p.log_var)? - 1.0;
    Ok((t?.sum(1)? * 0.5)?)
}

/// Sum of the enabled KL terms, averaged over the batch.
pub fn loss_kl(motion: &LatentGaussian, text: &LatentGaussian, terms: KlTerms) -> Result<Tensor> {
    let (b, _) = motion.mu.dims2()?;
    let mut parts = Vec::new();
    if terms.motion_prior {
        parts.push(kl_standard(motion)?);
    }
    if terms.text_prior {
        parts.push(kl_standard(text)?);
    }
    if terms.text_to_motion {
        parts.push(kl_gaussian(text, motion)?);
    }
    if terms.motion_to_text {
        parts.push(kl_gaussian(motion, text)?);
    }
    let mut total = Tensor::zeros(b, motion.mu.dtype(), motion.mu.device())?;
    for p in parts {
        total = (total + p)?;
    }
    Ok((total.sum_all()? / b as f64)?)
}

/// Standard-normal noise from the caller's generator, shaped like `like`.
pub fn draw_noise<R: rand::Rng>(rng: &mut R, like: &Tensor) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let data: Vec<f32> = (0..like.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, like.shape(), like.device())?.to_dtype(like.dtype())?)
}
