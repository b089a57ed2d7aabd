//! Spatio-temporal motion encoder.
//!
//! Per-frame skeleton tokens are reduced to seven group tokens by independent
//! MLPs (five body parts, root, feet), then processed by transformer layers
//! that attend either across groups within a frame (spatial) or across frames
//! within a group (temporal). Two learned CLS tokens carry the Gaussian mean
//! and log-variance. They are replicated along the batch-like axis of each
//! stage and mean-pooled over their replicas when the stage ends.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{MotionLayout, MotionSequence};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Ctx, Init, LayerNorm, Linear, Mlp, ParamStore, TransformerLayer};

pub const NUM_GROUPS: usize = 7;
pub const NUM_BODY_GROUPS: usize = 5;

/// Body-joint index table for the five body-part groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointPartition {
    pub groups: Vec<Vec<usize>>,
}

impl Default for JointPartition {
    /// Left arm, right arm, left leg, right leg, torso + head over the 21
    /// non-root SMPL joints (hips first, wrists last).
    fn default() -> Self {
        Self {
            groups: vec![
                vec![12, 15, 17, 19],
                vec![13, 16, 18, 20],
                vec![0, 3, 6, 9],
                vec![1, 4, 7, 10],
                vec![2, 5, 8, 11, 14],
            ],
        }
    }
}

impl JointPartition {
    pub fn validate(&self, body_joints: usize) -> Result<()> {
        if self.groups.len() != NUM_BODY_GROUPS {
            return Err(Error::Config(format!(
                "joint partition needs {NUM_BODY_GROUPS} groups, got {}",
                self.groups.len()
            )));
        }
        let mut seen = vec![false; body_joints];
        for &j in self.groups.iter().flatten() {
            if j >= body_joints || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Config(format!(
                    "joint partition does not cover the {body_joints} body joints exactly (joint {j})"
                )));
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("joint partition misses body joint {missing}")));
        }
        Ok(())
    }

    /// Input width of each of the seven grouping MLPs.
    pub fn input_widths(&self, layout: &MotionLayout) -> Vec<usize> {
        let mut w: Vec<usize> = self.groups.iter().map(|g| g.len() * layout.joint_dim).collect();
        w.push(layout.root_dim);
        w.push(layout.feet_dim);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// All spatial layers, then all temporal layers.
    FactorizedEncoder,
    /// Spatial and temporal layers interleaved, spatial first.
    FactorizedSelfAttention,
}

/// Which stages the CLS tokens take part in. A non-participating stage passes
/// them through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsRouting {
    Both,
    SpatialOnly,
    TemporalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Spatial,
    Temporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub model_width: usize,
    pub latent_dim: usize,
    pub attention_mode: AttentionMode,
    pub max_frames: usize,
    pub dropout: f32,
    pub cls_routing: ClsRouting,
    pub partition: JointPartition,
}

impl EncoderConfig {
    /// Two spatial then two temporal layers, 4 heads, 1024-wide feed-forward,
    /// 256-d common space, 200-frame cap.
    pub fn full() -> Self {
        Self {
            depth: 4,
            heads: 4,
            ffn_width: 1024,
            model_width: 256,
            latent_dim: 256,
            attention_mode: AttentionMode::FactorizedEncoder,
            max_frames: 200,
            dropout: 0.1,
            cls_routing: ClsRouting::Both,
            partition: JointPartition::default(),
        }
    }

    /// Small-width variant for single-core CPU runs.
    pub fn desk() -> Self {
        Self {
            model_width: 64,
            ffn_width: 128,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return Err(Error::Config(format!("depth must be even and positive, got {}", self.depth)));
        }
        if self.heads == 0 || !self.model_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide model width {}",
                self.heads, self.model_width
            )));
        }
        if self.max_frames < 2 {
            return Err(Error::Config("max_frames must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.partition.validate(MotionLayout::STANDARD.body_joints)
    }

    /// Axis processed by each layer, in order.
    pub fn layer_axes(&self) -> Vec<Axis> {
        let half = self.depth / 2;
        match self.attention_mode {
            AttentionMode::FactorizedEncoder => std::iter::repeat_n(Axis::Spatial, half)
                .chain(std::iter::repeat_n(Axis::Temporal, half))
                .collect(),
            AttentionMode::FactorizedSelfAttention => (0..self.depth)
                .map(|i| if i % 2 == 0 { Axis::Spatial } else { Axis::Temporal })
                .collect(),
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Mean and log-variance of a diagonal Gaussian, one row per batch item.
#[derive(Clone, Debug)]
pub struct LatentGaussian {
    /// `[B, latent_dim]`; the retrieval feature.
    pub mu: Tensor,
    /// `[B, latent_dim]`; log sigma squared.
    pub log_var: Tensor,
}

/// Padded batch of motions already split into the seven group inputs.
#[derive(Clone, Debug)]
pub struct MotionBatch {
    /// Seven tensors `[B, T, width_g]`, zero on padded frames.
    pub groups: Vec<Tensor>,
    /// `[B, T]`, 1 on valid frames.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl MotionBatch {
    /// Pads to the longest motion (or `pad_to`, if larger).
    pub fn new(
        motions: &[&MotionSequence],
        partition: &JointPartition,
        dtype: DType,
        pad_to: Option<usize>,
    ) -> Result<Self> {
        let first = motions
            .first()
            .ok_or_else(|| Error::Invalid("empty motion batch".into()))?;
        let layout = first.layout();
        if motions.iter().any(|m| m.layout() != layout) {
            return Err(Error::Layout("motions in a batch have different layouts".into()));
        }
        if layout.body_joints != MotionLayout::STANDARD.body_joints {
            return Err(Error::Layout(format!(
                "encoder expects {} body joints, motion has {}",
                MotionLayout::STANDARD.body_joints,
                layout.body_joints
            )));
        }
        let b = motions.len();
        let lengths: Vec<usize> = motions.iter().map(|m| m.frames()).collect();
        let t_max = lengths.iter().copied().max().unwrap().max(pad_to.unwrap_or(0));
        let widths = partition.input_widths(&layout);
        let device = Device::Cpu;

        let mut groups = Vec::with_capacity(NUM_GROUPS);
        for (g, &w) in widths.iter().enumerate() {
            let mut data = vec![0.0f32; b * t_max * w];
            for (bi, m) in motions.iter().enumerate() {
                for t in 0..m.frames() {
                    let dst = &mut data[(bi * t_max + t) * w..(bi * t_max + t + 1) * w];
                    if g < NUM_BODY_GROUPS {
                        let frame = m.body_frame(t);
                        let jd = layout.joint_dim;
                        for (k, &j) in partition.groups[g].iter().enumerate() {
                            dst[k * jd..(k + 1) * jd].copy_from_slice(&frame[j * jd..(j + 1) * jd]);
                        }
                    } else if g == NUM_BODY_GROUPS {
                        dst.copy_from_slice(m.root_frame(t));
                    } else {
                        dst.copy_from_slice(m.feet_frame(t));
                    }
                }
            }
            groups.push(Tensor::from_vec(data, (b, t_max, w), &device)?.to_dtype(dtype)?);
        }
        let mut mask = vec![0.0f32; b * t_max];
        for (bi, &len) in lengths.iter().enumerate() {
            mask[bi * t_max..bi * t_max + len].fill(1.0);
        }
        let mask = Tensor::from_vec(mask, (b, t_max), &device)?.to_dtype(dtype)?;
        Ok(Self { groups, mask, lengths })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn frames(&self) -> usize {
        self.mask.dims()[1]
    }
}

/// Seven independent grouping MLPs mapping frame features to `[B, T, 7, D]`.
#[derive(Clone, Debug)]
pub struct JointGrouping {
    mlps: Vec<Mlp>,
}

impl JointGrouping {
    pub fn new(init: &mut Init, widths: &[usize], model_width: usize) -> Result<Self> {
        let mlps = widths
            .iter()
            .enumerate()
            .map(|(g, &w)| Mlp::new(init, &format!("group{g}"), w, model_width, model_width))
            .collect::<Result<_>>()?;
        Ok(Self { mlps })
    }

    pub fn forward(&self, batch: &MotionBatch) -> Result<Tensor> {
        let tokens = self
            .mlps
            .iter()
            .zip(&batch.groups)
            .map(|(mlp, x)| mlp.forward(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&tokens, 2)?)
    }
}

/// Result of running one stage of same-axis layers.
pub struct StageOutput {
    /// `[B, T, 7, D]`.
    pub tokens: Tensor,
    /// CLS replicas before pooling: `[B, T, 2, D]` after a spatial stage,
    /// `[B, 7, 2, D]` after a temporal one.
    pub cls_replicas: Tensor,
    /// `[B, 2, D]`.
    pub cls: Tensor,
}

#[derive(Clone, Debug)]
pub struct MotionEncoder {
    cfg: EncoderConfig,
    grouping: JointGrouping,
    group_embedding: Tensor,
    cls: Tensor,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    head_mu: Linear,
    head_log_var: Linear,
}

impl MotionEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_width;
        let widths = cfg.partition.input_widths(&MotionLayout::STANDARD);
        init.scoped("motion", |init| {
            let grouping = JointGrouping::new(init, &widths, d)?;
            let bound = 3f32.sqrt();
            let group_embedding = init.uniform("group_embedding", &[NUM_GROUPS, d], bound)?;
            let cls = init.uniform("cls", &[2, d], 1.0 / (d as f32).sqrt())?;
            let layers = (0..cfg.depth)
                .map(|i| TransformerLayer::new(init, &format!("layer{i}"), d, cfg.heads, cfg.ffn_width))
                .collect::<Result<_>>()?;
            Ok(Self {
                cfg: cfg.clone(),
                grouping,
                group_embedding,
                cls,
                layers,
                final_norm: LayerNorm::new(init, "final_norm", d)?,
                head_mu: Linear::new(init, "head_mu", d, cfg.latent_dim)?,
                head_log_var: Linear::new(init, "head_log_var", d, cfg.latent_dim)?,
            })
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn grouping(&self) -> &JointGrouping {
        &self.grouping
    }

    /// Grouped tokens with time and group position encodings, zero on
    /// padded frames: `[B, T, 7, D]`.
    pub fn embed(&self, batch: &MotionBatch) -> Result<Tensor> {
        let x = self.grouping.forward(batch)?;
        let (_, t, _, d) = x.dims4()?;
        // Content scaled by sqrt(d) so the unit-amplitude time code does not drown it.
        let x = (x * (d as f64).sqrt())?;
        let time = sinusoidal(t, d, x.dtype(), x.device())?.reshape((1, t, 1, d))?;
        let group = self.group_embedding.reshape((1, 1, NUM_GROUPS, d))?;
        let x = x.broadcast_add(&time)?.broadcast_add(&group)?;
        Ok(x.broadcast_mul(&frame_mask(&batch.mask)?)?)
    }

    /// Initial CLS pair broadcast over the batch: `[B, 2, D]`.
    pub fn initial_cls(&self, batch_size: usize) -> Result<Tensor> {
        let d = self.cfg.model_width;
        Ok(self.cls.unsqueeze(0)?.broadcast_as((batch_size, 2, d))?.contiguous()?)
    }

    /// Runs `layers` (all on `axis`) over the token grid with the CLS pair
    /// replicated per frame (spatial) or per group (temporal).
    pub fn run_stage(
        &self,
        axis: Axis,
        layers: std::ops::Range<usize>,
        tokens: &Tensor,
        cls: &Tensor,
        mask: &Tensor,
        ctx: &Ctx,
    ) -> Result<StageOutput> {
        let (b, t, g, d) = tokens.dims4()?;
        let with_cls = matches!(
            (axis, self.cfg.cls_routing),
            (_, ClsRouting::Both) | (Axis::Spatial, ClsRouting::SpatialOnly) | (Axis::Temporal, ClsRouting::TemporalOnly)
        );
        let extra = if with_cls { 2 } else { 0 };
        match axis {
            Axis::Spatial => {
                let mut seq = tokens.clone();
                if with_cls {
                    let rep = cls.unsqueeze(1)?.broadcast_as((b, t, 2, d))?;
                    seq = Tensor::cat(&[&rep, tokens], 2)?;
                }
                let mut seq = seq.reshape((b * t, g + extra, d))?;
                for layer in &self.layers[layers] {
                    seq = layer.forward(&seq, None, ctx)?;
                }
                let seq = seq.reshape((b, t, g + extra, d))?;
                let fmask = frame_mask(mask)?;
                let tokens = seq.narrow(2, extra, g)?.broadcast_mul(&fmask)?;
                if !with_cls {
                    let rep = cls.unsqueeze(1)?.broadcast_as((b, t, 2, d))?.contiguous()?;
                    return Ok(StageOutput { tokens, cls_replicas: rep, cls: cls.clone() });
                }
                let replicas = seq.narrow(2, 0, 2)?;
                let counts = mask.sum_keepdim(1)?.reshape((b, 1, 1))?;
                let pooled = replicas
                    .broadcast_mul(&fmask)?
                    .sum(1)?
                    .broadcast_div(&counts)?;
                Ok(StageOutput { tokens, cls_replicas: replicas, cls: pooled })
            }
            Axis::Temporal => {
                let xt = tokens.transpose(1, 2)?;
                let mut seq = xt.clone();
                let mut key_mask = mask.clone();
                if with_cls {
                    let rep = cls.unsqueeze(1)?.broadcast_as((b, g, 2, d))?;
                    seq = Tensor::cat(&[&rep, &xt], 2)?;
                    let ones = Tensor::ones((b, 2), mask.dtype(), mask.device())?;
                    key_mask = Tensor::cat(&[&ones, mask], 1)?;
                }
                let key_mask = key_mask
                    .unsqueeze(1)?
                    .broadcast_as((b, g, t + extra))?
                    .reshape((b * g, t + extra))?;
                let mut seq = seq.reshape((b * g, t + extra, d))?;
                for layer in &self.layers[layers] {
                    seq = layer.forward(&seq, Some(&key_mask), ctx)?;
                }
                let seq = seq.reshape((b, g, t + extra, d))?;
                let tokens = seq.narrow(2, extra, t)?.transpose(1, 2)?.contiguous()?;
                if !with_cls {
                    let rep = cls.unsqueeze(1)?.broadcast_as((b, g, 2, d))?.contiguous()?;
                    return Ok(StageOutput { tokens, cls_replicas: rep, cls: cls.clone() });
                }
                let replicas = seq.narrow(2, 0, 2)?;
                let pooled = replicas.mean(1)?;
                Ok(StageOutput { tokens, cls_replicas: replicas, cls: pooled })
            }
        }
    }

    /// Contiguous runs of same-axis layers.
    pub fn stages(&self) -> Vec<(Axis, std::ops::Range<usize>)> {
        let axes = self.cfg.layer_axes();
        let mut out: Vec<(Axis, std::ops::Range<usize>)> = Vec::new();
        for (i, axis) in axes.into_iter().enumerate() {
            match out.last_mut() {
                Some((a, r)) if *a == axis => r.end = i + 1,
                _ => out.push((axis, i..i + 1)),
            }
        }
        out
    }

    pub fn forward(&self, batch: &MotionBatch, ctx: &Ctx) -> Result<LatentGaussian> {
        let mut tokens = self.embed(batch)?;
        let mut cls = self.initial_cls(batch.batch_size())?;
        for (axis, range) in self.stages() {
            let out = self.run_stage(axis, range, &tokens, &cls, &batch.mask, ctx)?;
            tokens = out.tokens;
            cls = out.cls;
        }
        let cls = self.final_norm.forward(&cls)?;
        Ok(LatentGaussian {
            mu: self.head_mu.forward(&cls.narrow(1, 0, 1)?.squeeze(1)?)?,
            log_var: self.head_log_var.forward(&cls.narrow(1, 1, 1)?.squeeze(1)?)?,
        })
    }

    /// Encodes motions, downsampling any that exceed `max_frames`.
    pub fn encode(&self, motions: &[&MotionSequence], dtype: DType, ctx: &Ctx) -> Result<LatentGaussian> {
        let capped: Vec<MotionSequence>;
        let refs: Vec<&MotionSequence> = if motions.iter().any(|m| m.frames() > self.cfg.max_frames) {
            capped = motions.iter().map(|m| m.downsample(self.cfg.max_frames)).collect();
            capped.iter().collect()
        } else {
            motions.to_vec()
        };
        let batch = MotionBatch::new(&refs, &self.cfg.partition, dtype, None)?;
        self.forward(&batch, ctx)
    }
}

/// `[B, T]` -> `[B, T, 1, 1]`.
fn frame_mask(mask: &Tensor) -> Result<Tensor> {
    Ok(mask.unsqueeze(2)?.unsqueeze(3)?)
}

/// Builds a standalone encoder with its own parameter store.
pub fn build_motion_encoder(cfg: &EncoderConfig, dtype: DType, seed: u64) -> Result<(ParamStore, MotionEncoder)> {
    let mut store = ParamStore::new(dtype);
    let enc = {
        let mut init = Init::new(&mut store, seed);
        MotionEncoder::new(&mut init, cfg)?
    };
    Ok((store, enc))
}
