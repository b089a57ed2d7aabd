//! The trainable bundle (motion encoder, text encoder, decoder, temperature)
//! and its checkpoint file.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::bytes::{read_file, seal, sha256_hex, unseal, write_file, ByteReader, ByteWriter};
use crate::data::MotionSequence;
use crate::error::{Error, Result};
use crate::generative::{DecoderConfig, MotionDecoder};
use crate::loss::Temperature;
use crate::motion_encoder::{EncoderConfig, LatentGaussian, MotionBatch, MotionEncoder};
use crate::nn::{Ctx, Init, ParamStore};
use crate::text::{tokenize, TextBatch, TextConfig, TextEncoder, Vocab};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOTC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub motion: EncoderConfig,
    pub text: TextConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Full-scale widths: 256-d model and common space,
    /// 1024-wide feed-forward, 4 heads.
    pub fn full() -> Self {
        Self::matching(EncoderConfig::full())
    }

    /// 64-d model width, 4 encoder layers.
    pub fn desk() -> Self {
        Self::matching(EncoderConfig::desk())
    }

    /// Text encoder and decoder sized after the motion encoder.
    pub fn matching(motion: EncoderConfig) -> Self {
        let text = TextConfig {
            depth: motion.depth,
            heads: motion.heads,
            ffn_width: motion.ffn_width,
            model_width: motion.model_width,
            latent_dim: motion.latent_dim,
            dropout: motion.dropout,
        };
        let decoder = DecoderConfig {
            depth: 2,
            heads: motion.heads,
            ffn_width: motion.ffn_width,
            model_width: motion.model_width,
            latent_dim: motion.latent_dim,
        };
        Self { motion, text, decoder }
    }

    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.text.validate()?;
        if self.text.latent_dim != self.motion.latent_dim || self.decoder.latent_dim != self.motion.latent_dim {
            return Err(Error::Config("all components must share the latent dimension".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub motion: MotionEncoder,
    pub text: TextEncoder,
    pub decoder: MotionDecoder,
    pub temperature: Temperature,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vocab,
}

impl RetrievalModel {
    pub fn new(config: &ModelConfig, vocab: Vocab, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let (motion, text, decoder, temperature) = {
            let mut init = Init::new(&mut store, seed);
            let motion = MotionEncoder::new(&mut init, &config.motion)?;
            let text = TextEncoder::new(&mut init, &config.text, vocab.size())?;
            let decoder = MotionDecoder::new(&mut init, &config.decoder, &config.motion.partition)?;
            let temperature = Temperature::new(&mut init)?;
            (motion, text, decoder, temperature)
        };
        Ok(Self { config: config.clone(), vocab, store, motion, text, decoder, temperature })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Same weights in another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let out = Self::new(&self.config, self.vocab.clone(), dtype, 0)?;
        out.store.copy_from(&self.store)?;
        Ok(out)
    }

    pub fn motion_batch(&self, motions: &[&MotionSequence]) -> Result<MotionBatch> {
        let cap = self.config.motion.max_frames;
        let capped: Vec<MotionSequence>;
        let refs: Vec<&MotionSequence> = if motions.iter().any(|m| m.frames() > cap) {
            capped = motions.iter().map(|m| m.downsample(cap)).collect();
            capped.iter().collect()
        } else {
            motions.to_vec()
        };
        MotionBatch::new(&refs, &self.config.motion.partition, self.dtype(), None)
    }

    pub fn text_batch(&self, texts: &[&str]) -> Result<TextBatch> {
        let toks = texts
            .iter()
            .map(|t| tokenize(t, &self.vocab))
            .collect::<Result<Vec<_>>>()?;
        TextBatch::new(&toks, self.dtype(), None)
    }

    pub fn encode_motions(&self, motions: &[&MotionSequence], ctx: &Ctx) -> Result<LatentGaussian> {
        self.motion.forward(&self.motion_batch(motions)?, ctx)
    }

    pub fn encode_texts(&self, texts: &[&str], ctx: &Ctx) -> Result<LatentGaussian> {
        self.text.forward(&self.text_batch(texts)?, ctx)
    }

    /// Inference-mode motion means as f32 rows, computed in chunks.
    pub fn motion_features(&self, motions: &[&MotionSequence], chunk: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(motions.len());
        for part in motions.chunks(chunk.max(1)) {
            out.extend(rows(&self.encode_motions(part, &Ctx::eval())?.mu)?);
        }
        Ok(out)
    }

    pub fn text_features(&self, texts: &[&str], chunk: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for part in texts.chunks(chunk.max(1)) {
            out.extend(rows(&self.encode_texts(part, &Ctx::eval())?.mu)?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        })
        .map_err(|e| Error::Invalid(format!("cannot serialize checkpoint metadata: {e}")))?;
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.long_str(&meta)?;
        w.u32(self.store.len() as u32);
        for (name, var) in self.store.vars() {
            w.short_str(name)?;
            let dims = var.dims();
            w.u8(dims.len() as u8);
            for &d in dims {
                w.u32(d as u32);
            }
            let data = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            w.f32s(&data);
        }
        Ok(seal(w))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn from_bytes(buf: &[u8], path: &Path, dtype: DType) -> Result<Self> {
        let body = unseal(buf, path)?;
        let mut r = ByteReader::new(body, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let meta: CheckpointMeta = serde_json::from_str(&r.long_str()?)
            .map_err(|e| r.err(format!("bad checkpoint metadata: {e}")))?;
        let model = Self::new(&meta.config, meta.vocab, dtype, 0)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(r.err(format!("checkpoint has {count} tensors, model expects {}", model.store.len())));
        }
        for _ in 0..count {
            let name = r.short_str()?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = r.f32s(n)?;
            let var = model
                .store
                .get(&name)
                .ok_or_else(|| r.err(format!("unexpected tensor {name}")))?;
            if var.dims() != dims.as_slice() {
                return Err(r.err(format!("tensor {name} has shape {dims:?}, expected {:?}", var.dims())));
            }
            var.set(&Tensor::from_vec(data, dims, model.store.device())?.to_dtype(dtype)?)?;
        }
        r.finish()?;
        Ok(model)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path, dtype)
    }
}

/// SHA-256 of a checkpoint file, hex encoded.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}
