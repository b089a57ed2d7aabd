//! Word-level text encoder and the frozen teacher used for reference text
//! similarities.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bytes::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::motion_encoder::LatentGaussian;
use crate::nn::{sinusoidal, Ctx, Init, LayerNorm, Linear, ParamStore, TransformerLayer};

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;

/// Lowercases, replaces anything that is not alphanumeric with a space and
/// splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    /// Index `i` holds the word with id `i + 2`.
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Sorted word list over the corpus, so the ids do not depend on corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for text in corpus {
            set.extend(normalize(text));
        }
        Self::from_words(set.into_iter().collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + 2))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Number of ids including PAD and OOV.
    pub fn size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub token_ids: Vec<u32>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenizedText> {
    let token_ids: Vec<u32> = normalize(text).iter().map(|w| vocab.id(w)).collect();
    if token_ids.is_empty() {
        return Err(Error::Invalid(format!("empty text after normalization: {text:?}")));
    }
    Ok(TokenizedText { token_ids })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub model_width: usize,
    pub latent_dim: usize,
    pub dropout: f32,
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("text encoder depth must be positive".into()));
        }
        if self.heads == 0 || !self.model_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide text model width {}",
                self.heads, self.model_width
            )));
        }
        Ok(())
    }
}

/// Padded token ids with a validity mask.
#[derive(Clone, Debug)]
pub struct TextBatch {
    /// `[B, L]` u32.
    pub ids: Tensor,
    /// `[B, L]`, 1 on real tokens.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn new(texts: &[TokenizedText], dtype: DType, pad_to: Option<usize>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Invalid("empty text batch".into()));
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::Invalid("text with no tokens".into()));
        }
        let b = texts.len();
        let lengths: Vec<usize> = texts.iter().map(TokenizedText::len).collect();
        let l = lengths.iter().copied().max().unwrap().max(pad_to.unwrap_or(0));
        let mut ids = vec![PAD_ID; b * l];
        let mut mask = vec![0.0f32; b * l];
        for (i, t) in texts.iter().enumerate() {
            ids[i * l..i * l + t.len()].copy_from_slice(&t.token_ids);
            mask[i * l..i * l + t.len()].fill(1.0);
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (b, l), &Device::Cpu)?,
            mask: Tensor::from_vec(mask, (b, l), &Device::Cpu)?.to_dtype(dtype)?,
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextConfig,
    vocab_size: usize,
    embedding: Tensor,
    cls: Tensor,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    head_mu: Linear,
    head_log_var: Linear,
}

impl TextEncoder {
    pub fn new(init: &mut Init, cfg: &TextConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_width;
        init.scoped("text", |init| {
            // Unit-variance tokens, on the same scale as the position table.
            let bound = 3f32.sqrt();
            let embedding = init.uniform("embedding", &[vocab_size, d], bound)?;
            let cls = init.uniform("cls", &[2, d], 1.0 / (d as f32).sqrt())?;
            let layers = (0..cfg.depth)
                .map(|i| TransformerLayer::new(init, &format!("layer{i}"), d, cfg.heads, cfg.ffn_width))
                .collect::<Result<_>>()?;
            Ok(Self {
                cfg: cfg.clone(),
                vocab_size,
                embedding,
                cls,
                layers,
                final_norm: LayerNorm::new(init, "final_norm", d)?,
                head_mu: Linear::new(init, "head_mu", d, cfg.latent_dim)?,
                head_log_var: Linear::new(init, "head_log_var", d, cfg.latent_dim)?,
            })
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn forward(&self, batch: &TextBatch, ctx: &Ctx) -> Result<LatentGaussian> {
        let (b, l) = batch.ids.dims2()?;
        let d = self.cfg.model_width;
        let words = self
            .embedding
            .index_select(&batch.ids.flatten_all()?, 0)?
            .reshape((b, l, d))?;
        let pos = sinusoidal(l, d, words.dtype(), words.device())?.unsqueeze(0)?;
        let words = words.broadcast_add(&pos)?;
        let cls = self.cls.unsqueeze(0)?.broadcast_as((b, 2, d))?;
        let mut x = Tensor::cat(&[&cls, &words], 1)?;
        let ones = Tensor::ones((b, 2), batch.mask.dtype(), batch.mask.device())?;
        let mask = Tensor::cat(&[&ones, &batch.mask], 1)?;
        for layer in &self.layers {
            x = layer.forward(&x, Some(&mask), ctx)?;
        }
        let cls = self.final_norm.forward(&x.narrow(1, 0, 2)?)?;
        Ok(LatentGaussian {
            mu: self.head_mu.forward(&cls.narrow(1, 0, 1)?.squeeze(1)?)?,
            log_var: self.head_log_var.forward(&cls.narrow(1, 1, 1)?.squeeze(1)?)?,
        })
    }

    pub fn encode(&self, texts: &[&str], vocab: &Vocab, dtype: DType, ctx: &Ctx) -> Result<LatentGaussian> {
        let toks = texts
            .iter()
            .map(|t| tokenize(t, vocab))
            .collect::<Result<Vec<_>>>()?;
        self.forward(&TextBatch::new(&toks, dtype, None)?, ctx)
    }
}

/// Builds a standalone text encoder with its own parameter store.
pub fn build_text_encoder(
    cfg: &TextConfig,
    vocab_size: usize,
    dtype: DType,
    seed: u64,
) -> Result<(ParamStore, TextEncoder)> {
    let mut store = ParamStore::new(dtype);
    let enc = {
        let mut init = Init::new(&mut store, seed);
        TextEncoder::new(&mut init, cfg, vocab_size)?
    };
    Ok((store, enc))
}

/// TF-IDF cosine similarity with smooth idf `ln((1+N)/(1+df)) + 1`, fitted on
/// a reference corpus.
#[derive(Clone, Debug)]
pub struct TfidfTeacher {
    docs: usize,
    df: HashMap<String, usize>,
}

impl TfidfTeacher {
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df = HashMap::new();
        let mut docs = 0;
        for text in corpus {
            docs += 1;
            let mut words = normalize(text);
            words.sort();
            words.dedup();
            for w in words {
                *df.entry(w).or_insert(0) += 1;
            }
        }
        Self { docs, df }
    }

    pub fn idf(&self, word: &str) -> f64 {
        let df = self.df.get(word).copied().unwrap_or(0);
        ((1 + self.docs) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// L2-normalized sparse TF-IDF vector.
    pub fn vector(&self, text: &str) -> Result<BTreeMap<String, f64>> {
        let mut v: BTreeMap<String, f64> = BTreeMap::new();
        for w in normalize(text) {
            *v.entry(w).or_insert(0.0) += 1.0;
        }
        if v.is_empty() {
            return Err(Error::Invalid(format!("empty text after normalization: {text:?}")));
        }
        for (w, x) in v.iter_mut() {
            *x *= self.idf(w);
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        v.values_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Precomputed caption embeddings keyed by caption text.
#[derive(Clone, Debug)]
pub struct EmbeddingTeacher {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

pub const TEACHER_MAGIC: &[u8; 4] = b"TEMB";

impl EmbeddingTeacher {
    pub fn new(dim: usize, vectors: HashMap<String, Vec<f32>>) -> Result<Self> {
        if vectors.values().any(|v| v.len() != dim) {
            return Err(Error::Invalid(format!("teacher vectors must all have dimension {dim}")));
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::TeacherUnavailable(format!(
                "teacher embedding file {} not found",
                path.display()
            )));
        }
        let buf = read_file(path)?;
        let mut r = ByteReader::new(&buf, path);
        r.magic(TEACHER_MAGIC)?;
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut vectors = HashMap::with_capacity(count);
        for _ in 0..count {
            let id = r.short_str()?;
            let v = r.f32s(dim)?;
            if vectors.insert(id.clone(), v).is_some() {
                return Err(r.err(format!("duplicate teacher record {id:?}")));
            }
        }
        r.finish()?;
        Self::new(dim, vectors)
    }

    /// Records are written sorted by key for a stable byte layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(TEACHER_MAGIC);
        w.u32(self.vectors.len() as u32);
        w.u32(self.dim as u32);
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            w.short_str(k)?;
            w.f32s(&self.vectors[k]);
        }
        write_file(path, w.as_slice())
    }

    fn vector(&self, text: &str) -> Result<&[f32]> {
        self.vectors
            .get(text)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::TeacherUnavailable(format!("no teacher embedding for {text:?}")))
    }
}

/// Frozen text-similarity model.
#[derive(Clone, Debug)]
pub enum Teacher {
    Tfidf(TfidfTeacher),
    Embeddings(EmbeddingTeacher),
}

impl Teacher {
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.matrix(&[a, b])?[1])
    }

    /// Row-major `B x B` cosine similarities.
    pub fn matrix(&self, texts: &[&str]) -> Result<Vec<f64>> {
        let n = texts.len();
        let mut out = vec![0.0; n * n];
        match self {
            Teacher::Tfidf(t) => {
                let vecs = texts.iter().map(|s| t.vector(s)).collect::<Result<Vec<_>>>()?;
                for i in 0..n {
                    for j in i..n {
                        let (small, large) = if vecs[i].len() <= vecs[j].len() {
                            (&vecs[i], &vecs[j])
                        } else {
                            (&vecs[j], &vecs[i])
                        };
                        let dot: f64 = small
                            .iter()
                            .filter_map(|(w, x)| large.get(w).map(|y| x * y))
                            .sum();
                        let s = if i == j { 1.0 } else { dot.min(1.0) };
                        out[i * n + j] = s;
                        out[j * n + i] = s;
                    }
                }
            }
            Teacher::Embeddings(t) => {
                let vecs = texts.iter().map(|s| t.vector(s)).collect::<Result<Vec<_>>>()?;
                let norms: Vec<f64> = vecs
                    .iter()
                    .map(|v| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
                    .collect();
                if let Some(i) = norms.iter().position(|&n| n == 0.0) {
                    return Err(Error::Invalid(format!("zero teacher embedding for {:?}", texts[i])));
                }
                for i in 0..n {
                    for j in 0..n {
                        let dot: f64 = vecs[i].iter().zip(vecs[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
                        out[i * n + j] = dot / (norms[i] * norms[j]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Raw teacher similarities as a `[B, B]` tensor.
pub fn teacher_matrix(texts: &[&str], teacher: &Teacher, dtype: DType) -> Result<Tensor> {
    if texts.len() < 2 {
        return Err(Error::Invalid("teacher matrix needs at least two texts".into()));
    }
    let n = texts.len();
    Ok(Tensor::from_vec(teacher.matrix(texts)?, (n, n), &Device::Cpu)?.to_dtype(dtype)?)
}
