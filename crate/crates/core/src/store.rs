//! Persisted motion embeddings with an exact cosine index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{read_file, seal, unseal, write_file, ByteReader, ByteWriter};
use crate::data::{Dataset, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::eval::rank_scores;
use crate::model::RetrievalModel;

pub const DB_MAGIC: &[u8; 4] = b"EMBD";
pub const DB_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbMetadata {
    /// Hex SHA-256 of the checkpoint file.
    pub checkpoint_sha256: String,
    pub checkpoint_path: String,
    pub dataset: String,
    pub split: String,
    /// Caller-supplied timestamp, so rebuilding is byte-for-byte reproducible.
    pub created: String,
}

/// Unit-normalized embeddings keyed by id, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDB {
    pub metadata: DbMetadata,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingDB {
    pub fn new(metadata: DbMetadata, dim: usize) -> Self {
        Self { metadata, dim, ids: Vec::new(), vectors: Vec::new() }
    }

    /// Normalizes `v` before storing it.
    pub fn insert(&mut self, id: &str, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Invalid(format!("vector for {id} has dimension {}, expected {}", v.len(), self.dim)));
        }
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(format!("embedding for {id} has zero or non-finite norm")));
        }
        self.ids.push(id.to_string());
        self.vectors.push(v.iter().map(|&x| (x as f64 / norm) as f32).collect());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.metadata).expect("metadata serializes");
        let mut w = ByteWriter::new();
        w.bytes(DB_MAGIC);
        w.u16(DB_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.dim as u32);
        w.long_str(&meta)?;
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            w.short_str(id)?;
            w.f32s(v);
        }
        Ok(seal(w))
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let body = unseal(buf, path)?;
        let mut r = ByteReader::new(body, path);
        r.magic(DB_MAGIC)?;
        let version = r.u16()?;
        if version != DB_VERSION {
            return Err(r.err(format!("unsupported database version {version}")));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let metadata: DbMetadata =
            serde_json::from_str(&r.long_str()?).map_err(|e| r.err(format!("bad metadata: {e}")))?;
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(r.short_str()?);
            vectors.push(r.f32s(dim)?);
        }
        r.finish()?;
        Ok(Self { metadata, dim, ids, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Exact top-`k` by cosine, ties broken by insertion order. `k` larger
    /// than the database is truncated with a warning.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Invalid(format!("query has dimension {}, database {}", query.len(), self.dim)));
        }
        let norm = query.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric("query embedding has zero or non-finite norm".into()));
        }
        let k = if k > self.len() {
            log::warn!("k = {k} exceeds the {} stored entries; returning all", self.len());
            self.len()
        } else {
            k
        };
        let scores: Vec<f64> = self
            .vectors
            .iter()
            .map(|v| v.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / norm)
            .collect();
        let ranked = rank_scores(0, &scores);
        Ok(ranked
            .candidates
            .iter()
            .zip(&ranked.scores)
            .take(k)
            .map(|(&i, &s)| (self.ids[i].clone(), s))
            .collect())
    }
}

/// Embeds every motion of `split` with the checkpoint's motion encoder.
pub fn build_db(model: &RetrievalModel, ds: &Dataset, split: Split, metadata: DbMetadata) -> Result<EmbeddingDB> {
    let pairs = ds.split(split);
    let motions = pairs.iter().map(|p| p.motion.load()).collect::<Result<Vec<_>>>()?;
    if let Some(m) = motions.first() {
        let expect = crate::data::MotionLayout::STANDARD;
        if m.layout() != expect {
            return Err(Error::Layout(format!("dataset layout {:?} does not match the model's {:?}", m.layout(), expect)));
        }
    }
    let refs: Vec<&MotionSequence> = motions.iter().map(|m| m.as_ref()).collect();
    let feats = model.motion_features(&refs, 32)?;
    let mut db = EmbeddingDB::new(metadata, model.config.motion.latent_dim);
    for (p, f) in pairs.iter().zip(&feats) {
        db.insert(&p.id, f)?;
    }
    Ok(db)
}

/// Encodes `text` and returns the `k` nearest motions.
pub fn query(db: &EmbeddingDB, text: &str, model: &RetrievalModel, k: usize) -> Result<Vec<(String, f64)>> {
    if text.trim().is_empty() {
        return Err(Error::Invalid("query text is empty".into()));
    }
    if model.config.motion.latent_dim != db.dim() {
        return Err(Error::Invalid(format!(
            "model latent dimension {} does not match database dimension {}",
            model.config.motion.latent_dim,
            db.dim()
        )));
    }
    let q = model.text_features(&[text], 1)?.remove(0);
    db.search(&q, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DbMetadata {
        DbMetadata {
            checkpoint_sha256: "00".into(),
            checkpoint_path: "ckpt".into(),
            dataset: "d".into(),
            split: "test".into(),
            created: "2024-01-01T00:00:00Z".into(),
        }
    }

    fn db() -> EmbeddingDB {
        let mut db = EmbeddingDB::new(meta(), 3);
        db.insert("a", &[1.0, 0.0, 0.0]).unwrap();
        db.insert("b", &[0.0, 2.0, 0.0]).unwrap();
        db.insert("c", &[1.0, 1.0, 0.0]).unwrap();
        db
    }

    #[test]
    fn vectors_are_unit_norm() {
        for v in db().vectors() {
            let n: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let d = db();
        let bytes = d.to_bytes().unwrap();
        let back = EmbeddingDB::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = db().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 8] ^= 1;
        assert!(matches!(EmbeddingDB::from_bytes(&bytes, Path::new("x")), Err(Error::Checksum { .. })));
    }

    #[test]
    fn search_orders_and_truncates() {
        let d = db();
        let top = d.search(&[1.0, 0.1, 0.0], 2).unwrap();
        assert_eq!(top[0].0, "a");
        assert_eq!(top[1].0, "c");
        assert_eq!(d.search(&[1.0, 0.1, 0.0], 10).unwrap().len(), 3);
        assert!(d.search(&[1.0, 0.1, 0.0], 0).is_err());
    }
}
