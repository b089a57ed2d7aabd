//! Text-motion pair collections, the line-delimited manifest format and
//! joint-dataset unification.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::format::{peek_motion_header, read_motion, write_motion};
use super::motion::{MotionLayout, MotionSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    A,
    B,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Source {
    pub fn tag(&self) -> &'static str {
        match self {
            Source::A => "A",
            Source::B => "B",
            Source::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Where a pair's motion lives: on disk (loaded on demand) or in memory.
#[derive(Clone, Debug)]
pub enum MotionRef {
    File(PathBuf),
    Memory(Arc<MotionSequence>),
}

impl MotionRef {
    pub fn load(&self) -> Result<Arc<MotionSequence>> {
        match self {
            MotionRef::File(path) => Ok(Arc::new(read_motion(path)?)),
            MotionRef::Memory(m) => Ok(Arc::clone(m)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextMotionPair {
    pub id: String,
    pub texts: Vec<String>,
    pub motion: MotionRef,
    pub source: Source,
    pub split: Split,
    /// Motion class used as ground truth for motion-to-motion retrieval.
    pub label: Option<String>,
}

/// An ordered collection of pairs sharing one motion layout. A joint dataset
/// is simply a `Dataset` whose provenance lists several constituents.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: MotionLayout,
    pub pairs: Vec<TextMotionPair>,
    pub provenance: Vec<String>,
}

pub type JointDataset = Dataset;

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    name: String,
    layout: MotionLayout,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    texts: Vec<String>,
    motion_file: String,
    source: Source,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

const MANIFEST_FORMAT: &str = "motext-manifest";

impl Dataset {
    pub fn new(name: impl Into<String>, layout: MotionLayout) -> Self {
        Self {
            layout,
            pairs: Vec::new(),
            provenance: vec![name.into()],
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn name(&self) -> String {
        self.provenance.join("+")
    }

    pub fn split(&self, split: Split) -> Vec<&TextMotionPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    /// Same dataset restricted to one split.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            layout: self.layout,
            pairs: self.pairs.iter().filter(|p| p.split == split).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Loads every motion into memory so later passes do no file IO.
    pub fn materialize(&mut self) -> Result<()> {
        for pair in &mut self.pairs {
            if let MotionRef::File(_) = pair.motion {
                let m = pair.motion.load()?;
                if m.layout() != self.layout {
                    return Err(Error::Layout(format!(
                        "motion for {} has layout {:?}, dataset declares {:?}",
                        pair.id,
                        m.layout(),
                        self.layout
                    )));
                }
                pair.motion = MotionRef::Memory(m);
            }
        }
        Ok(())
    }

    /// Checks the pair invariants: non-empty texts and unique ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if p.texts.is_empty() {
                return Err(Error::Invalid(format!("pair {} has empty texts", p.id)));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate pair id {}", p.id)));
            }
        }
        Ok(())
    }

    /// Reads a manifest: a header line followed by one JSON record per pair.
    /// Motion paths are resolved relative to the manifest directory; files
    /// must exist and their headers must match the declared layout, but the
    /// payloads are only read on demand.
    pub fn load_manifest(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let bad = |line: usize, msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| bad(1, "missing manifest header".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(header).map_err(|e| bad(hline + 1, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != 1 {
            return Err(bad(
                hline + 1,
                format!("unsupported manifest {} v{}", header.format, header.version),
            ));
        }

        let mut ds = Dataset::new(header.name, header.layout);
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let rec: ManifestRecord =
                serde_json::from_str(line).map_err(|e| bad(lineno, format!("malformed record: {e}")))?;
            if rec.texts.is_empty() {
                return Err(bad(lineno, "empty texts".into()));
            }
            if rec.texts.iter().any(|t| t.trim().is_empty()) {
                return Err(bad(lineno, "blank text entry".into()));
            }
            if !seen.insert(rec.id.clone()) {
                return Err(bad(lineno, format!("duplicate id {}", rec.id)));
            }
            let motion_path = base.join(&rec.motion_file);
            if !motion_path.is_file() {
                return Err(bad(lineno, format!("motion file {} not found", motion_path.display())));
            }
            let (layout, _) = peek_motion_header(&motion_path).map_err(|e| bad(lineno, e.to_string()))?;
            if layout != ds.layout {
                return Err(bad(
                    lineno,
                    format!("dimension mismatch: file has {layout:?}, header declares {:?}", ds.layout),
                ));
            }
            ds.pairs.push(TextMotionPair {
                id: rec.id,
                texts: rec.texts,
                motion: MotionRef::File(motion_path),
                source: rec.source,
                split: rec.split,
                label: rec.label,
            });
        }
        Ok(ds)
    }

    /// Serializes the manifest text. Motion paths are taken from `motion_files`,
    /// one per pair, already relative to the manifest location.
    pub fn manifest_text(&self, motion_files: &[String]) -> Result<String> {
        assert_eq!(motion_files.len(), self.pairs.len());
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            name: self.name(),
            layout: self.layout,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (p, file) in self.pairs.iter().zip(motion_files) {
            let rec = ManifestRecord {
                id: p.id.clone(),
                texts: p.texts.clone(),
                motion_file: file.clone(),
                source: p.source,
                split: p.split,
                label: p.label.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `dir/manifest.jsonl` plus one motion file per pair under
    /// `dir/motions/`. Returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("motions")).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.pairs.len());
        for (i, p) in self.pairs.iter().enumerate() {
            let rel = format!("motions/{i:06}.motf");
            write_motion(&dir.join(&rel), &*p.motion.load()?)?;
            files.push(rel);
        }
        let manifest = dir.join("manifest.jsonl");
        std::fs::write(&manifest, self.manifest_text(&files)?).map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }
}

fn prefixed(id: &str, source: Source) -> String {
    let prefix = format!("{}/", source.tag());
    if id.starts_with(&prefix) {
        id.to_string()
    } else {
        format!("{prefix}{id}")
    }
}

/// Concatenates two datasets for joint training. Every id is prefixed with
/// its pair's source tag (already-prefixed ids are kept, which makes the
/// operation associative); all pairs and their order are preserved.
pub fn unify(a: &Dataset, b: &Dataset) -> Result<JointDataset> {
    if a.layout != b.layout {
        return Err(Error::Layout(format!(
            "cannot unify datasets with layouts {:?} and {:?}",
            a.layout, b.layout
        )));
    }
    let mut pairs = Vec::with_capacity(a.len() + b.len());
    let mut seen = HashSet::new();
    for p in a.pairs.iter().chain(b.pairs.iter()) {
        let mut p = p.clone();
        p.id = prefixed(&p.id, p.source);
        if !seen.insert(p.id.clone()) {
            return Err(Error::Invalid(format!("id collision after prefixing: {}", p.id)));
        }
        pairs.push(p);
    }
    let mut provenance = a.provenance.clone();
    provenance.extend(b.provenance.iter().cloned());
    Ok(Dataset {
        layout: a.layout,
        pairs,
        provenance,
    })
}
