//! Cross-layer context embeddings.
//!
//! Each token's embedding is the concatenation of several head states, each
//! scaled to unit L2 norm. Because every segment has norm one, the cosine
//! between two combined vectors equals the mean of the per-segment cosines.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::TappedStates;
use crate::tensor::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    /// Post-layer residual stream (evaluation only).
    Hidden,
    /// Pre-rotary query·key score (evaluation only).
    Attention,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Hidden => "hidden",
            Projection::Attention => "attention",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Projection::Query,
            1 => Projection::Key,
            2 => Projection::Value,
            3 => Projection::Hidden,
            4 => Projection::Attention,
            _ => return Err(Error::Format(format!("unknown projection code {c}"))),
        })
    }
}

impl FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" | "query" => Ok(Projection::Query),
            "k" | "key" => Ok(Projection::Key),
            "v" | "value" => Ok(Projection::Value),
            "hidden" => Ok(Projection::Hidden),
            "attention" | "attn" => Ok(Projection::Attention),
            other => Err(Error::Config(format!("unknown projection {other:?}"))),
        }
    }
}

/// A `(layer, projection, head)` tap. Written `layer:projection:head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadSpec {
    pub layer: usize,
    pub projection: Projection,
    pub head: usize,
}

impl HeadSpec {
    pub fn new(layer: usize, projection: Projection, head: usize) -> Self {
        Self {
            layer,
            projection,
            head,
        }
    }

    pub fn value(layer: usize, head: usize) -> Self {
        Self::new(layer, Projection::Value, head)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(Error::Config(format!(
                "head spec {self}: layer beyond {} layers",
                cfg.n_layers
            )));
        }
        let limit = match self.projection {
            Projection::Query => cfg.n_q_heads,
            Projection::Key | Projection::Value => cfg.n_kv_heads,
            // whole-layer candidates
            Projection::Hidden | Projection::Attention => 1,
        };
        if self.head >= limit {
            return Err(Error::Config(format!("head spec {self}: head out of range")));
        }
        Ok(())
    }

    /// Width of this tap's per-token state.
    pub fn dim(&self, cfg: &ModelConfig) -> usize {
        match self.projection {
            Projection::Hidden => cfg.d_model,
            _ => cfg.head_dim,
        }
    }
}

impl fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.layer, self.projection.name(), self.head)
    }
}

impl FromStr for HeadSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Config(format!("head spec {s:?} is not layer:projection:head"));
        match parts.as_slice() {
            [layer, proj, head] => Ok(HeadSpec {
                layer: layer.parse().map_err(|_| bad())?,
                projection: proj.parse()?,
                head: head.parse().map_err(|_| bad())?,
            }),
            [layer, proj @ ("hidden" | "attention")] => {
                Ok(HeadSpec::new(layer.parse().map_err(|_| bad())?, proj.parse()?, 0))
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for HeadSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-token raw state segments, one slice per spec, for a whole chunk:
/// `segments[spec_index]` is `[rows, dim]`.
pub fn extract<'a>(tapped: &'a TappedStates, specs: &[HeadSpec]) -> Result<Vec<&'a [f32]>> {
    specs
        .iter()
        .map(|spec| {
            tapped
                .get(spec)
                .map(|t| t.data.as_slice())
                .ok_or_else(|| Error::Config(format!("tap {spec} was not captured")))
        })
        .collect()
}

/// Normalise each segment to unit length (zero segments stay zero) and concatenate.
pub fn combine(segments: &[&[f32]]) -> Vec<f32> {
    let mut out = Vec::with_capacity(segments.iter().map(|s| s.len()).sum());
    for seg in segments {
        let norm = l2_norm(seg);
        if norm > 0.0 {
            out.extend(seg.iter().map(|x| x / norm));
        } else {
            out.extend_from_slice(seg);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F16,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f16" => Ok(Precision::F16),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

/// Append-only table of combined embeddings, one row per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    specs: Vec<HeadSpec>,
    seg_dims: Vec<usize>,
    dim: usize,
    token_count: usize,
    storage: Storage,
}

impl EmbeddingStore {
    pub fn new(specs: Vec<HeadSpec>, seg_dims: Vec<usize>, precision: Precision) -> Self {
        let dim = seg_dims.iter().sum();
        let storage = match precision {
            Precision::F32 => Storage::F32(Vec::new()),
            Precision::F16 => Storage::F16(Vec::new()),
        };
        Self {
            specs,
            seg_dims,
            dim,
            token_count: 0,
            storage,
        }
    }

    pub fn for_model(cfg: &ModelConfig, specs: &[HeadSpec], precision: Precision) -> Self {
        let dims = specs.iter().map(|s| s.dim(cfg)).collect();
        Self::new(specs.to_vec(), dims, precision)
    }

    pub fn specs(&self) -> &[HeadSpec] {
        &self.specs
    }

    pub fn segment_dims(&self) -> &[usize] {
        &self.seg_dims
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn precision(&self) -> Precision {
        match self.storage {
            Storage::F32(_) => Precision::F32,
            Storage::F16(_) => Precision::F16,
        }
    }

    /// Bytes held by the vector payload.
    pub fn size_bytes(&self) -> usize {
        self.token_count * self.dim * self.precision().bytes()
    }

    /// Append `[rows, dim]` combined vectors.
    pub fn append_tokens(&mut self, combined: &[f32]) -> Result<()> {
        if self.dim == 0 || !combined.len().is_multiple_of(self.dim) {
            return Err(Error::Schema(format!(
                "{} values do not form rows of dimension {}",
                combined.len(),
                self.dim
            )));
        }
        match &mut self.storage {
            Storage::F32(v) => v.extend_from_slice(combined),
            Storage::F16(v) => v.extend(combined.iter().map(|&x| f16::from_f32(x))),
        }
        self.token_count += combined.len() / self.dim;
        Ok(())
    }

    /// Combine a chunk's tapped states and append one row per token.
    pub fn append_chunk(&mut self, tapped: &TappedStates, rows: usize) -> Result<()> {
        let segments = extract(tapped, &self.specs)?;
        let mut combined = Vec::with_capacity(rows * self.dim);
        for i in 0..rows {
            let parts: Vec<&[f32]> = segments
                .iter()
                .zip(&self.seg_dims)
                .map(|(s, &d)| &s[i * d..(i + 1) * d])
                .collect();
            combined.extend(combine(&parts));
        }
        self.append_tokens(&combined)
    }

    /// Row `i` widened to f32.
    pub fn row(&self, i: usize) -> Vec<f32> {
        let r = i * self.dim..(i + 1) * self.dim;
        match &self.storage {
            Storage::F32(v) => v[r].to_vec(),
            Storage::F16(v) => v[r].iter().map(|x| x.to_f32()).collect(),
        }
    }

    /// Rows `range` as a dense f32 matrix.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Vec<f32> {
        let r = range.start * self.dim..range.end * self.dim;
        match &self.storage {
            Storage::F32(v) => v[r].to_vec(),
            Storage::F16(v) => v[r].iter().map(|x| x.to_f32()).collect(),
        }
    }

    const MAGIC: &'static [u8; 4] = b"RFEM";

    /// Spill layout (little-endian): `"RFEM"`, version u32, precision u8,
    /// spec count u32, per spec `layer u32, projection u8, head u32, dim u32`,
    /// token count u64, then the packed vectors.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[self.precision() as u8])?;
        w.write_all(&(self.specs.len() as u32).to_le_bytes())?;
        for (s, &d) in self.specs.iter().zip(&self.seg_dims) {
            w.write_all(&(s.layer as u32).to_le_bytes())?;
            w.write_all(&[s.projection.code()])?;
            w.write_all(&(s.head as u32).to_le_bytes())?;
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.token_count as u64).to_le_bytes())?;
        match &self.storage {
            Storage::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            Storage::F16(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
        }
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("reading embedding store: {e}")))?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Corrupt("embedding store truncated".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != Self::MAGIC {
            return Err(Error::Format("bad embedding store magic".into()));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        if u32_of(take(4)?) != 1 {
            return Err(Error::Format("unsupported embedding store version".into()));
        }
        let precision = match take(1)?[0] {
            0 => Precision::F32,
            1 => Precision::F16,
            p => return Err(Error::Format(format!("unknown precision code {p}"))),
        };
        let n_specs = u32_of(take(4)?) as usize;
        let mut specs = Vec::with_capacity(n_specs);
        let mut dims = Vec::with_capacity(n_specs);
        for _ in 0..n_specs {
            let layer = u32_of(take(4)?) as usize;
            let projection = Projection::from_code(take(1)?[0])?;
            let head = u32_of(take(4)?) as usize;
            dims.push(u32_of(take(4)?) as usize);
            specs.push(HeadSpec::new(layer, projection, head));
        }
        let token_count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut store = EmbeddingStore::new(specs, dims, precision);
        let n = token_count * store.dim;
        let payload = take(n * precision.bytes())?;
        store.storage = match precision {
            Precision::F32 => Storage::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Precision::F16 => Storage::F16(
                payload
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        store.token_count = token_count;
        if pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after embedding store".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f)
    }
}

/// Cosine similarity; zero vectors have similarity zero with everything.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    crate::tensor::dot(a, b) / (na * nb)
}
