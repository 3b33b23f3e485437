//! RFWT: little-endian binary container for a model config and its tensors.
//!
//! ```text
//! "RFWT" | version u32 = 1
//! config: n_layers, d_model, n_q_heads, n_kv_heads, head_dim, d_ff,
//!         vocab_size as u64; rope_theta, rms_eps as f64; max_positions u64
//! tensor count u32
//! per tensor: name_len u16 | name utf-8 | dtype u8 (0 = f32, 1 = f16)
//!             | rank u8 | dims u64 × rank | zero padding to 8 bytes
//!             | payload row-major
//! ```
//!
//! Payloads start at file offsets that are multiples of eight.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

pub const MAGIC: &[u8; 4] = b"RFWT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F16 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

pub fn encode(cfg: &ModelConfig, weights: &ModelWeights, dtype: DType) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.n_layers,
        cfg.d_model,
        cfg.n_q_heads,
        cfg.n_kv_heads,
        cfg.head_dim,
        cfg.d_ff,
        cfg.vocab_size,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.rope_theta.to_le_bytes());
    buf.extend_from_slice(&cfg.rms_eps.to_le_bytes());
    buf.extend_from_slice(&(cfg.max_positions as u64).to_le_bytes());

    let named = weights.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype as u8);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        pad8(&mut buf);
        match dtype {
            DType::F32 => t.data.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            DType::F16 => t
                .data
                .iter()
                .for_each(|x| buf.extend_from_slice(&f16::from_f32(*x).to_le_bytes())),
        }
    }
    buf
}

fn pad8(buf: &mut Vec<u8>) {
    while !buf.len().is_multiple_of(8) {
        buf.push(0);
    }
}

pub fn save(path: &Path, cfg: &ModelConfig, weights: &ModelWeights, dtype: DType) -> Result<()> {
    std::fs::write(path, encode(cfg, weights, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            ))),
        }
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corrupt(format!("{what} overflows")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let (cfg, named) = decode_named(bytes)?;
    let weights = ModelWeights::from_named(&cfg, named)?;
    Ok((cfg, weights))
}

/// Parse the container without checking the tensor schema.
pub fn decode_named(bytes: &[u8]) -> Result<(ModelConfig, BTreeMap<String, Tensor>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected RFWT".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported RFWT version {version}")));
    }
    let cfg = ModelConfig {
        n_layers: r.usize("n_layers")?,
        d_model: r.usize("d_model")?,
        n_q_heads: r.usize("n_q_heads")?,
        n_kv_heads: r.usize("n_kv_heads")?,
        head_dim: r.usize("head_dim")?,
        d_ff: r.usize("d_ff")?,
        vocab_size: r.usize("vocab_size")?,
        rope_theta: r.f64("rope_theta")?,
        rms_eps: r.f64("rms_eps")?,
        max_positions: r.usize("max_positions")?,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("invalid config block: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut named = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F16,
            other => return Err(Error::Format(format!("unknown dtype {other} for {name}"))),
        };
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.usize("dim")).collect::<Result<Vec<_>>>()?;
        r.pos = r.pos.div_ceil(8) * 8;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("shape of {name} overflows")))?;
        let nbytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Corrupt(format!("payload of {name} overflows")))?;
        let payload = r.take(nbytes, &format!("payload of {name} {shape:?}"))?;
        let data: Vec<f32> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F16 => payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        };
        if named.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((cfg, named))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            d_ff: 12,
            vocab_size: 10,
            max_positions: 32,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init_random(&cfg, 3).unwrap();
        (cfg, w)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (cfg, w) = small();
        let bytes = encode(&cfg, &w, DType::F32);
        let (cfg2, w2) = decode(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(encode(&cfg2, &w2, DType::F32), bytes);
    }

    #[test]
    fn payloads_are_eight_byte_aligned() {
        let (cfg, w) = small();
        let bytes = encode(&cfg, &w, DType::F16);
        // first tensor header: 4+4+80+4 = 92, then u16 + name + u8 + u8 + 2 dims
        let header_end = 92 + 2 + "tok_embeddings".len() + 2 + 16;
        let payload_start = header_end.div_ceil(8) * 8;
        let first = f16::from_le_bytes([bytes[payload_start], bytes[payload_start + 1]]);
        assert_eq!(first, f16::from_f32(w.tok_embeddings.data[0]));
    }

    #[test]
    fn f16_payload_within_precision_bound() {
        let (cfg, w) = small();
        let (_, w2) = decode(&encode(&cfg, &w, DType::F16)).unwrap();
        for ((_, a), (_, b)) in w.named().iter().zip(w2.named()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-3, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let (cfg, w) = small();
        let mut bytes = encode(&cfg, &w, DType::F32);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_a_format_error() {
        let (cfg, w) = small();
        let mut bytes = encode(&cfg, &w, DType::F32);
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_corrupt() {
        // A [4, 4] tensor followed by only 15 floats.
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for v in [1u64, 4, 1, 1, 4, 4, 4] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&10000f64.to_le_bytes());
        buf.extend_from_slice(&1e-5f64.to_le_bytes());
        buf.extend_from_slice(&16u64.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.push(b'x');
        buf.push(0);
        buf.push(2);
        buf.extend_from_slice(&4u64.to_le_bytes());
        buf.extend_from_slice(&4u64.to_le_bytes());
        pad8(&mut buf);
        for _ in 0..15 {
            buf.extend_from_slice(&1f32.to_le_bytes());
        }
        assert!(matches!(decode_named(&buf), Err(Error::Corrupt(_))));
    }

    #[test]
    fn non_finite_values_fail_validation() {
        let (cfg, mut w) = small();
        w.norm.data[0] = f32::NAN;
        let bytes = encode(&cfg, &w, DType::F32);
        assert!(matches!(decode(&bytes), Err(Error::Validation(_))));
    }
}
