//! In-memory tensors and the `.lqta` full-precision archive format.
//!
//! `.lqta` layout (little-endian):
//!
//! ```text
//! bytes 0..4   magic "LQTA"
//! byte  4      version (1)
//! bytes 5..9   header length H (u32)
//! bytes 9..9+H UTF-8 JSON: [{"name", "shape", "offset"}, ...] sorted by name,
//!              offsets relative to the payload start
//! rest         concatenated raw IEEE-754 f32 little-endian values
//! ```
//!
//! Payload extents must tile the payload exactly (no gaps, overlaps, or
//! trailing bytes), which makes truncation and padding detectable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LQTA_MAGIC: &[u8; 4] = b"LQTA";
const LQTA_VERSION: u8 = 1;
const LQTA_PAYLOAD_START: usize = 9;

/// A named, shaped, row-major array of finite f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating every invariant (non-empty name, positive
    /// dims, shape/data agreement, finite values).
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::validation("tensor name must be non-empty"));
        }
        if shape.is_empty() {
            return Err(Error::validation(format!("tensor '{name}': shape must be non-empty")));
        }
        if shape.contains(&0) {
            return Err(Error::validation(format!(
                "tensor '{name}': every dimension must be >= 1, got {shape:?}"
            )));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::validation(format!("tensor '{name}': shape overflows")))?;
        if count != data.len() {
            return Err(Error::validation(format!(
                "tensor '{name}': shape {shape:?} implies {count} elements, data has {}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "tensor '{name}': non-finite value at index {idx}"
            )));
        }
        Ok(Tensor { name, shape, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Population statistics over one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TensorStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

/// Two-pass population statistics (mean first, then centered moments).
pub fn tensor_stats(t: &Tensor) -> TensorStats {
    let n = t.len();
    debug_assert!(n > 0);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    for &v in t.data() {
        let v = v as f64;
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0f64;
    for &v in t.data() {
        let d = v as f64 - mean;
        ss += d * d;
    }
    TensorStats { min, max, mean, stddev: (ss / n as f64).sqrt(), count: n }
}

/// An ordered collection of uniquely named tensors.
///
/// Iteration order is always lexicographic by name, independent of
/// insertion or on-disk order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor, rejecting duplicate names.
    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(tensor.name()) {
            return Err(Error::validation(format!("duplicate tensor name '{}'", tensor.name())));
        }
        self.tensors.insert(tensor.name().to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    /// Read an archive from a `.lqta` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Write the archive to a `.lqta` file. Output is deterministic.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Serialize to the `.lqta` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in self.tensors.values() {
            entries.push(ArchiveEntry {
                name: t.name().to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = serde_json::to_vec(&entries)
            .map_err(|e| Error::format(format!("header encode: {e}")))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::validation("archive header exceeds u32 length"))?;

        let mut out = Vec::with_capacity(LQTA_PAYLOAD_START + header.len() + offset as usize);
        out.extend_from_slice(LQTA_MAGIC);
        out.push(LQTA_VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse the `.lqta` byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < LQTA_PAYLOAD_START {
            return Err(Error::format("file shorter than fixed header"));
        }
        if &bytes[0..4] != LQTA_MAGIC {
            return Err(Error::format("bad magic, expected LQTA"));
        }
        if bytes[4] != LQTA_VERSION {
            return Err(Error::format(format!("unsupported version {}", bytes[4])));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header_end = LQTA_PAYLOAD_START
            .checked_add(header_len)
            .ok_or_else(|| Error::format("header length overflows"))?;
        if bytes.len() < header_end {
            return Err(Error::format("header extends past end of file"));
        }
        let entries: Vec<ArchiveEntry> = serde_json::from_slice(&bytes[LQTA_PAYLOAD_START..header_end])
            .map_err(|e| Error::format(format!("header decode: {e}")))?;
        let payload = &bytes[header_end..];

        let mut archive = TensorArchive::new();
        let mut extents: Vec<(u64, u64)> = Vec::with_capacity(entries.len());
        for entry in &entries {
            let count = entry
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::format(format!("tensor '{}': shape overflows", entry.name)))?;
            let nbytes = count
                .checked_mul(4)
                .ok_or_else(|| Error::format(format!("tensor '{}': size overflows", entry.name)))?;
            let end = entry
                .offset
                .checked_add(nbytes)
                .ok_or_else(|| Error::format(format!("tensor '{}': extent overflows", entry.name)))?;
            if end > payload.len() as u64 {
                return Err(Error::format(format!(
                    "tensor '{}': payload extent {}..{} exceeds payload size {}",
                    entry.name,
                    entry.offset,
                    end,
                    payload.len()
                )));
            }
            extents.push((entry.offset, end));

            let start = entry.offset as usize;
            let mut data = Vec::with_capacity(count as usize);
            for chunk in payload[start..end as usize].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let tensor = Tensor::new(entry.name.clone(), entry.shape.clone(), data).map_err(
                |e| match e {
                    Error::Data(msg) => Error::data(msg),
                    other => Error::format(other.to_string()),
                },
            )?;
            archive.insert(tensor).map_err(|e| Error::format(e.to_string()))?;
        }

        // Extents must tile the payload exactly.
        extents.sort_unstable();
        let mut cursor = 0u64;
        for (start, end) in extents {
            if start != cursor {
                return Err(Error::format(format!(
                    "payload gap or overlap at byte {cursor} (next extent starts at {start})"
                )));
            }
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::format(format!(
                "payload has {} bytes but extents cover {cursor}",
                payload.len()
            )));
        }
        Ok(archive)
    }
}

impl FromIterator<Tensor> for Result<TensorArchive> {
    fn from_iter<I: IntoIterator<Item = Tensor>>(iter: I) -> Self {
        let mut archive = TensorArchive::new();
        for t in iter {
            archive.insert(t)?;
        }
        Ok(archive)
    }
}
