//! Bit-packed model containers (`.lqnm`) with full-precision bias passthrough.
//!
//! `.lqnm` layout (little-endian):
//!
//! ```text
//! bytes 0..4    magic "LQNM"
//! byte  4       version (1)
//! byte  5       bit width B
//! byte  6       flags (bit 0 = keep_biases)
//! bytes 7..11   manifest length (u32)
//! manifest      UTF-8 JSON array sorted by name:
//!               {"name", "shape", "kind": "log"|"raw",
//!                "scale": f32 (log only), "offset", "nbytes"}
//! payload       concatenated per-tensor blobs, byte-aligned
//! ```
//!
//! Packed blobs store one `B`-bit code per element, the first element in
//! the least-significant bits of byte 0. Padding bits in the final byte
//! must be zero, making files canonical: identical inputs and config always
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, QuantConfig, QuantizedTensor, ScaleStrategy};
use crate::error::{Error, Result};
use crate::scale;
use crate::tensor::{Tensor, TensorArchive};

const LQNM_MAGIC: &[u8; 4] = b"LQNM";
const LQNM_VERSION: u8 = 1;
const LQNM_PAYLOAD_START: usize = 11;

// ---------------------------------------------------------------------------
// Bit packing
// ---------------------------------------------------------------------------

/// Pack codes into `B` bits per element, LSB-first within each byte.
pub fn pack(qt: &QuantizedTensor) -> Vec<u8> {
    pack_codes(qt.codes(), qt.bits())
}

pub(crate) fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let total_bits = codes.len() * bits;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        let byte = pos / 8;
        let off = pos % 8;
        out[byte] |= c << off;
        if off + bits > 8 {
            out[byte + 1] |= c >> (8 - off);
        }
        pos += bits;
    }
    out
}

/// Exact inverse of [`pack`]. The blob length must match and padding bits
/// must be zero.
pub fn unpack(
    blob: &[u8],
    name: impl Into<String>,
    shape: Vec<usize>,
    bits: u8,
    scale: f32,
) -> Result<QuantizedTensor> {
    let name = name.into();
    codec::validate_bits(bits)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(format!("tensor '{name}': shape overflows")))?;
    let total_bits = count * bits as usize;
    let expected = total_bits.div_ceil(8);
    if blob.len() != expected {
        return Err(Error::format(format!(
            "tensor '{name}': blob has {} bytes, {bits}-bit packing of {count} elements needs {expected}",
            blob.len()
        )));
    }
    if total_bits % 8 != 0 {
        let used = total_bits % 8;
        if blob[expected - 1] >> used != 0 {
            return Err(Error::format(format!(
                "tensor '{name}': nonzero padding bits in final byte"
            )));
        }
    }
    let mask = (1u16 << bits) - 1;
    let mut codes = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let byte = pos / 8;
        let off = pos % 8;
        let mut v = (blob[byte] >> off) as u16;
        if off + bits as usize > 8 {
            v |= (blob[byte + 1] as u16) << (8 - off);
        }
        codes.push((v & mask) as u8);
        pos += bits as usize;
    }
    QuantizedTensor::new(name, shape, scale, bits, codes)
}

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

/// In-memory form of a `.lqnm` file: packed log-quantized tensors plus
/// full-precision passthrough tensors (normally biases).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    bits: u8,
    keep_biases: bool,
    quantized: BTreeMap<String, QuantizedTensor>,
    passthrough: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
    offset: u64,
    nbytes: u64,
}

impl ModelContainer {
    /// Assemble a container from already-quantized parts.
    pub fn from_parts(
        bits: u8,
        keep_biases: bool,
        quantized: BTreeMap<String, QuantizedTensor>,
        passthrough: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        codec::validate_bits(bits)?;
        for (name, qt) in &quantized {
            if qt.name() != name {
                return Err(Error::validation(format!(
                    "quantized map key '{name}' does not match tensor name '{}'",
                    qt.name()
                )));
            }
            if qt.bits() != bits {
                return Err(Error::validation(format!(
                    "tensor '{name}' has {} bits, container is {bits}-bit",
                    qt.bits()
                )));
            }
            if passthrough.contains_key(name) {
                return Err(Error::validation(format!(
                    "tensor '{name}' appears in both quantized and passthrough sets"
                )));
            }
        }
        for (name, t) in &passthrough {
            if t.name() != name {
                return Err(Error::validation(format!(
                    "passthrough map key '{name}' does not match tensor name '{}'",
                    t.name()
                )));
            }
        }
        Ok(ModelContainer { bits, keep_biases, quantized, passthrough })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn keep_biases(&self) -> bool {
        self.keep_biases
    }

    pub fn quantized(&self) -> &BTreeMap<String, QuantizedTensor> {
        &self.quantized
    }

    pub fn passthrough(&self) -> &BTreeMap<String, Tensor> {
        &self.passthrough
    }

    /// Configuration reconstructed from the header. The scale strategy is
    /// not persisted (each tensor carries its fitted scale instead), so the
    /// returned strategy is the default.
    pub fn config(&self) -> QuantConfig {
        QuantConfig { bits: self.bits, keep_biases: self.keep_biases, ..QuantConfig::default() }
    }

    /// Serialize to the `.lqnm` byte layout. Deterministic.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        let mut offset = 0u64;

        // One name-ordered walk over both maps.
        let mut q_iter = self.quantized.iter().peekable();
        let mut p_iter = self.passthrough.iter().peekable();
        loop {
            let take_q = match (q_iter.peek(), p_iter.peek()) {
                (Some((qn, _)), Some((pn, _))) => qn < pn,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let (entry, blob) = if take_q {
                let (name, qt) = q_iter.next().unwrap();
                let blob = pack(qt);
                (
                    ManifestEntry {
                        name: name.clone(),
                        shape: qt.shape().to_vec(),
                        kind: "log".to_string(),
                        scale: Some(qt.scale()),
                        offset,
                        nbytes: blob.len() as u64,
                    },
                    blob,
                )
            } else {
                let (name, t) = p_iter.next().unwrap();
                let mut blob = Vec::with_capacity(4 * t.len());
                for &v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                (
                    ManifestEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        kind: "raw".to_string(),
                        scale: None,
                        offset,
                        nbytes: blob.len() as u64,
                    },
                    blob,
                )
            };
            offset += entry.nbytes;
            entries.push(entry);
            blobs.push(blob);
        }

        let manifest = serde_json::to_vec(&entries)
            .map_err(|e| Error::format(format!("manifest encode: {e}")))?;
        let manifest_len = u32::try_from(manifest.len())
            .map_err(|_| Error::validation("manifest exceeds u32 length"))?;

        let mut out =
            Vec::with_capacity(LQNM_PAYLOAD_START + manifest.len() + offset as usize);
        out.extend_from_slice(LQNM_MAGIC);
        out.push(LQNM_VERSION);
        out.push(self.bits);
        out.push(self.keep_biases as u8);
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for blob in blobs {
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    /// Parse the `.lqnm` byte layout, verifying structural consistency.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < LQNM_PAYLOAD_START {
            return Err(Error::format("file shorter than fixed header"));
        }
        if &bytes[0..4] != LQNM_MAGIC {
            return Err(Error::format("bad magic, expected LQNM"));
        }
        if bytes[4] != LQNM_VERSION {
            return Err(Error::format(format!("unsupported version {}", bytes[4])));
        }
        let bits = bytes[5];
        codec::validate_bits(bits).map_err(|e| Error::format(e.to_string()))?;
        let flags = bytes[6];
        if flags & !1 != 0 {
            return Err(Error::format(format!("unknown flag bits set: {flags:#x}")));
        }
        let keep_biases = flags & 1 == 1;
        let manifest_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let manifest_end = LQNM_PAYLOAD_START
            .checked_add(manifest_len)
            .ok_or_else(|| Error::format("manifest length overflows"))?;
        if bytes.len() < manifest_end {
            return Err(Error::format("manifest extends past end of file"));
        }
        let entries: Vec<ManifestEntry> =
            serde_json::from_slice(&bytes[LQNM_PAYLOAD_START..manifest_end])
                .map_err(|e| Error::format(format!("manifest decode: {e}")))?;
        let payload = &bytes[manifest_end..];

        for pair in entries.windows(2) {
            if pair[0].name >= pair[1].name {
                return Err(Error::format(format!(
                    "manifest not strictly sorted by name at '{}'",
                    pair[1].name
                )));
            }
        }

        let mut quantized = BTreeMap::new();
        let mut passthrough = BTreeMap::new();
        let mut cursor = 0u64;
        for entry in &entries {
            if entry.offset != cursor {
                return Err(Error::format(format!(
                    "tensor '{}': offset {} does not follow previous payload end {cursor}",
                    entry.name, entry.offset
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.nbytes)
                .ok_or_else(|| Error::format(format!("tensor '{}': extent overflows", entry.name)))?;
            if end > payload.len() as u64 {
                return Err(Error::format(format!(
                    "tensor '{}': payload extent {}..{end} exceeds payload size {}",
                    entry.name,
                    entry.offset,
                    payload.len()
                )));
            }
            cursor = end;
            let blob = &payload[entry.offset as usize..end as usize];
            match entry.kind.as_str() {
                "log" => {
                    let scale = entry.scale.ok_or_else(|| {
                        Error::format(format!("tensor '{}': log entry missing scale", entry.name))
                    })?;
                    if !(scale > 0.0 && scale.is_finite()) {
                        return Err(Error::format(format!(
                            "tensor '{}': invalid scale {scale}",
                            entry.name
                        )));
                    }
                    let qt = unpack(blob, entry.name.clone(), entry.shape.clone(), bits, scale)?;
                    quantized.insert(entry.name.clone(), qt);
                }
                "raw" => {
                    if entry.scale.is_some() {
                        return Err(Error::format(format!(
                            "tensor '{}': raw entry carries a scale",
                            entry.name
                        )));
                    }
                    let count = entry
                        .shape
                        .iter()
                        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                        .ok_or_else(|| {
                            Error::format(format!("tensor '{}': shape overflows", entry.name))
                        })?;
                    if entry.nbytes != count * 4 {
                        return Err(Error::format(format!(
                            "tensor '{}': raw entry declares {} bytes for {count} elements",
                            entry.name, entry.nbytes
                        )));
                    }
                    let mut data = Vec::with_capacity(count as usize);
                    for chunk in blob.chunks_exact(4) {
                        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                    }
                    let t = Tensor::new(entry.name.clone(), entry.shape.clone(), data)
                        .map_err(|e| match e {
                            Error::Data(msg) => Error::data(msg),
                            other => Error::format(other.to_string()),
                        })?;
                    passthrough.insert(entry.name.clone(), t);
                }
                other => {
                    return Err(Error::format(format!(
                        "tensor '{}': unknown kind '{other}'",
                        entry.name
                    )));
                }
            }
        }
        if cursor != payload.len() as u64 {
            return Err(Error::format(format!(
                "payload has {} bytes but manifest covers {cursor}",
                payload.len()
            )));
        }
        ModelContainer::from_parts(bits, keep_biases, quantized, passthrough)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Decode every quantized tensor and copy passthrough tensors verbatim.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new();
        for qt in self.quantized.values() {
            archive.insert(codec::decode(qt)?)?;
        }
        for t in self.passthrough.values() {
            archive.insert(t.clone())?;
        }
        Ok(archive)
    }
}

// ---------------------------------------------------------------------------
// Quantize / report
// ---------------------------------------------------------------------------

/// Per-tensor byte accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCompression {
    pub name: String,
    pub original_bytes: u64,
    pub compressed_bytes: u64,
}

/// Compression accounting, reported two ways: against payload bytes only
/// (parameter storage, comparable across tools) and against the whole file
/// (which adds our manifest overhead).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub original_bytes: u64,
    /// Payload bytes: packed codes plus raw passthrough values.
    pub compressed_bytes: u64,
    /// original_bytes / compressed_bytes.
    pub ratio: f64,
    /// Total `.lqnm` size including headers and manifest.
    pub file_bytes: u64,
    /// original_bytes / file_bytes.
    pub file_ratio: f64,
    pub per_tensor: Vec<TensorCompression>,
}

/// Quantize an archive under `config` into an in-memory container.
pub fn quantize_archive(archive: &TensorArchive, config: &QuantConfig) -> Result<ModelContainer> {
    quantize_archive_with_threads(archive, config, 1)
}

/// Like [`quantize_archive`], fitting scales and packing tensors on up to
/// `threads` worker threads. The result does not depend on the thread count.
pub fn quantize_archive_with_threads(
    archive: &TensorArchive,
    config: &QuantConfig,
    threads: usize,
) -> Result<ModelContainer> {
    config.validate()?;
    if archive.is_empty() {
        return Err(Error::validation("cannot quantize an empty archive"));
    }

    enum Packed {
        Log(QuantizedTensor),
        Raw(Tensor),
    }

    let process = |t: &Tensor| -> Result<Packed> {
        if config.is_passthrough(t.name()) {
            return Ok(Packed::Raw(t.clone()));
        }
        let fitted = match config.scale_strategy {
            ScaleStrategy::Fixed(s) => s,
            ScaleStrategy::Max => scale::max_scale(t)?,
            ScaleStrategy::Em { tol, max_iter } => {
                scale::em_fit_scale(t, config.bits, tol, max_iter)?.scale
            }
        };
        // The manifest stores f32 scales; encode with the value that will
        // actually be stored so the container adds no numeric error.
        let stored = fitted as f32;
        if !(stored > 0.0 && stored.is_finite()) {
            return Err(Error::validation(format!(
                "tensor '{}': scale {fitted} is not representable as f32",
                t.name()
            )));
        }
        Ok(Packed::Log(codec::encode(t, stored as f64, config.bits)?))
    };

    let tensors: Vec<&Tensor> = archive.iter().collect();
    let workers = threads.max(1).min(tensors.len());
    let results: Vec<Packed> = if workers <= 1 {
        tensors.iter().map(|t| process(t)).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<Packed>>> = Vec::new();
        slots.resize_with(tensors.len(), || None);
        let chunk = tensors.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (slot_chunk, tensor_chunk) in slots.chunks_mut(chunk).zip(tensors.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, t) in slot_chunk.iter_mut().zip(tensor_chunk) {
                        *slot = Some(process(t));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("worker filled slot")).collect::<Result<_>>()?
    };

    let mut quantized = BTreeMap::new();
    let mut passthrough = BTreeMap::new();
    for packed in results {
        match packed {
            Packed::Log(qt) => {
                quantized.insert(qt.name().to_string(), qt);
            }
            Packed::Raw(t) => {
                passthrough.insert(t.name().to_string(), t);
            }
        }
    }
    ModelContainer::from_parts(config.bits, config.keep_biases, quantized, passthrough)
}

/// Compression accounting for a container (original side assumes 32-bit
/// values).
pub fn compression_report(container: &ModelContainer, file_bytes: u64) -> CompressionReport {
    let mut per_tensor = Vec::new();
    let mut original = 0u64;
    let mut compressed = 0u64;
    let mut q_iter = container.quantized.iter().peekable();
    let mut p_iter = container.passthrough.iter().peekable();
    loop {
        let take_q = match (q_iter.peek(), p_iter.peek()) {
            (Some((qn, _)), Some((pn, _))) => qn < pn,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        let (name, orig, comp) = if take_q {
            let (name, qt) = q_iter.next().unwrap();
            let packed = (qt.len() * qt.bits() as usize).div_ceil(8) as u64;
            (name.clone(), 4 * qt.len() as u64, packed)
        } else {
            let (name, t) = p_iter.next().unwrap();
            (name.clone(), 4 * t.len() as u64, 4 * t.len() as u64)
        };
        original += orig;
        compressed += comp;
        per_tensor.push(TensorCompression { name, original_bytes: orig, compressed_bytes: comp });
    }
    CompressionReport {
        original_bytes: original,
        compressed_bytes: compressed,
        ratio: original as f64 / compressed as f64,
        file_bytes,
        file_ratio: original as f64 / file_bytes as f64,
        per_tensor,
    }
}

/// Quantize an archive and write the `.lqnm` file, returning the report.
pub fn write_model(
    archive: &TensorArchive,
    config: &QuantConfig,
    path: impl AsRef<Path>,
) -> Result<CompressionReport> {
    write_model_with_threads(archive, config, path, 1)
}

/// [`write_model`] with a worker-thread cap for per-tensor scale fitting
/// and packing.
pub fn write_model_with_threads(
    archive: &TensorArchive,
    config: &QuantConfig,
    path: impl AsRef<Path>,
    threads: usize,
) -> Result<CompressionReport> {
    let container = quantize_archive_with_threads(archive, config, threads)?;
    let bytes = container.to_bytes()?;
    let path = path.as_ref();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(compression_report(&container, bytes.len() as u64))
}

/// Read a `.lqnm` file back into its quantized and passthrough tensors.
pub fn read_model(path: impl AsRef<Path>) -> Result<ModelContainer> {
    ModelContainer::load(path)
}

/// Decode a `.lqnm` model into a full-precision `.lqta` archive.
pub fn dequantize_model(path_in: impl AsRef<Path>, path_out: impl AsRef<Path>) -> Result<()> {
    let container = ModelContainer::load(path_in)?;
    container.to_archive()?.save(path_out)
}
