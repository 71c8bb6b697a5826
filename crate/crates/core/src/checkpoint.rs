//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PFSEG1\0" (7 bytes)
//! u32 header length
//! header:
//!   u32 format version (currently 1)
//!   model spec: u8 variant, u32 input channels, u32 classes,
//!               4x u32 encoder widths, 4x u32 decoder widths,
//!               u32 backbone kernel, u32 fusion kernel, u8 fusion bias
//!   u64 step counter
//!   u8 RNG flag; if 1: 32-byte seed, u128 word position
//!   u32 tensor count, then per tensor (sorted by name):
//!     u16 name length, name (UTF-8), u8 dtype tag, u8 rank,
//!     rank x u32 dims, u64 payload offset, u64 byte length
//! payload: raw tensor elements, little-endian IEEE-754
//! u32 CRC-32 of the payload
//! ```
//!
//! Model parameters are stored under `param.<name>`, optimizer velocity
//! under `velocity.<name>`. The directory is sorted and offsets are assigned
//! in directory order, so save → load → save reproduces the file byte for
//! byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CheckpointError;
use crate::models::{Model, ModelSpec, Variant};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 7] = b"PFSEG1\0";
const FORMAT_VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param.";
const VELOCITY_PREFIX: &str = "velocity.";

/// Serializable snapshot of the sampling RNG, sufficient to resume the
/// stream exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything a checkpoint file carries, in memory.
#[derive(Debug, Clone)]
pub struct CheckpointData<S: Scalar> {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor<S>>,
    pub velocity: BTreeMap<String, Tensor<S>>,
    pub step: u64,
    pub rng: Option<RngState>,
}

impl<S: Scalar> CheckpointData<S> {
    /// Snapshot of a bare model (no optimizer state).
    pub fn from_model(model: &Model<S>) -> CheckpointData<S> {
        CheckpointData {
            spec: model.spec().clone(),
            params: model.params().clone(),
            velocity: BTreeMap::new(),
            step: 0,
            rng: None,
        }
    }

    /// Rebuilds the model against the spec stored in the file.
    pub fn into_model(self) -> Result<Model<S>, CheckpointError> {
        let spec = self.spec.clone();
        self.into_model_with_spec(&spec)
    }

    /// Rebuilds the model against a caller-chosen spec. The stored tensors
    /// must cover that spec's parameter plan exactly — loading a variant's
    /// checkpoint as a different variant reports the extra and missing
    /// tensor names rather than guessing.
    pub fn into_model_with_spec(self, spec: &ModelSpec) -> Result<Model<S>, CheckpointError> {
        let plan = spec.param_shapes();
        let mut extra: Vec<String> = self
            .params
            .keys()
            .filter(|n| !plan.iter().any(|(p, _)| p == *n))
            .cloned()
            .collect();
        let mut missing: Vec<String> = plan
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| !self.params.contains_key(n))
            .collect();
        if !extra.is_empty() || !missing.is_empty() {
            extra.sort();
            missing.sort();
            return Err(CheckpointError::SpecMismatch { extra, missing });
        }
        for (name, shape) in &plan {
            let stored = self.params[name].shape();
            if stored != shape.as_slice() {
                return Err(CheckpointError::ShapeConflict {
                    name: name.clone(),
                    stored: stored.to_vec(),
                    expected: shape.clone(),
                });
            }
        }
        Model::from_parts(spec.clone(), self.params)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

/// Writes the checkpoint to `path` in the canonical byte layout.
pub fn save_checkpoint<S: Scalar>(
    data: &CheckpointData<S>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode(data)?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and fully validates a checkpoint, including the payload checksum.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<CheckpointData<S>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Serializes to the canonical byte layout (exposed for round-trip tests).
pub fn encode<S: Scalar>(data: &CheckpointData<S>) -> Result<Vec<u8>, CheckpointError> {
    data.spec
        .validate()
        .map_err(|e| CheckpointError::Malformed(format!("invalid spec: {e}")))?;
    // One sorted directory over both tensor groups; the prefixes keep the
    // groups distinguishable and BTreeMap keeps the order canonical.
    let mut directory: BTreeMap<String, &Tensor<S>> = BTreeMap::new();
    for (name, t) in &data.params {
        directory.insert(format!("{PARAM_PREFIX}{name}"), t);
    }
    for (name, t) in &data.velocity {
        directory.insert(format!("{VELOCITY_PREFIX}{name}"), t);
    }
    if directory.len() > u32::MAX as usize {
        return Err(CheckpointError::Malformed("too many tensors".into()));
    }

    let mut payload = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    encode_spec(&mut header, &data.spec);
    header.extend_from_slice(&data.step.to_le_bytes());
    match &data.rng {
        Some(rng) => {
            header.push(1);
            header.extend_from_slice(&rng.seed);
            header.extend_from_slice(&rng.word_pos.to_le_bytes());
        }
        None => header.push(0),
    }
    header.extend_from_slice(&(directory.len() as u32).to_le_bytes());
    for (name, tensor) in &directory {
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!(
                "tensor name too long: {name}"
            )));
        }
        header.extend_from_slice(&(name.len() as u16).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(S::DTYPE.tag());
        header.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
        let byte_len = payload.len() as u64 - offset;
        header.extend_from_slice(&offset.to_le_bytes());
        header.extend_from_slice(&byte_len.to_le_bytes());
    }

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    Ok(out)
}

/// Parses the canonical byte layout (exposed for corruption tests).
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<CheckpointData<S>, CheckpointError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = cur.u32("header length")? as usize;
    let header_end = cur
        .pos
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(CheckpointError::Truncated { what: "header" })?;

    let version = cur.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let spec = decode_spec(&mut cur)?;
    let step = cur.u64("step counter")?;
    let rng = match cur.u8("RNG flag")? {
        0 => None,
        1 => {
            let mut seed = [0u8; 32];
            seed.copy_from_slice(cur.take(32, "RNG seed")?);
            let word_pos = cur.u128("RNG word position")?;
            Some(RngState { seed, word_pos })
        }
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown RNG flag {other}"
            )));
        }
    };

    let n_tensors = cur.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = cur.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = cur.u8("dtype tag")?;
        let dtype = Dtype::from_tag(tag).ok_or(CheckpointError::UnsupportedDtype(tag))?;
        if dtype != S::DTYPE {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} stored as {dtype:?} but this loader reads {:?}",
                S::DTYPE
            )));
        }
        let rank = cur.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("tensor dim")? as usize);
        }
        let offset = cur.u64("tensor offset")? as usize;
        let byte_len = cur.u64("tensor byte length")? as usize;
        entries.push((name, dtype, shape, offset, byte_len));
    }
    if cur.pos != header_end {
        return Err(CheckpointError::Malformed(
            "header length does not match its contents".into(),
        ));
    }

    if bytes.len() < header_end + 4 {
        return Err(CheckpointError::Truncated { what: "payload" });
    }
    let payload = &bytes[header_end..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(payload);
    if stored_crc != computed {
        return Err(CheckpointError::ChecksumMismatch {
            stored: stored_crc,
            computed,
        });
    }

    let elem = S::DTYPE.size();
    let mut params = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    for (name, _dtype, shape, offset, byte_len) in entries {
        let numel: usize = shape.iter().product();
        if byte_len != numel * elem {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name}: {byte_len} bytes for shape {shape:?}"
            )));
        }
        let end = offset
            .checked_add(byte_len)
            .filter(|&e| e <= payload.len())
            .ok_or(CheckpointError::Truncated { what: "tensor data" })?;
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[offset..end].chunks_exact(elem) {
            data.push(S::read_le(chunk));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        if let Some(plain) = name.strip_prefix(PARAM_PREFIX) {
            params.insert(plain.to_string(), tensor);
        } else if let Some(plain) = name.strip_prefix(VELOCITY_PREFIX) {
            velocity.insert(plain.to_string(), tensor);
        } else {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} belongs to no known group"
            )));
        }
    }

    Ok(CheckpointData {
        spec,
        params,
        velocity,
        step,
        rng,
    })
}

fn encode_spec(out: &mut Vec<u8>, spec: &ModelSpec) {
    out.push(spec.variant.tag());
    out.extend_from_slice(&(spec.input_channels as u32).to_le_bytes());
    out.extend_from_slice(&(spec.num_classes as u32).to_le_bytes());
    for w in spec.encoder_widths.iter().chain(&spec.decoder_widths) {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.backbone_kernel as u32).to_le_bytes());
    out.extend_from_slice(&(spec.fusion_kernel as u32).to_le_bytes());
    out.push(spec.fusion_bias as u8);
}

fn decode_spec(cur: &mut Cursor<'_>) -> Result<ModelSpec, CheckpointError> {
    let tag = cur.u8("variant tag")?;
    let variant = Variant::from_tag(tag)
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown variant tag {tag}")))?;
    let input_channels = cur.u32("input channels")? as usize;
    let num_classes = cur.u32("class count")? as usize;
    let mut widths = [0usize; 8];
    for w in &mut widths {
        *w = cur.u32("layer width")? as usize;
    }
    let backbone_kernel = cur.u32("backbone kernel")? as usize;
    let fusion_kernel = cur.u32("fusion kernel")? as usize;
    let fusion_bias = match cur.u8("fusion bias flag")? {
        0 => false,
        1 => true,
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown fusion bias flag {other}"
            )));
        }
    };
    let spec = ModelSpec {
        variant,
        input_channels,
        num_classes,
        encoder_widths: widths[..4].try_into().unwrap(),
        decoder_widths: widths[4..].try_into().unwrap(),
        backbone_kernel,
        fusion_kernel,
        fusion_bias,
    };
    spec.validate()
        .map_err(|e| CheckpointError::Malformed(format!("invalid stored spec: {e}")))?;
    Ok(spec)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated { what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &'static str) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
}

// Half-byte table for the reflected CRC-32 polynomial 0xEDB88320 (the
// "crc32" of zlib, PNG, and gzip).
const CRC_TABLE: [u32; 16] = [
    0x0000_0000,
    0x1DB7_1064,
    0x3B6E_20C8,
    0x26D9_30AC,
    0x76DC_4190,
    0x6B6B_51F4,
    0x4DB2_6158,
    0x5005_713C,
    0xEDB8_8320,
    0xF00F_9344,
    0xD6D6_A3E8,
    0xCB61_B38C,
    0x9B64_C2B0,
    0x86D3_D2D4,
    0xA00A_E278,
    0xBDBD_F21C,
];

/// CRC-32 (IEEE 802.3, reflected) over `bytes`.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc = CRC_TABLE[((crc ^ b as u32) & 0x0F) as usize] ^ (crc >> 4);
        crc = CRC_TABLE[((crc ^ (b as u32 >> 4)) & 0x0F) as usize] ^ (crc >> 4);
    }
    !crc
}
