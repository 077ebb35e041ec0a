//! Dense tensors, parameter kinds, checkpoints and the `MTC1` binary container.
//!
//! # Container layout
//!
//! ```text
//! offset 0   : b"MTC1"
//! offset 4   : u32 little-endian header length H
//! offset 8   : H bytes of UTF-8 JSON, right-padded with ASCII spaces so that
//!              8 + H is a multiple of 8
//! offset 8+H : payload; each tensor's little-endian data at `offset` bytes
//!              from the payload start, zero-padded to 8-byte alignment
//! ```
//!
//! The header has the keys `version`, `tensors`, `meta` in that order. Each
//! tensor record has the keys `name`, `kind`, `dtype`, `shape`, `offset`,
//! `nbytes` in that order, and `meta` keys are sorted. The JSON is written
//! without whitespace, so identical checkpoints always produce identical
//! files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MTC1";
pub const CONTAINER_VERSION: u32 = 1;
const ALIGN: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U32 => "u32",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a parameter tensor participates in merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Rank-2 `[d_in, d_out]` weight of a linear map, applied as `X · W`.
    LinearWeight,
    /// Rank-1 elementwise multiplier applied to normalized features.
    Scale,
    /// Rank-1 elementwise offset (normalization shift or linear bias).
    Shift,
    /// Never trimmed; always merged by plain task arithmetic.
    Frozen,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::LinearWeight => "linear_weight",
            ParamKind::Scale => "scale",
            ParamKind::Shift => "shift",
            ParamKind::Frozen => "frozen",
        }
    }

    /// Required tensor rank, if the kind constrains it.
    pub fn required_rank(self) -> Option<usize> {
        match self {
            ParamKind::LinearWeight => Some(2),
            ParamKind::Scale | ParamKind::Shift => Some(1),
            ParamKind::Frozen => None,
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_u32(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        Self::new(shape, TensorData::U32(data))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f64(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Some(v),
            _ => None,
        }
    }

    /// Values widened to `f64`. All merging math runs on this view.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    /// Same shape, `f64` storage.
    pub fn widened(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: TensorData::F64(self.to_f64_vec()) }
    }

    /// Index of the first NaN/Inf element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::U32(_) => None,
        }
    }

    /// Bitwise equality (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U32(a), TensorData::U32(b)) => a == b,
            _ => false,
        }
    }

    fn nbytes(&self) -> usize {
        self.numel() * self.dtype().size()
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U32 => TensorData::U32(
                bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Named, kind-tagged parameter set. Iteration order is insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: IndexMap<String, Entry>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, Entry { kind, tensor });
        Ok(())
    }

    /// Replaces the tensor of an existing entry, keeping its kind and position.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Missing(format!("tensor {name:?}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "{name}: replacement shape {:?} != {:?}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Missing(format!("tensor {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks kind/rank invariants and finiteness of every entry.
    pub fn validate(&self) -> Result<()> {
        for (name, e) in self.iter() {
            if let Some(rank) = e.kind.required_rank() {
                if e.tensor.rank() != rank {
                    return Err(Error::InvalidTensor {
                        name: name.to_string(),
                        msg: format!("{} requires rank {rank}, got {:?}", e.kind, e.tensor.shape()),
                    });
                }
            }
            if let Some(index) = e.tensor.first_non_finite() {
                return Err(Error::NonFinite { name: name.to_string(), index });
            }
        }
        Ok(())
    }

    /// Copy with every float tensor stored as f64.
    pub fn widened(&self) -> Checkpoint {
        let entries = self
            .entries
            .iter()
            .map(|(n, e)| (n.clone(), Entry { kind: e.kind, tensor: e.tensor.widened() }))
            .collect();
        Checkpoint { entries, meta: self.meta.clone() }
    }

    /// Bitwise equality of entries (meta included).
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta
            && self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb && a.kind == b.kind && a.tensor.bit_eq(&b.tensor)
            })
    }
}

/// True iff names, kinds, dtypes and shapes match pairwise in order.
pub fn check_aligned(a: &Checkpoint, b: &Checkpoint) -> bool {
    alignment_error(a, b).is_none()
}

/// Human-readable reason two checkpoints are not aligned.
pub fn alignment_error(a: &Checkpoint, b: &Checkpoint) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("{} entries vs {}", a.len(), b.len()));
    }
    for ((na, ea), (nb, eb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Some(format!("name {na:?} vs {nb:?}"));
        }
        if ea.kind != eb.kind {
            return Some(format!("{na}: kind {} vs {}", ea.kind, eb.kind));
        }
        if ea.tensor.dtype() != eb.tensor.dtype() {
            return Some(format!("{na}: dtype {} vs {}", ea.tensor.dtype(), eb.tensor.dtype()));
        }
        if ea.tensor.shape() != eb.tensor.shape() {
            return Some(format!("{na}: shape {:?} vs {:?}", ea.tensor.shape(), eb.tensor.shape()));
        }
    }
    None
}

pub(crate) fn ensure_aligned(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    match alignment_error(a, b) {
        None => Ok(()),
        Some(msg) => Err(Error::NotAligned(msg)),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    tensors: Vec<TensorRecord>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub kind: ParamKind,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

/// Serializes a checkpoint to container bytes. Fails before producing any
/// output if an invariant is violated.
pub fn encode_container(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    checkpoint.validate()?;

    let mut records = Vec::with_capacity(checkpoint.len());
    let mut offset = 0u64;
    for (name, e) in checkpoint.iter() {
        let nbytes = e.tensor.nbytes() as u64;
        records.push(TensorRecord {
            name: name.to_string(),
            kind: e.kind,
            dtype: e.tensor.dtype(),
            shape: e.tensor.shape().to_vec(),
            offset,
            nbytes,
        });
        offset = align_up(offset + nbytes);
    }
    let header = Header { version: CONTAINER_VERSION, tensors: records, meta: checkpoint.meta.clone() };
    let mut json = serde_json::to_vec(&header)?;
    while (8 + json.len()) % ALIGN as usize != 0 {
        json.push(b' ');
    }
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::BadHeader("header exceeds u32::MAX bytes".into()))?;

    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    let payload_start = out.len();
    for (rec, (_, e)) in header.tensors.iter().zip(checkpoint.iter()) {
        out.resize(payload_start + rec.offset as usize, 0);
        e.tensor.write_le(&mut out);
    }
    // Pad the tail so the payload length is a multiple of the alignment too.
    out.resize(payload_start + offset as usize, 0);
    Ok(out)
}

/// Parses container bytes, validating magic, header, layout and finiteness.
pub fn decode_container(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic { found: bytes[..4].try_into().unwrap() });
        }
        return Err(Error::Truncated { needed: 8, available: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let header_end = 8 + header_len;
    if (bytes.len() as u64) < header_end {
        return Err(Error::Truncated { needed: header_end, available: bytes.len() as u64 });
    }
    let header_text = std::str::from_utf8(&bytes[8..header_end as usize])
        .map_err(|e| Error::BadHeader(format!("header is not UTF-8: {e}")))?;
    let header: Header =
        serde_json::from_str(header_text).map_err(|e| Error::BadHeader(e.to_string()))?;
    if header.version != CONTAINER_VERSION {
        return Err(Error::BadHeader(format!("unsupported version {}", header.version)));
    }

    let payload = &bytes[header_end as usize..];
    let mut min_next = 0u64;
    let mut max_end = 0u64;
    for rec in &header.tensors {
        if rec.offset % ALIGN != 0 {
            return Err(Error::Misaligned { name: rec.name.clone(), offset: rec.offset });
        }
        if rec.offset < min_next {
            return Err(Error::OverlappingOffsets { name: rec.name.clone() });
        }
        let numel: u64 = rec.shape.iter().map(|&d| d as u64).product();
        if rec.nbytes != numel * rec.dtype.size() as u64 {
            return Err(Error::BadHeader(format!(
                "{}: nbytes {} does not match shape {:?} of {}",
                rec.name, rec.nbytes, rec.shape, rec.dtype
            )));
        }
        min_next = rec.offset + rec.nbytes;
        max_end = max_end.max(min_next);
    }
    if (payload.len() as u64) < max_end {
        return Err(Error::Truncated { needed: header_end + max_end, available: bytes.len() as u64 });
    }

    let mut ckpt = Checkpoint::new();
    for rec in header.tensors {
        let start = rec.offset as usize;
        let t = Tensor::read_le(rec.dtype, rec.shape, &payload[start..start + rec.nbytes as usize])
            .map_err(|e| Error::InvalidTensor { name: rec.name.clone(), msg: e.to_string() })?;
        if let Some(index) = t.first_non_finite() {
            return Err(Error::NonFinite { name: rec.name, index });
        }
        ckpt.insert(rec.name, rec.kind, t)?;
    }
    ckpt.meta = header.meta;
    ckpt.validate()?;
    Ok(ckpt)
}

/// Header records of a container, without decoding the payload.
pub fn read_records(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    decode_container(bytes)?;
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])?;
    Ok(header.tensors)
}

pub fn write_container(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = encode_container(checkpoint)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_container(&bytes)
}
