//! Checkpoint container files: a little-endian `u64` header length, a JSON header
//! mapping tensor names to `{dtype, shape, data_offsets}`, then the raw tensor payloads.
//!
//! Serialization is canonical: tensors sorted by name, payloads laid out contiguously
//! in that order, header without insignificant whitespace. Identical logical content
//! therefore yields identical bytes, and [`Fingerprint`] is the SHA-256 of those bytes.

mod dtype;
mod header;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dtype::{from_f32, to_f32, Dtype};

use crate::error::{Error, FormatError, Result};

pub(crate) const METADATA_KEY: &str = "__metadata__";

/// Header entry of one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// `[begin, end)` relative to the start of the data region.
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// A dense tensor in its storage dtype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    /// Wraps a little-endian payload; its length must match `dtype` and `shape`.
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = header::byte_len(dtype, &shape)
            .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))?;
        if expected != data.len() as u64 {
            return Err(Error::invalid(format!(
                "{dtype} tensor of shape {shape:?} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// Narrows `values` to `dtype`.
    pub fn from_f32(dtype: Dtype, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} elements, got {}",
                values.len()
            )));
        }
        Tensor::new(dtype, shape, from_f32(values, dtype))
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        to_f32(&self.data, self.dtype).expect("length checked at construction")
    }
}

/// SHA-256 digest of a checkpoint's canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl std::str::FromStr for Fingerprint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::invalid(format!("fingerprint: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::invalid("fingerprint must be 32 bytes"))?;
        Ok(Fingerprint(arr))
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named collection of dense tensors plus optional string metadata.
///
/// Tensors are kept sorted by name, so insertion order never affects the
/// serialized bytes or the fingerprint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Names must be unique and must not be the reserved metadata key.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(FormatError::ReservedName(name).into());
        }
        if self.tensors.contains_key(&name) {
            return Err(FormatError::DuplicateTensor(name).into());
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Inserts or replaces a tensor.
    pub fn put(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        self.tensors.remove(&name);
        self.insert(name, tensor)
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Header entries with canonical, contiguous data offsets.
    pub fn metas(&self) -> Vec<TensorMeta> {
        canonical_metas(
            self.tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.dtype, t.shape.clone())),
        )
    }

    /// Canonical serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = header::encode(&self.metas(), self.metadata.as_ref());
        let payload: usize = self.tensors.values().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + payload);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Parses a complete container held in memory.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (parsed, data_start) = parse_prefix(bytes, bytes.len() as u64)?;
        let data = &bytes[data_start as usize..];
        let mut ckpt = Checkpoint::new();
        ckpt.metadata = parsed.metadata;
        for meta in parsed.metas {
            let (b, e) = meta.data_offsets;
            let raw = data[b as usize..e as usize].to_vec();
            ckpt.tensors
                .insert(meta.name, Tensor::new(meta.dtype, meta.shape, raw)?);
        }
        Ok(ckpt)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let header = header::encode(&self.metas(), self.metadata.as_ref());
        let mut h = Sha256::new();
        h.update((header.len() as u64).to_le_bytes());
        h.update(&header);
        for t in self.tensors.values() {
            h.update(&t.data);
        }
        Fingerprint(h.finalize().into())
    }
}

fn canonical_metas(entries: impl Iterator<Item = (String, Dtype, Vec<usize>)>) -> Vec<TensorMeta> {
    let mut offset = 0u64;
    entries
        .map(|(name, dtype, shape)| {
            let len = header::byte_len(dtype, &shape).expect("validated shape");
            let meta = TensorMeta {
                name,
                dtype,
                shape,
                data_offsets: (offset, offset + len),
            };
            offset += len;
            meta
        })
        .collect()
}

/// Validates the length prefix and parses the header; `prefix` must start at byte 0
/// of a file of `file_len` bytes. Returns the header and the data-region start.
fn parse_prefix(prefix: &[u8], file_len: u64) -> Result<(header::ParsedHeader, u64), FormatError> {
    if file_len < 8 || prefix.len() < 8 {
        return Err(FormatError::Truncated(format!(
            "{file_len} bytes cannot hold the 8-byte header length"
        )));
    }
    let n = u64::from_le_bytes(prefix[..8].try_into().unwrap());
    let data_start = n
        .checked_add(8)
        .filter(|&s| s <= file_len)
        .ok_or_else(|| {
            FormatError::Truncated(format!(
                "header declares {n} bytes but the file has {file_len}"
            ))
        })?;
    if (prefix.len() as u64) < data_start {
        return Err(FormatError::Truncated("header cut short".into()));
    }
    let parsed = header::parse(&prefix[8..data_start as usize], file_len - data_start)?;
    Ok((parsed, data_start))
}

/// Reads a whole checkpoint into memory.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    CheckpointReader::open(path)?.load()
}

/// Writes the canonical serialization of `ckpt` to `path`.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<Fingerprint> {
    let path = path.as_ref();
    let mut writer = CheckpointWriter::create(
        path,
        ckpt.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.dtype, t.shape.clone())),
        ckpt.metadata.clone(),
    )?;
    for (name, t) in &ckpt.tensors {
        writer.write_tensor(name, &t.data)?;
    }
    writer.finish()
}

/// Lazy per-tensor access to a checkpoint file.
///
/// Only the header is held in memory; each read fetches one tensor's payload with a
/// positioned read, so concurrent reads of distinct tensors are safe.
#[derive(Debug)]
pub struct CheckpointReader {
    path: PathBuf,
    file: File,
    data_start: u64,
    metas: Vec<TensorMeta>,
    metadata: Option<BTreeMap<String, String>>,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let with_path = |source: FormatError| Error::Checkpoint {
            path: Some(path.clone()),
            source,
        };
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut len_bytes = [0u8; 8];
        if file_len < 8 {
            return Err(with_path(FormatError::Truncated(format!(
                "{file_len} bytes cannot hold the 8-byte header length"
            ))));
        }
        file.read_exact(&mut len_bytes)
            .map_err(|e| Error::io(&path, e))?;
        let n = u64::from_le_bytes(len_bytes);
        if n.saturating_add(8) > file_len {
            return Err(with_path(FormatError::Truncated(format!(
                "header declares {n} bytes but the file has {file_len}"
            ))));
        }
        let mut prefix = vec![0u8; 8 + n as usize];
        prefix[..8].copy_from_slice(&len_bytes);
        file.read_exact(&mut prefix[8..])
            .map_err(|e| Error::io(&path, e))?;
        let (parsed, data_start) = parse_prefix(&prefix, file_len).map_err(with_path)?;
        Ok(CheckpointReader {
            path,
            file,
            data_start,
            metas: parsed.metas,
            metadata: parsed.metadata,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Tensor entries sorted by name, with the offsets found in the file.
    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.metas
            .binary_search_by(|m| m.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.metas[i])
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    fn require(&self, name: &str) -> Result<&TensorMeta> {
        self.meta(name)
            .ok_or_else(|| Error::structure(format!("{}: no tensor {name:?}", self.path.display())))
    }

    /// Raw little-endian payload of one tensor.
    pub fn read_raw(&self, name: &str) -> Result<Vec<u8>> {
        let meta = self.require(name)?;
        let mut buf = vec![0u8; meta.byte_len() as usize];
        self.read_at(self.data_start + meta.data_offsets.0, &mut buf)?;
        Ok(buf)
    }

    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let meta = self.require(name)?;
        Tensor::new(meta.dtype, meta.shape.clone(), self.read_raw(name)?)
    }

    /// One tensor widened to F32.
    pub fn read_f32(&self, name: &str) -> Result<Vec<f32>> {
        let meta = self.require(name)?;
        to_f32(&self.read_raw(name)?, meta.dtype)
    }

    #[cfg(unix)]
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        use std::os::unix::fs::FileExt;
        self.file
            .read_exact_at(buf, offset)
            .map_err(|e| Error::io(&self.path, e))
    }

    #[cfg(not(unix))]
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        use std::io::{Seek, SeekFrom};
        let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start(offset))
            .and_then(|_| f.read_exact(buf))
            .map_err(|e| Error::io(&self.path, e))
    }

    /// Loads every tensor.
    pub fn load(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.metadata = self.metadata.clone();
        for meta in &self.metas {
            ckpt.tensors
                .insert(meta.name.clone(), self.read_tensor(&meta.name)?);
        }
        Ok(ckpt)
    }

    /// Fingerprint of the canonical serialization, streamed one tensor at a time.
    pub fn fingerprint(&self) -> Result<Fingerprint> {
        let metas = canonical_metas(
            self.metas
                .iter()
                .map(|m| (m.name.clone(), m.dtype, m.shape.clone())),
        );
        let header = header::encode(&metas, self.metadata.as_ref());
        let mut h = Sha256::new();
        h.update((header.len() as u64).to_le_bytes());
        h.update(&header);
        for m in &self.metas {
            h.update(self.read_raw(&m.name)?);
        }
        Ok(Fingerprint(h.finalize().into()))
    }
}

/// Streaming writer for the canonical serialization.
///
/// The tensor table is fixed up front; payloads must then be supplied in sorted-name
/// order. The fingerprint is computed while writing.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    metas: Vec<TensorMeta>,
    next: usize,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        tensors: impl IntoIterator<Item = (String, Dtype, Vec<usize>)>,
        metadata: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries: Vec<(String, Dtype, Vec<usize>)> = tensors.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(FormatError::DuplicateTensor(pair[0].0.clone()).into());
            }
        }
        for (name, _, shape) in &entries {
            if name == METADATA_KEY {
                return Err(FormatError::ReservedName(name.clone()).into());
            }
            if header::byte_len(Dtype::F32, shape).is_none() {
                return Err(Error::invalid(format!("tensor {name:?}: shape overflows")));
            }
        }
        let metas = canonical_metas(entries.into_iter());
        let header = header::encode(&metas, metadata.as_ref());

        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = CheckpointWriter {
            path,
            out: BufWriter::with_capacity(1 << 20, file),
            hasher: Sha256::new(),
            metas,
            next: 0,
        };
        writer.emit(&(header.len() as u64).to_le_bytes())?;
        writer.emit(&header)?;
        Ok(writer)
    }

    fn emit(&mut self, bytes: &[u8]) -> Result<()> {
        self.hasher.update(bytes);
        self.out
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))
    }

    /// Table entries in write order.
    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    /// Appends the payload of the next tensor in sorted order.
    pub fn write_tensor(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let meta = self.metas.get(self.next).ok_or_else(|| {
            Error::invalid(format!("tensor {name:?} written after the table was complete"))
        })?;
        if meta.name != name {
            return Err(Error::invalid(format!(
                "expected tensor {:?} next, got {name:?}",
                meta.name
            )));
        }
        if meta.byte_len() != data.len() as u64 {
            return Err(FormatError::LengthMismatch {
                name: name.to_string(),
                expected: meta.byte_len(),
                actual: data.len() as u64,
            }
            .into());
        }
        self.next += 1;
        self.emit(data)
    }

    pub fn finish(mut self) -> Result<Fingerprint> {
        if self.next != self.metas.len() {
            return Err(Error::invalid(format!(
                "{} of {} tensors written",
                self.next,
                self.metas.len()
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(Fingerprint(self.hasher.finalize().into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_tensor(shape: Vec<usize>, values: &[f32]) -> Tensor {
        Tensor::from_f32(Dtype::F32, shape, values).unwrap()
    }

    /// Hand-assembled container with one F32 tensor "w" = [1.0, 2.0].
    fn hand_built() -> Vec<u8> {
        let header = br#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0x00, 0x00, 0x80, 0x3F]); // 1.0
        bytes.extend_from_slice(&[0x00, 0x00, 0x00, 0x40]); // 2.0
        bytes
    }

    fn with_header(header: &str, data: &[u8]) -> Vec<u8> {
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(data);
        bytes
    }

    fn format_err(bytes: &[u8]) -> FormatError {
        match Checkpoint::from_bytes(bytes) {
            Err(Error::Checkpoint { source, .. }) => source,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn parses_hand_built_file() {
        let bytes = hand_built();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.len(), 1);
        let w = ckpt.get("w").unwrap();
        assert_eq!(w.dtype(), Dtype::F32);
        assert_eq!(w.shape(), &[2]);
        assert_eq!(w.to_f32(), vec![1.0, 2.0]);
        // already canonical, so it re-serializes to the same bytes
        assert_eq!(ckpt.to_bytes(), bytes);
    }

    #[test]
    fn insertion_order_does_not_change_bytes() {
        let mut a = Checkpoint::new();
        a.insert("b", f32_tensor(vec![1], &[1.0])).unwrap();
        a.insert("a", f32_tensor(vec![2], &[2.0, 3.0])).unwrap();
        let mut b = Checkpoint::new();
        b.insert("a", f32_tensor(vec![2], &[2.0, 3.0])).unwrap();
        b.insert("b", f32_tensor(vec![1], &[1.0])).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn empty_checkpoint_has_empty_table() {
        let bytes = Checkpoint::new().to_bytes();
        assert_eq!(bytes, with_header("{}", &[]));
        assert!(Checkpoint::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn metadata_is_written_first_and_round_trips() {
        let mut c = Checkpoint::new();
        c.insert("A", f32_tensor(vec![], &[5.0])).unwrap();
        c.set_metadata(Some(BTreeMap::from([("format".to_string(), "pt".to_string())])));
        let bytes = c.to_bytes();
        let header = std::str::from_utf8(&bytes[8..bytes.len() - 4]).unwrap();
        assert_eq!(
            header,
            r#"{"__metadata__":{"format":"pt"},"A":{"dtype":"F32","shape":[],"data_offsets":[0,4]}}"#
        );
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn bf16_payload_is_bit_identical_after_round_trip() {
        let raw: Vec<u8> = [0x3F80u16, 0x7FC1, 0x0001, 0xFF80]
            .iter()
            .flat_map(|b| b.to_le_bytes())
            .collect();
        let mut c = Checkpoint::new();
        c.insert("x", Tensor::new(Dtype::BF16, vec![2, 2], raw.clone()).unwrap())
            .unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.get("x").unwrap().data(), &raw[..]);
    }

    #[test]
    fn rejects_declared_header_longer_than_file() {
        let mut bytes = hand_built();
        bytes[..8].copy_from_slice(&10_000u64.to_le_bytes());
        assert!(matches!(format_err(&bytes), FormatError::Truncated(_)));
        assert!(matches!(format_err(&[1, 2, 3]), FormatError::Truncated(_)));
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(format_err(&with_header("{not json", &[])), FormatError::Header(_)));
        assert!(matches!(format_err(&with_header("[1,2]", &[])), FormatError::Header(_)));
        assert!(matches!(
            format_err(&with_header(
                r#"{"w":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#,
                &[0]
            )),
            FormatError::UnknownDtype(d) if d == "I8"
        ));
        assert!(matches!(
            format_err(&with_header(
                r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &[0; 8]
            )),
            FormatError::DuplicateTensor(n) if n == "w"
        ));
        assert!(matches!(
            format_err(&with_header(
                r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
                &[0; 4]
            )),
            FormatError::OffsetsOutOfRange(_)
        ));
        assert!(matches!(
            format_err(&with_header(
                r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}}"#,
                &[0; 8]
            )),
            FormatError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn rejects_overlapping_offsets() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        assert!(matches!(
            format_err(&with_header(header, &[0; 12])),
            FormatError::Overlap(_, _)
        ));
    }

    #[test]
    fn non_canonical_layout_is_canonicalized() {
        // payloads stored in reverse order with a gap
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[8,12]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let mut data = 2.0f32.to_le_bytes().to_vec();
        data.extend_from_slice(&[9; 4]);
        data.extend_from_slice(&1.0f32.to_le_bytes());
        let c = Checkpoint::from_bytes(&with_header(header, &data)).unwrap();
        assert_eq!(c.get("a").unwrap().to_f32(), [1.0]);
        assert_eq!(c.get("b").unwrap().to_f32(), [2.0]);
        let canon = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&canon).unwrap().to_bytes(), canon);
    }

    #[test]
    fn reserved_and_duplicate_names_are_refused() {
        let mut c = Checkpoint::new();
        assert!(c.insert(METADATA_KEY, f32_tensor(vec![1], &[0.0])).is_err());
        c.insert("x", f32_tensor(vec![1], &[0.0])).unwrap();
        assert!(c.insert("x", f32_tensor(vec![1], &[1.0])).is_err());
        c.put("x", f32_tensor(vec![1], &[1.0])).unwrap();
        assert_eq!(c.get("x").unwrap().to_f32(), [1.0]);
    }

    #[test]
    fn tensor_length_is_checked() {
        assert!(Tensor::new(Dtype::F16, vec![3], vec![0; 4]).is_err());
        assert!(Tensor::from_f32(Dtype::F32, vec![2, 2], &[0.0; 3]).is_err());
        let empty = Tensor::new(Dtype::F32, vec![0, 5], vec![]).unwrap();
        assert_eq!(empty.numel(), 0);
    }

    #[test]
    fn file_reader_matches_eager_parse_and_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::new();
        c.insert("z", Tensor::from_f32(Dtype::F16, vec![3], &[1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        c.insert("a", f32_tensor(vec![2, 1], &[4.0, 5.0])).unwrap();
        let path = dir.path().join("c.safetensors");
        let fp = write_checkpoint(&c, &path).unwrap();
        assert_eq!(fp, c.fingerprint());

        let reader = CheckpointReader::open(&path).unwrap();
        assert_eq!(reader.fingerprint().unwrap(), fp);
        assert_eq!(reader.read_f32("z").unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(reader.load().unwrap(), c);
        assert_eq!(std::fs::read(&path).unwrap(), c.to_bytes());
        assert!(reader.read_raw("missing").is_err());
    }

    #[test]
    fn writer_enforces_order_and_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let table = vec![
            ("b".to_string(), Dtype::F32, vec![1]),
            ("a".to_string(), Dtype::F32, vec![1]),
        ];
        let mut w = CheckpointWriter::create(&path, table.clone(), None).unwrap();
        assert!(w.write_tensor("b", &[0; 4]).is_err());
        assert!(w.write_tensor("a", &[0; 3]).is_err());
        w.write_tensor("a", &[0; 4]).unwrap();
        let w2 = CheckpointWriter::create(&path, table, None).unwrap();
        assert!(w2.finish().is_err());
        assert!(CheckpointWriter::create(dir.path().join("no/such/dir"), vec![], None).is_err());
    }
}
