//! JSON header of the container: canonical encoding and strict parsing.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{Deserializer, IgnoredAny, MapAccess, Visitor};
use serde::Deserialize;

use super::{Dtype, TensorMeta, METADATA_KEY};
use crate::error::FormatError;

/// Encodes the header with sorted names, no insignificant whitespace and the
/// field order `dtype`, `shape`, `data_offsets`. `metas` must already be sorted.
pub(crate) fn encode(metas: &[TensorMeta], metadata: Option<&BTreeMap<String, String>>) -> Vec<u8> {
    let mut out = String::with_capacity(64 + metas.len() * 96);
    out.push('{');
    let mut first = true;
    if let Some(md) = metadata {
        out.push_str(&json_string(METADATA_KEY));
        out.push_str(":{");
        for (i, (k, v)) in md.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&json_string(k));
            out.push(':');
            out.push_str(&json_string(v));
        }
        out.push('}');
        first = false;
    }
    for meta in metas {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&json_string(&meta.name));
        out.push_str(":{\"dtype\":\"");
        out.push_str(meta.dtype.as_str());
        out.push_str("\",\"shape\":[");
        for (i, d) in meta.shape.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&d.to_string());
        }
        out.push_str("],\"data_offsets\":[");
        out.push_str(&meta.data_offsets.0.to_string());
        out.push(',');
        out.push_str(&meta.data_offsets.1.to_string());
        out.push_str("]}");
    }
    out.push('}');
    out.into_bytes()
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

#[derive(Debug)]
pub(crate) struct ParsedHeader {
    pub metas: Vec<TensorMeta>,
    pub metadata: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

struct HeaderVisitor;

enum HeaderItem {
    Metadata(BTreeMap<String, String>),
    Tensor(String, RawEntry),
}

struct RawHeader {
    items: Vec<HeaderItem>,
    duplicate: Option<String>,
}

impl<'de> Visitor<'de> for HeaderVisitor {
    type Value = RawHeader;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON object mapping tensor names to entries")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
        let mut seen = std::collections::HashSet::new();
        let mut items = Vec::new();
        let mut duplicate = None;
        while let Some(key) = map.next_key::<String>()? {
            if !seen.insert(key.clone()) {
                duplicate.get_or_insert(key);
                map.next_value::<IgnoredAny>()?;
                continue;
            }
            if key == METADATA_KEY {
                items.push(HeaderItem::Metadata(map.next_value()?));
            } else {
                let entry: RawEntry = map.next_value()?;
                items.push(HeaderItem::Tensor(key, entry));
            }
        }
        Ok(RawHeader { items, duplicate })
    }
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_map(HeaderVisitor)
    }
}

/// Parses and validates a header against a data region of `data_len` bytes.
pub(crate) fn parse(bytes: &[u8], data_len: u64) -> Result<ParsedHeader, FormatError> {
    let raw: RawHeader =
        serde_json::from_slice(bytes).map_err(|e| FormatError::Header(e.to_string()))?;
    if let Some(name) = raw.duplicate {
        return Err(if name == METADATA_KEY {
            FormatError::Header(format!("{METADATA_KEY} appears more than once"))
        } else {
            FormatError::DuplicateTensor(name)
        });
    }

    let mut metadata = None;
    let mut metas = Vec::new();
    for item in raw.items {
        match item {
            HeaderItem::Metadata(md) => metadata = Some(md),
            HeaderItem::Tensor(name, entry) => {
                let dtype: Dtype = entry.dtype.parse()?;
                let [begin, end] = entry.data_offsets;
                if begin > end || end > data_len {
                    return Err(FormatError::OffsetsOutOfRange(name));
                }
                let expected = byte_len(dtype, &entry.shape).ok_or_else(|| {
                    FormatError::Header(format!("tensor {name:?}: shape overflows"))
                })?;
                if end - begin != expected {
                    return Err(FormatError::LengthMismatch {
                        name,
                        expected,
                        actual: end - begin,
                    });
                }
                metas.push(TensorMeta {
                    name,
                    dtype,
                    shape: entry.shape,
                    data_offsets: (begin, end),
                });
            }
        }
    }

    let mut by_offset: Vec<&TensorMeta> =
        metas.iter().filter(|m| m.data_offsets.0 < m.data_offsets.1).collect();
    by_offset.sort_by_key(|m| m.data_offsets);
    for pair in by_offset.windows(2) {
        if pair[0].data_offsets.1 > pair[1].data_offsets.0 {
            return Err(FormatError::Overlap(pair[0].name.clone(), pair[1].name.clone()));
        }
    }

    metas.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(ParsedHeader { metas, metadata })
}

pub(crate) fn byte_len(dtype: Dtype, shape: &[usize]) -> Option<u64> {
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))?
        .checked_mul(dtype.element_size() as u64)
}
