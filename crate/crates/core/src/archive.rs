//! The SPTQ tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   "SPTQ"
//! offset 4   version: u32 = 1
//! offset 8   header_len: u64
//! offset 16  header: UTF-8 JSON, header_len bytes
//!            zero padding up to the next multiple of 64
//! payload    tensor bytes; each byte_offset (relative to payload start) is a
//!            multiple of 64, gaps zero-filled
//! ```
//!
//! The header maps tensor name to `{"byte_len","byte_offset","dtype","shape"}`.
//! An optional `"__metadata__"` entry holds a string-to-string map. Keys are
//! sorted and the JSON carries no whitespace, so saving the same map twice
//! produces identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};

pub const MAGIC: [u8; 4] = *b"SPTQ";
pub const VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = 16;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    byte_len: u64,
    byte_offset: u64,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) {
    match t.data() {
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::I8(v) | TensorData::I4(v) => out.extend(v.iter().map(|&x| x as u8)),
    }
}

/// Header object that preserves key order and rejects duplicate names, which
/// a plain map deserializer would silently collapse.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }
        d.deserialize_map(V)
    }
}

impl Archive {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            if name.is_empty() {
                return Err(Error::invalid("tensor names must be non-empty"));
            }
            if name == METADATA_KEY {
                return Err(Error::invalid(format!("tensor name {METADATA_KEY:?} is reserved")));
            }
            payload.resize(align_up(payload.len()), 0);
            let start = payload.len();
            tensor_bytes(t, &mut payload);
            let entry = Entry {
                byte_len: (payload.len() - start) as u64,
                byte_offset: start as u64,
                dtype: t.dtype().name().to_string(),
                shape: t.shape().to_vec(),
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
        }
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("metadata serializes"),
            );
        }
        // serde_json's default Map is ordered by key
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(align_up(PREAMBLE + header.len()) + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Decode an archive. `path` is used only for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let p = || path.to_path_buf();
        let truncated = |what: &str| Error::Truncated {
            path: p(),
            what: what.to_string(),
        };
        if bytes.len() < PREAMBLE {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic {
                    path: p(),
                    found: bytes[..4].try_into().unwrap(),
                });
            }
            return Err(truncated("file shorter than the 16-byte preamble"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { path: p(), found: magic });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: p(),
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| truncated("header extends past end of file"))?;
        let header_err = |reason: String| Error::Header { path: p(), reason };

        let raw: RawHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| header_err(e.to_string()))?;
        let payload_start = align_up(header_end);
        let payload = bytes.get(payload_start..).unwrap_or(&[]);

        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in raw.0 {
            if !seen.insert(name.clone()) {
                return Err(header_err(format!("duplicate tensor name {name:?}")));
            }
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| header_err(format!("{METADATA_KEY}: {e}")))?;
                continue;
            }
            if name.starts_with("__") {
                continue;
            }
            let entry: Entry = serde_json::from_value(value)
                .map_err(|e| header_err(format!("entry {name:?}: {e}")))?;
            entries.push((name, entry));
        }

        let mut ranges: Vec<(u64, u64, &str)> = entries
            .iter()
            .map(|(n, e)| (e.byte_offset, e.byte_offset.saturating_add(e.byte_len), n.as_str()))
            .collect();
        ranges.sort();
        let mut furthest: Option<(u64, &str)> = None;
        for &(start, end, name) in ranges.iter().filter(|r| r.0 < r.1) {
            if let Some((prev_end, prev)) = furthest {
                if start < prev_end {
                    return Err(Error::OverlappingRanges {
                        path: p(),
                        first: prev.to_string(),
                        second: name.to_string(),
                    });
                }
            }
            if furthest.is_none_or(|(e, _)| end > e) {
                furthest = Some((end, name));
            }
        }

        let mut tensors = BTreeMap::new();
        for (name, e) in entries {
            let dtype = DType::parse(&e.dtype)
                .ok_or_else(|| header_err(format!("entry {name:?}: unknown dtype {:?}", e.dtype)))?;
            let numel: usize = e.shape.iter().product();
            if numel as u64 * dtype.size() as u64 != e.byte_len {
                return Err(header_err(format!(
                    "entry {name:?}: byte_len {} does not match shape {:?} of {}",
                    e.byte_len, e.shape, e.dtype
                )));
            }
            let start = e.byte_offset as usize;
            let raw = payload
                .get(start..start + e.byte_len as usize)
                .ok_or_else(|| truncated(&format!("payload of {name:?} extends past end of file")))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::I8 => TensorData::I8(raw.iter().map(|&b| b as i8).collect()),
                DType::I4 => TensorData::I4(raw.iter().map(|&b| b as i8).collect()),
            };
            let t = Tensor::from_data(e.shape, data)
                .map_err(|err| header_err(format!("entry {name:?}: {err}")))?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_archive(tensors: &BTreeMap<String, Tensor>, path: impl AsRef<Path>) -> Result<()> {
    Archive {
        tensors: tensors.clone(),
        metadata: BTreeMap::new(),
    }
    .save(path)
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    Ok(Archive::load(path)?.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.sptq")
    }

    fn header_of(bytes: &[u8]) -> &str {
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        std::str::from_utf8(&bytes[16..16 + len]).unwrap()
    }

    /// Assemble a raw archive with an arbitrary header for negative tests.
    fn raw(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = b"SPTQ".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn empty_archive() {
        let bytes = Archive::default().to_bytes().unwrap();
        assert_eq!(header_of(&bytes), "{}");
        assert_eq!(bytes.len(), 64);
        assert_eq!(Archive::from_bytes(&bytes, p()).unwrap(), Archive::default());
    }

    #[test]
    fn single_tensor_layout() {
        let t = Tensor::new([2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let a = Archive::new(BTreeMap::from([("w".to_string(), t)]));
        let bytes = a.to_bytes().unwrap();
        assert_eq!(
            header_of(&bytes),
            r#"{"w":{"byte_len":16,"byte_offset":0,"dtype":"f32","shape":[2,2]}}"#
        );
        // 16-byte preamble + 66-byte header, padded to 128, then the payload
        assert_eq!(bytes.len(), 128 + 16);
        assert_eq!(Archive::from_bytes(&bytes, p()).unwrap(), a);
    }

    #[test]
    fn tensors_are_aligned() {
        let a = Archive::new(BTreeMap::from([
            ("a".to_string(), Tensor::new([3], vec![1.0; 3]).unwrap()),
            ("b".to_string(), Tensor::from_data([5], TensorData::I4(vec![1, -7, 7, 0, 3])).unwrap()),
            ("c".to_string(), Tensor::from_data([2], TensorData::I8(vec![-127, 127])).unwrap()),
        ]));
        let bytes = a.to_bytes().unwrap();
        let h: serde_json::Value = serde_json::from_str(header_of(&bytes)).unwrap();
        assert_eq!(h["b"]["byte_offset"], 64);
        assert_eq!(h["c"]["byte_offset"], 128);
        assert_eq!(Archive::from_bytes(&bytes, p()).unwrap(), a);
    }

    #[test]
    fn metadata_roundtrip() {
        let mut a = Archive::default();
        a.metadata.insert("config".into(), "W8A8".into());
        let back = Archive::from_bytes(&a.to_bytes().unwrap(), p()).unwrap();
        assert_eq!(back.metadata["config"], "W8A8");
    }

    #[test]
    fn unknown_keys_ignored() {
        let header = r#"{"__extra__":[1,2],"w":{"byte_len":4,"byte_offset":0,"dtype":"f32","note":"x","shape":[1]}}"#;
        let a = Archive::from_bytes(&raw(header, &2.0f32.to_le_bytes()), p()).unwrap();
        assert_eq!(a.tensors["w"].f32(), &[2.0]);
    }

    #[test]
    fn distinct_errors() {
        let good = Archive::new(BTreeMap::from([(
            "w".to_string(),
            Tensor::new([2], vec![1.0, 2.0]).unwrap(),
        )]))
        .to_bytes()
        .unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad, p()), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            Archive::from_bytes(&bad, p()),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        assert!(matches!(
            Archive::from_bytes(&good[..good.len() - 1], p()),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(Archive::from_bytes(&good[..10], p()), Err(Error::Truncated { .. })));

        let header = r#"{"a":{"byte_len":8,"byte_offset":0,"dtype":"f32","shape":[2]},"b":{"byte_len":8,"byte_offset":4,"dtype":"f32","shape":[2]}}"#;
        assert!(matches!(
            Archive::from_bytes(&raw(header, &[0; 12]), p()),
            Err(Error::OverlappingRanges { .. })
        ));

        let header = r#"{"a":{"byte_len":4,"byte_offset":0,"dtype":"f32","shape":[1]},"a":{"byte_len":4,"byte_offset":0,"dtype":"f32","shape":[1]}}"#;
        let err = Archive::from_bytes(&raw(header, &[0; 4]), p()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let header = r#"{"a":{"byte_len":8,"byte_offset":0,"dtype":"f32","shape":[1]}}"#;
        assert!(matches!(
            Archive::from_bytes(&raw(header, &[0; 8]), p()),
            Err(Error::Header { .. })
        ));

        let header = r#"{"a":{"byte_len":1,"byte_offset":0,"dtype":"i8","shape":[1]}}"#;
        assert!(Archive::from_bytes(&raw(header, &[0x80]), p()).is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let a = Archive::new(BTreeMap::from([
            ("z".to_string(), Tensor::new([1], vec![1.0]).unwrap()),
            ("a".to_string(), Tensor::new([2], vec![3.0, 4.0]).unwrap()),
        ]));
        assert_eq!(a.to_bytes().unwrap(), a.clone().to_bytes().unwrap());
    }
}
