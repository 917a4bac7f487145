//! EMB1 binary and EMB1-JSON embedding files.
//!
//! Binary layout: `b"EMB1"`, u32 LE count, u32 LE dim, then per entry a u64
//! LE id followed by `dim` f32 LE values. Entries are written in id order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::manifest::{canonical_string, write_atomic};
use crate::scalar::{cast, Scalar};

const MAGIC: &[u8; 4] = b"EMB1";
const JSON_TAG: &str = "EMB1-JSON";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Json,
}

impl EmbeddingFormat {
    /// `.json` selects the mirror format, anything else the binary one.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => EmbeddingFormat::Json,
            _ => EmbeddingFormat::Binary,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonEntry {
    id: u64,
    vector: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonFile {
    format: String,
    #[serde(default = "default_kind")]
    kind: EmbeddingKind,
    dim: usize,
    entries: Vec<JsonEntry>,
}

fn default_kind() -> EmbeddingKind {
    EmbeddingKind::Image
}

pub fn encode_binary<T: Scalar>(table: &EmbeddingTable<T>) -> Result<Vec<u8>> {
    let count = u32::try_from(table.len())
        .map_err(|_| Error::InvalidParameter("too many embeddings for EMB1".into()))?;
    let dim = u32::try_from(table.dim())
        .map_err(|_| Error::InvalidParameter("dimension too large for EMB1".into()))?;
    let mut out = Vec::with_capacity(12 + table.len() * (8 + 4 * table.dim()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for (id, v) in table.iter() {
        out.extend_from_slice(&id.to_le_bytes());
        for x in v {
            out.extend_from_slice(&(x.to_f64_lossless() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::parse(path, "truncated EMB1 file"))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn decode_binary<T: Scalar>(
    bytes: &[u8],
    kind: EmbeddingKind,
    path: &Path,
) -> Result<EmbeddingTable<T>> {
    let mut at = 0;
    if take(bytes, &mut at, 4, path)? != MAGIC {
        return Err(Error::parse(path, "bad magic, expected EMB1"));
    }
    let u32_at = |at: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(bytes, at, 4, path)?.try_into().unwrap()))
    };
    let count = u32_at(&mut at)? as usize;
    let dim = u32_at(&mut at)? as usize;
    let mut table = EmbeddingTable::new(dim, kind)?;
    for _ in 0..count {
        let id = u64::from_le_bytes(take(bytes, &mut at, 8, path)?.try_into().unwrap());
        let raw = take(bytes, &mut at, 4 * dim, path)?;
        let v: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| cast::<T>(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect();
        if table.get(id).is_some() {
            return Err(Error::DuplicateId {
                what: "embedding",
                id,
            });
        }
        table.insert(id, v)?;
    }
    if at != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after EMB1 entries"));
    }
    Ok(table)
}

pub fn encode_json<T: Scalar>(table: &EmbeddingTable<T>) -> Result<String> {
    let file = JsonFile {
        format: JSON_TAG.into(),
        kind: table.kind(),
        dim: table.dim(),
        entries: table
            .iter()
            .map(|(id, v)| JsonEntry {
                id,
                vector: v.iter().map(|x| x.to_f64_lossless() as f32).collect(),
            })
            .collect(),
    };
    canonical_string(&file)
}

pub fn decode_json<T: Scalar>(text: &str, path: &Path) -> Result<EmbeddingTable<T>> {
    let file: JsonFile = serde_json::from_str(text).map_err(|e| Error::parse(path, e))?;
    if file.format != JSON_TAG {
        return Err(Error::parse(path, format!("format tag {:?}", file.format)));
    }
    let mut entries = BTreeMap::new();
    for e in file.entries {
        let v: Vec<T> = e.vector.iter().map(|&x| cast::<T>(f64::from(x))).collect();
        if entries.insert(e.id, v).is_some() {
            return Err(Error::DuplicateId {
                what: "embedding",
                id: e.id,
            });
        }
    }
    let table = EmbeddingTable::from_parts(file.dim, file.kind, entries);
    if file.dim == 0 {
        return Err(Error::InvalidParameter("embedding dim must be positive".into()));
    }
    table.validate()?;
    Ok(table)
}

/// Reads either format, sniffing the magic bytes. Binary files carry no
/// kind; `kind` is assigned to them.
pub fn read_embeddings<T: Scalar>(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingTable<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes, kind, path)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(path, e))?;
        decode_json(text, path)
    }
}

pub fn write_embeddings<T: Scalar>(
    table: &EmbeddingTable<T>,
    path: &Path,
    format: EmbeddingFormat,
) -> Result<()> {
    let bytes = match format {
        EmbeddingFormat::Binary => encode_binary(table)?,
        EmbeddingFormat::Json => encode_json(table)?.into_bytes(),
    };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_table() -> EmbeddingTable<f32> {
        let mut t = EmbeddingTable::new(3, EmbeddingKind::Image).unwrap();
        t.insert_normalized(7, vec![1.0, 2.0, 3.0]).unwrap();
        t.insert_normalized(2, vec![0.0, -1.0, 0.5]).unwrap();
        t
    }

    #[test]
    fn binary_layout() {
        let bytes = encode_binary(&sample_table()).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // First entry is the smaller id.
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 12 + 2 * (8 + 12));
    }

    #[test]
    fn truncated_and_non_unit_rejected() {
        let p = Path::new("mem");
        let bytes = encode_binary(&sample_table()).unwrap();
        assert!(decode_binary::<f32>(&bytes[..bytes.len() - 1], EmbeddingKind::Image, p).is_err());
        let mut bad = bytes.clone();
        // Halve the first component of the first vector.
        let x = f32::from_le_bytes(bad[20..24].try_into().unwrap());
        bad[20..24].copy_from_slice(&(x * 0.5 + 0.3).to_le_bytes());
        assert!(matches!(
            decode_binary::<f32>(&bad, EmbeddingKind::Image, p),
            Err(Error::NotUnitNorm { .. })
        ));
    }

    #[test]
    fn file_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample_table();
        for name in ["e.emb", "e.json"] {
            let path = dir.path().join(name);
            write_embeddings(&t, &path, EmbeddingFormat::for_path(&path)).unwrap();
            let back: EmbeddingTable<f32> = read_embeddings(&path, EmbeddingKind::Image).unwrap();
            assert_eq!(back, t);
        }
    }

    proptest! {
        #[test]
        fn binary_and_json_agree(vs in proptest::collection::btree_map(any::<u64>(), proptest::collection::vec(-1.0f32..1.0, 4), 1..10)) {
            let mut t = EmbeddingTable::<f32>::new(4, EmbeddingKind::Text).unwrap();
            for (id, v) in vs {
                if v.iter().all(|x| x.abs() < 1e-3) { continue; }
                t.insert_normalized(id, v).unwrap();
            }
            let p = Path::new("mem");
            let b: EmbeddingTable<f32> = decode_binary(&encode_binary(&t).unwrap(), EmbeddingKind::Text, p).unwrap();
            let j: EmbeddingTable<f32> = decode_json(&encode_json(&t).unwrap(), p).unwrap();
            prop_assert_eq!(&b, &t);
            prop_assert_eq!(&j, &t);
        }
    }
}
