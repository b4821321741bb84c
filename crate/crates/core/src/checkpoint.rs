//! The PFRG checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        "PFRG"
//! version      u16            (currently 1)
//! has_meta     u8             0 or 1
//! meta         6 × u64        vocab, max_len, hidden, layers, heads, classes (only if has_meta)
//! group_count  u32
//! per group:
//!   name_len   u32
//!   name       UTF-8 bytes
//!   role       u8             see `Role::code`
//!   dtype      u8             0 = f32, 1 = f64
//!   rank       u8
//!   dims       rank × u64
//!   payload    product(dims) values of dtype
//! crc32        u32            IEEE CRC-32 of every preceding byte
//! ```
//!
//! Groups are written in store order and nothing time-dependent is
//! recorded, so equal stores always encode to equal bytes. `f32` payloads are
//! widened to `f64` on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, LoadError, Result};
use crate::store::{ModelMeta, ParamGroup, ParameterStore, Role};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PFRG";
pub const VERSION: u16 = 1;

/// Payload width used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }
}

pub fn encode(store: &ParameterStore, precision: Precision) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + store.total_params() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    match store.meta() {
        Some(m) => {
            buf.push(1);
            for v in [m.vocab, m.max_len, m.hidden, m.layers, m.heads, m.classes] {
                buf.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for g in store.iter() {
        let name = g.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(g.role().code());
        buf.push(precision.code());
        buf.push(g.tensor().rank() as u8);
        for &d in g.tensor().shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match precision {
            Precision::F32 => {
                for &v in g.tensor().data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &v in g.tensor().data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str, payload: bool) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            let msg = format!("truncated while reading {what} at byte {}", self.pos);
            return Err(if payload {
                LoadError::CorruptPayload(msg)
            } else {
                LoadError::CorruptHeader(msg)
            }
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what, false)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what, false)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what, false)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what, false)?.try_into().unwrap()))
    }
}

pub(crate) fn header_err(msg: impl Into<String>) -> Error {
    LoadError::CorruptHeader(msg.into()).into()
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4, "magic", false)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic {
            expected: MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(LoadError::VersionMismatch {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let meta = match r.u8("meta flag")? {
        0 => None,
        1 => {
            let mut v = [0usize; 6];
            for slot in &mut v {
                *slot = usize::try_from(r.u64("meta")?).map_err(|_| header_err("meta value overflows"))?;
            }
            Some(ModelMeta {
                vocab: v[0],
                max_len: v[1],
                hidden: v[2],
                layers: v[3],
                heads: v[4],
                classes: v[5],
            })
        }
        other => return Err(header_err(format!("meta flag must be 0 or 1, got {other}"))),
    };
    let count = r.u32("group count")?;
    let mut store = ParameterStore::new(meta);
    for gi in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "group name", false)?)
            .map_err(|_| header_err(format!("group {gi} name is not UTF-8")))?
            .to_owned();
        let role_code = r.u8("role")?;
        let role = Role::from_code(role_code).ok_or_else(|| header_err(format!("group {name:?}: unknown role {role_code}")))?;
        let dtype = r.u8("dtype")?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(header_err(format!("group {name:?}: unknown dtype {other}"))),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dims")?;
            if d == 0 {
                return Err(header_err(format!("group {name:?}: zero-sized dimension")));
            }
            shape.push(usize::try_from(d).map_err(|_| header_err("dimension overflows"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| header_err(format!("group {name:?}: payload size overflows")))?;
        let payload = r.take(n, "payload", true)?;
        let data: Vec<f64> = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        } else {
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let tensor = Tensor::new(shape, data)
            .map_err(|e| LoadError::CorruptPayload(format!("group {name:?}: {e}")))?;
        let group = ParamGroup::new(name, role, tensor).map_err(|e| header_err(e.to_string()))?;
        store.push(group)?;
    }
    let body_end = r.pos;
    let stored = u32::from_le_bytes(
        r.take(4, "checksum", true)?
            .try_into()
            .unwrap(),
    );
    if r.pos != bytes.len() {
        return Err(LoadError::CorruptPayload(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(LoadError::ChecksumMismatch { stored, computed }.into());
    }
    store.validate_meta().map_err(|e| match e {
        Error::Config(msg) => header_err(msg),
        other => other,
    })?;
    Ok(store)
}

#[derive(Serialize)]
struct ManifestGroup<'a> {
    name: &'a str,
    role: Role,
    shape: &'a [usize],
    params: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u16,
    dtype: &'static str,
    meta: Option<&'a ModelMeta>,
    total_params: usize,
    groups: Vec<ManifestGroup<'a>>,
}

/// Human-readable mirror of a checkpoint's structure.
pub fn manifest_json(store: &ParameterStore, precision: Precision) -> String {
    let m = Manifest {
        format: "PFRG",
        version: VERSION,
        dtype: match precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        },
        meta: store.meta(),
        total_params: store.total_params(),
        groups: store
            .iter()
            .map(|g| ManifestGroup {
                name: g.name(),
                role: g.role(),
                shape: g.tensor().shape(),
                params: g.len(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
    s.push('\n');
    s
}

/// Path of the JSON manifest written next to a checkpoint.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store, precision))?;
    fs::write(manifest_path(path), manifest_json(store, precision))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    decode(&fs::read(path)?)
}

/// SHA-256 of the canonical (`f64`) encoding; independent of the width a
/// checkpoint happened to be saved with.
pub fn content_hash(store: &ParameterStore) -> [u8; 32] {
    Sha256::digest(encode(store, Precision::F64)).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new(None);
        s.push(ParamGroup::new("a.weight", Role::AttnWeight, Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.25]]).unwrap()).unwrap())
            .unwrap();
        s.push(ParamGroup::new("a.bias", Role::AttnBias, Tensor::vector(vec![0.1, -0.2]).unwrap()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample_store();
        assert_eq!(decode(&encode(&s, Precision::F64)).unwrap(), s);
    }

    #[test]
    fn f32_payload_widens() {
        let s = sample_store();
        let back = decode(&encode(&s, Precision::F32)).unwrap();
        assert_eq!(back.tensor("a.weight").unwrap(), s.tensor("a.weight").unwrap());
        assert_eq!(back.tensor("a.bias").unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn empty_store_encodes() {
        let s = ParameterStore::new(None);
        let bytes = encode(&s, Precision::F64);
        // magic + version + meta flag + count + crc
        assert_eq!(bytes.len(), 4 + 2 + 1 + 4 + 4);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn byte_layout_of_single_group() {
        let g = ParamGroup::new("b", Role::FfnBias, Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let s = ParameterStore::from_groups(None, [g]).unwrap();
        let bytes = encode(&s, Precision::F32);
        let mut want = Vec::new();
        want.extend_from_slice(b"PFRG");
        want.extend_from_slice(&[1, 0]);
        want.push(0);
        want.extend_from_slice(&[1, 0, 0, 0]);
        want.extend_from_slice(&[1, 0, 0, 0]);
        want.push(b'b');
        want.push(7); // ffn_bias
        want.push(0); // f32
        want.push(1); // rank
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = encode(&sample_store(), Precision::F64);
        let cut = &bytes[..bytes.len() - 12];
        assert!(matches!(decode(cut), Err(Error::Load(LoadError::CorruptPayload(_)))));
    }

    #[test]
    fn truncated_header_is_reported() {
        let bytes = encode(&sample_store(), Precision::F64);
        assert!(matches!(decode(&bytes[..5]), Err(Error::Load(LoadError::CorruptHeader(_)))));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = encode(&sample_store(), Precision::F64);
        let n = bytes.len();
        bytes[n - 6] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(Error::Load(LoadError::ChecksumMismatch { .. }))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample_store(), Precision::F64);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Load(LoadError::BadMagic { .. }))));
        let mut bytes = encode(&sample_store(), Precision::F64);
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Load(LoadError::VersionMismatch { found: 9, .. }))));
    }

    #[test]
    fn duplicate_names_on_load() {
        let g = ParamGroup::new("b", Role::FfnBias, Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let mut bytes = encode(&ParameterStore::from_groups(None, [g]).unwrap(), Precision::F64);
        // Splice a second copy of the single group into the body.
        let body = bytes[11..bytes.len() - 4].to_vec();
        bytes.truncate(bytes.len() - 4);
        bytes.extend_from_slice(&body);
        bytes[7..11].copy_from_slice(&2u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Load(LoadError::DuplicateName(_)))));
    }

    #[test]
    fn meta_mismatch_on_load() {
        let meta = ModelMeta {
            vocab: 10,
            max_len: 4,
            hidden: 8,
            layers: 1,
            heads: 2,
            classes: 2,
        };
        let g = ParamGroup::new("embeddings.word.weight", Role::Embedding, Tensor::zeros(&[11, 8])).unwrap();
        let s = ParameterStore::from_groups(Some(meta), [g]).unwrap();
        let r = decode(&encode(&s, Precision::F64));
        assert!(matches!(r, Err(Error::Load(LoadError::ShapeMetaMismatch { .. }))), "{r:?}");
    }
}
