//! The PFMK mask container.
//!
//! ```text
//! magic        "PFMK"
//! version      u16            (currently 1)
//! provenance   32 bytes       SHA-256 of the source checkpoint
//! scope        u8             0 = group_wise, 1 = global
//! selector     u8             0 smallest, 1 largest, 2 middle, 3 random, 4 diff, 5 fisher, 6 mode
//! tune_norm    u8             0 or 1
//! tune_embed   u8             0 or 1
//! sparsity     f64
//! seed         u64
//! group_count  u32
//! per group:
//!   name_len   u32
//!   name       UTF-8 bytes
//!   size       u64            parameter count of the group
//!   count      u64            number of selected indices
//!   deltas     count × LEB128 first index, then gaps to the previous index
//! crc32        u32            IEEE CRC-32 of every preceding byte
//! ```
//!
//! Fixed-width integers are little-endian.

use std::fs;
use std::path::Path;

use super::{GroupMask, MaskPolicy, Scope, Selector, SparseMask};
use crate::checkpoint::{header_err, Reader};
use crate::error::{LoadError, Result};

pub const MASK_MAGIC: [u8; 4] = *b"PFMK";
pub const MASK_VERSION: u16 = 1;

fn put_varint(buf: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

fn get_varint(r: &mut Reader<'_>) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = r.take(1, "index delta", true)?[0];
        let bits = u64::from(byte & 0x7f);
        if shift == 63 && bits > 1 {
            break;
        }
        v |= bits << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(LoadError::CorruptPayload("varint overflows u64".into()).into())
}

pub fn encode_mask(mask: &SparseMask) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + mask.selected() * 2);
    buf.extend_from_slice(&MASK_MAGIC);
    buf.extend_from_slice(&MASK_VERSION.to_le_bytes());
    buf.extend_from_slice(&mask.provenance);
    buf.push(mask.scope.code());
    buf.push(mask.selector.code());
    buf.push(mask.policy.tune_norm as u8);
    buf.push(mask.policy.tune_embed as u8);
    buf.extend_from_slice(&mask.sparsity.to_le_bytes());
    buf.extend_from_slice(&mask.seed.to_le_bytes());
    buf.extend_from_slice(&(mask.groups.len() as u32).to_le_bytes());
    for g in &mask.groups {
        buf.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(g.name.as_bytes());
        buf.extend_from_slice(&g.size.to_le_bytes());
        buf.extend_from_slice(&(g.indices.len() as u64).to_le_bytes());
        let mut prev = 0;
        for &i in &g.indices {
            put_varint(&mut buf, i - prev);
            prev = i;
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn flag(r: &mut Reader<'_>, what: &str) -> Result<bool> {
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(header_err(format!("{what} must be 0 or 1, got {other}"))),
    }
}

pub fn decode_mask(bytes: &[u8]) -> Result<SparseMask> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4, "magic", false)?.try_into().unwrap();
    if magic != MASK_MAGIC {
        return Err(LoadError::BadMagic {
            expected: MASK_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u16("version")?;
    if version != MASK_VERSION {
        return Err(LoadError::VersionMismatch {
            found: version,
            supported: MASK_VERSION,
        }
        .into());
    }
    let provenance: [u8; 32] = r.take(32, "provenance", false)?.try_into().unwrap();
    let sc = r.u8("scope")?;
    let scope = Scope::from_code(sc).ok_or_else(|| header_err(format!("unknown scope code {sc}")))?;
    let se = r.u8("selector")?;
    let selector = Selector::from_code(se).ok_or_else(|| header_err(format!("unknown selector code {se}")))?;
    let policy = MaskPolicy {
        tune_norm: flag(&mut r, "tune_norm")?,
        tune_embed: flag(&mut r, "tune_embed")?,
    };
    let sparsity = f64::from_le_bytes(r.take(8, "sparsity", false)?.try_into().unwrap());
    let seed = r.u64("seed")?;
    let count = r.u32("group count")?;
    let mut groups = Vec::new();
    for gi in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "group name", false)?)
            .map_err(|_| header_err(format!("group {gi} name is not UTF-8")))?
            .to_owned();
        let size = r.u64("group size")?;
        let n = r.u64("index count")?;
        if n > size {
            return Err(header_err(format!("group {name:?}: {n} indices for {size} parameters")));
        }
        let mut indices = Vec::with_capacity(n as usize);
        let mut prev = 0u64;
        for j in 0..n {
            let delta = get_varint(&mut r)?;
            if j > 0 && delta == 0 {
                return Err(LoadError::CorruptPayload(format!("group {name:?}: repeated index")).into());
            }
            prev = prev
                .checked_add(delta)
                .filter(|&i| i < size)
                .ok_or_else(|| LoadError::CorruptPayload(format!("group {name:?}: index out of range")))?;
            indices.push(prev);
        }
        groups.push(GroupMask { name, size, indices });
    }
    let body_end = r.pos;
    let stored = r.u32("checksum").map_err(|_| LoadError::CorruptPayload("missing checksum".into()))?;
    if r.pos != bytes.len() {
        return Err(LoadError::CorruptPayload(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(LoadError::ChecksumMismatch { stored, computed }.into());
    }
    Ok(SparseMask {
        groups,
        sparsity,
        scope,
        selector,
        policy,
        seed,
        provenance,
    })
}

pub fn serialize_mask(mask: &SparseMask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn deserialize_mask(path: impl AsRef<Path>) -> Result<SparseMask> {
    decode_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> SparseMask {
        SparseMask {
            groups: vec![
                GroupMask::new("a", 4, vec![1, 2]).unwrap(),
                GroupMask::new("bb", 300, vec![0, 200, 299]).unwrap(),
                GroupMask::new("c", 2, vec![]).unwrap(),
            ],
            sparsity: 0.5,
            scope: Scope::GroupWise,
            selector: Selector::Smallest,
            policy: MaskPolicy::default(),
            seed: 7,
            provenance: [0xab; 32],
        }
    }

    #[test]
    fn varint_round_trip() {
        for v in [0u64, 1, 127, 128, 300, 16_383, 16_384, u64::MAX] {
            let mut buf = Vec::new();
            put_varint(&mut buf, v);
            let mut r = Reader::new(&buf);
            assert_eq!(get_varint(&mut r).unwrap(), v);
            assert_eq!(r.pos, buf.len());
        }
        let mut buf = Vec::new();
        put_varint(&mut buf, 300);
        assert_eq!(buf, [0xac, 0x02]);
    }

    #[test]
    fn byte_layout_of_three_groups() {
        let mut want = Vec::new();
        want.extend_from_slice(b"PFMK");
        want.extend_from_slice(&[1, 0]);
        want.extend_from_slice(&[0xab; 32]);
        want.extend_from_slice(&[0, 0, 1, 0]);
        want.extend_from_slice(&0.5f64.to_le_bytes());
        want.extend_from_slice(&7u64.to_le_bytes());
        want.extend_from_slice(&[3, 0, 0, 0]);
        // "a": size 4, two indices 1, 2 → deltas 1, 1
        want.extend_from_slice(&[1, 0, 0, 0, b'a']);
        want.extend_from_slice(&4u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&[1, 1]);
        // "bb": size 300, indices 0, 200, 299 → deltas 0, 200, 99
        want.extend_from_slice(&[2, 0, 0, 0, b'b', b'b']);
        want.extend_from_slice(&300u64.to_le_bytes());
        want.extend_from_slice(&3u64.to_le_bytes());
        want.extend_from_slice(&[0x00, 0xc8, 0x01, 0x63]);
        // "c": empty
        want.extend_from_slice(&[1, 0, 0, 0, b'c']);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&0u64.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(encode_mask(&sample()), want);
    }

    #[test]
    fn round_trip() {
        let m = sample();
        assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = encode_mask(&sample());
        let mut flipped = bytes.clone();
        flipped[50] ^= 1;
        assert!(matches!(
            decode_mask(&flipped),
            Err(Error::Load(LoadError::ChecksumMismatch { .. }))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_mask(&v2), Err(Error::Load(LoadError::VersionMismatch { found: 2, .. }))));
        assert!(matches!(decode_mask(b"PFRG\x01\x00"), Err(Error::Load(LoadError::BadMagic { .. }))));
        assert!(decode_mask(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_mask(&bytes[..20]).is_err());
    }
}
