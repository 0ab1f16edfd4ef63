//! `PATW` weight files: a magic tag, a version, named little-endian `f32`
//! tensors and a trailing CRC-32 over everything before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamStore, ParamTensor};

pub const MAGIC: &[u8; 4] = b"PATW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serialises a store, tensors in name order.
pub fn encode_weights(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.total_numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(store.len()).map_err(too_big)?.to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Store(format!("tensor name `{name}` is longer than 65535 bytes")))?;
        let ndim = u8::try_from(t.shape.len()).map_err(too_big)?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndim);
        for &d in &t.shape {
            out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn too_big<E>(_: E) -> Error {
    Error::Store("store is too large for the weight format".into())
}

/// Parses a weight file. Checks run in order: magic, CRC, version, records.
pub fn decode_weights(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::CrcMismatch {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let ndim = usize::from(r.u8()?);
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("tensor `{name}` is too large")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Malformed(format!("tensor `{name}` is too large")))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        if store.insert(name.clone(), ParamTensor { shape, data }).is_some() {
            return Err(Error::Malformed(format!("tensor `{name}` appears twice")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    Ok(store)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Malformed(format!("record runs past the end of the file at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_weights(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a file and checks its tensors against the unfused or fused layout of `spec`.
pub fn load_weights_for(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ParamStore> {
    let store = load_weights(path)?;
    store.check_layout(&spec.param_layout(store.looks_fused()))?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", ParamTensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        s
    }

    #[test]
    fn single_tensor_layout() {
        let bytes = encode_weights(&single()).unwrap();
        // 4 + 4 + 4 + (2 + 1) + 1 + 1 + 2 * 4 + 6 * 4 + 4
        assert_eq!(bytes.len(), 53);
        // Frozen from an independent encoder (Python struct + zlib.crc32).
        let want = concat!(
            "504154570100000001000000010061000202000000030000",
            "00000000000000803f000000400000404000008040",
            "0000a04003d6bd48",
        );
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, want);
        assert_eq!(decode_weights(&bytes).unwrap(), single());
    }

    #[test]
    fn each_failure_has_its_own_diagnostic() {
        let bytes = encode_weights(&single()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_weights(&bytes[..40]), Err(Error::CrcMismatch { .. })));
        assert!(matches!(decode_weights(&bytes[..6]), Err(Error::CrcMismatch { .. })));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode_weights(&flipped), Err(Error::CrcMismatch { .. })));
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_weights(&v2), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn empty_store() {
        let bytes = encode_weights(&ParamStore::new()).unwrap();
        assert_eq!(bytes.len(), 16);
        assert!(decode_weights(&bytes).unwrap().is_empty());
    }
}
