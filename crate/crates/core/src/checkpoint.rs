//! Binary checkpoint of named tensors.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! "BNNCKPT1" count
//! count × (name_len name_bytes rank extent* value*)
//! ```
//!
//! Values are IEEE-754 little-endian doubles in row-major order.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BNNCKPT1";

pub fn encode(records: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::from(&MAGIC[..]);
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate record {name:?}")));
        }
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut c = Cursor { bytes, pos: MAGIC.len() };
    let count = c.usize()?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.usize()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate record {name:?}")));
        }
        let rank = c.usize()?;
        let shape = (0..rank).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format("extent overflow".into()))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(records)?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<(String, Tensor)> {
        vec![
            ("layer0.weight.loc".into(), Tensor::matrix(2, 3, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1]).unwrap()),
            ("adam.step".into(), Tensor::scalar(42.0)),
            ("v".into(), Tensor::vector(vec![])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        save_checkpoint(&p, &records()).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in records().iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let a: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn byte_layout() {
        let b = encode(&[("ab".into(), Tensor::vector(vec![1.0]))]).unwrap();
        let mut want = b"BNNCKPT1".to_vec();
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_bad_input() {
        let good = encode(&records()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(m)) if m.contains("magic")));
        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Format(m)) if m.contains("truncated")));
        let dup = vec![("a".to_string(), Tensor::scalar(1.0)), ("a".to_string(), Tensor::scalar(2.0))];
        assert!(encode(&dup).is_err());
        let mut forged = encode(&[("a".to_string(), Tensor::scalar(1.0))]).unwrap();
        forged[8..16].copy_from_slice(&2u64.to_le_bytes());
        forged.extend_from_slice(&encode(&[("a".to_string(), Tensor::scalar(1.0))]).unwrap()[16..]);
        assert!(matches!(decode(&forged), Err(Error::Format(m)) if m.contains("duplicate")));
    }
}
