//! `NFBK` checkpoint files.
//!
//! Layout (all integers u32 little-endian): magic `NFBK`, version, then
//! records until end of file: name length, UTF-8 name, rank, one u32 per
//! dimension, and the f64 little-endian payload in row-major order.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NFBK";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: String| Error::data(origin, m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing NFBK magic".into()));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u32().ok_or_else(|| bad("truncated record".into()))? as usize;
        let name = r
            .take(n)
            .ok_or_else(|| bad("truncated name".into()))
            .and_then(|b| {
                String::from_utf8(b.to_vec()).map_err(|_| bad("name is not UTF-8".into()))
            })?;
        let rank = r.u32().ok_or_else(|| bad(format!("{name}: missing rank")))?;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad(format!("{name}: truncated dims")))?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(bad(format!("{name}: rank {rank} not supported"))),
        };
        let payload = r
            .take(rows * cols * 8)
            .ok_or_else(|| bad(format!("{name}: truncated payload")))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(rows, cols, data)));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let records: Vec<(String, &Tensor)> = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id)))
        .collect();
    fs::write(path, encode(&records)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Overwrite every entry of `store` with the record of the same name.
/// Missing names or shape disagreements are errors; extra records are ignored.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let records = read(path)?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (_, t) = records
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::data(path, format!("checkpoint has no record {name}")))?;
        if t.shape() != store.value(id).shape() {
            return Err(Error::data(
                path,
                format!(
                    "record {name} has shape {}, expected {}",
                    t.shape(),
                    store.value(id).shape()
                ),
            ));
        }
        store.set(id, t.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("fg.0.w", Tensor::new(2, 3, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]));
        store.add("density_scale", Tensor::scalar(1.0 / 3.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nfbk");
        save(&store, &path).unwrap();
        let mut other = store.clone();
        other.set(ParamId(0), Tensor::zeros(2, 3));
        load_into(&mut other, &path).unwrap();
        assert!(store.bit_identical(&other));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::scalar(2.0);
        let bytes = encode(&[("x".to_string(), &t)]);
        assert_eq!(&bytes[..4], b"NFBK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'x');
        assert_eq!(bytes.len(), 4 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let t = Tensor::scalar(2.0);
        let bytes = encode(&[("x".to_string(), &t)]);
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("t.nfbk")).is_err());
        assert!(decode(b"NOPE", Path::new("t.nfbk")).is_err());
    }

    use super::super::ParamId;
}
