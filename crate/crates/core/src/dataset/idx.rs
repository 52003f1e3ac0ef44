//! Reader for the big-endian IDX container used by MNIST-style datasets.
//!
//! Layout: two zero bytes, a type code, the number of dimensions, one `u32`
//! per dimension, then the row-major payload. Only unsigned-byte payloads
//! (type `0x08`) are accepted. Gzip-compressed files are detected by their
//! magic bytes and inflated transparently.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;
const MAX_DIMS: usize = 4;
const MAX_INFLATED: u64 = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Number of records along the leading dimension.
    pub fn len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per record (product of the trailing dimensions).
    pub fn record_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn record(&self, i: usize) -> &[u8] {
        let n = self.record_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Parses an IDX buffer, inflating it first if it is gzip-compressed.
pub fn parse_idx(bytes: &[u8]) -> std::result::Result<IdxArray, String> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .take(MAX_INFLATED + 1)
            .read_to_end(&mut raw)
            .map_err(|e| format!("gzip: {e}"))?;
        if raw.len() as u64 > MAX_INFLATED {
            return Err(format!("inflated size exceeds {MAX_INFLATED} bytes"));
        }
        return parse_raw(&raw);
    }
    parse_raw(bytes)
}

fn parse_raw(bytes: &[u8]) -> std::result::Result<IdxArray, String> {
    if bytes.len() < 4 {
        return Err("truncated header".into());
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format!("bad magic {:02x}{:02x}", bytes[0], bytes[1]));
    }
    if bytes[2] != UBYTE {
        return Err(format!("unsupported element type 0x{:02x}", bytes[2]));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 || ndims > MAX_DIMS {
        return Err(format!("unsupported dimension count {ndims}"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err("truncated dimension table".into());
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for k in 0..ndims {
        let off = 4 + 4 * k;
        let d = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| "dimension product overflows".to_string())?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    if payload.len() != total {
        return Err(format!(
            "payload has {} bytes, header declares {total}",
            payload.len()
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_idx(&bytes).map_err(|reason| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    })
}

/// Serializes an unsigned-byte array in IDX layout (uncompressed).
pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample() -> IdxArray {
        IdxArray {
            dims: vec![2, 2, 3],
            data: (0..12).collect(),
        }
    }

    #[test]
    fn roundtrip_plain_and_gzip() {
        let a = sample();
        let bytes = encode_idx(&a);
        assert_eq!(parse_idx(&bytes).unwrap(), a);

        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&bytes).unwrap();
        assert_eq!(parse_idx(&gz.finish().unwrap()).unwrap(), a);
        assert_eq!(a.record(1), &[6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn rejects_malformed() {
        let mut bytes = encode_idx(&sample());
        assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx(&bytes[..6]).is_err());
        bytes[2] = 0x0d;
        assert!(parse_idx(&bytes).is_err());
        assert!(parse_idx(&[0, 0, 8, 0]).is_err());
        assert!(parse_idx(&[0, 0, 8, 2, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff]).is_err());
    }
}
