//! Portable tensor container.
//!
//! A record is the magic `OETF`, a little-endian `u32` header length, a JSON
//! header `{"dtype":"f64","shape":[..],"name":".."}` and the row-major
//! little-endian `f64` payload. A file holds one or more records back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"OETF";
const DTYPE: &str = "f64";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    name: String,
}

pub fn encode_record(name: &str, tensor: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        dtype: DTYPE.to_string(),
        shape: tensor.shape().to_vec(),
        name: name.to_string(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let len = u32::try_from(header.len()).map_err(|_| Error::Format("header too long".into()))?;
    out.reserve(8 + header.len() + 8 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    for x in tensor.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Decodes one record at the start of `bytes`; returns it with the bytes consumed.
pub fn decode_record(bytes: &[u8]) -> Result<((String, Tensor), usize)> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "truncated record: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {len} runs past the end")))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!(
            "unsupported dtype `{}`",
            header.dtype
        )));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let end = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(header_end))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "payload of {count} values for `{}` is truncated",
                header.name
            ))
        })?;
    let data = bytes[header_end..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let tensor = Tensor::new(header.shape, data)?;
    Ok(((header.name, tensor), end))
}

pub fn encode_records<S: AsRef<str>>(records: &[(S, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, t) in records {
        encode_record(name.as_ref(), t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (record, used) = decode_record(&bytes[at..])?;
        out.push(record);
        at += used;
    }
    if out.is_empty() {
        return Err(Error::Format("empty tensor file".into()));
    }
    Ok(out)
}

pub fn write_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    write_records(path, &[(name, tensor)])
}

/// Reads a single-record file.
pub fn read_tensor(path: &Path) -> Result<(String, Tensor)> {
    let mut records = read_records(path)?;
    if records.len() != 1 {
        return Err(Error::Format(format!(
            "expected one record, found {}",
            records.len()
        )));
    }
    Ok(records.remove(0))
}

pub fn write_records<S: AsRef<str>>(path: &Path, records: &[(S, &Tensor)]) -> Result<()> {
    fs::write(path, encode_records(records)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_records(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn layout_is_pinned() {
        let t = Tensor::new([2], vec![1.0, -0.5]).unwrap();
        let mut bytes = Vec::new();
        encode_record("x", &t, &mut bytes).unwrap();
        let header = br#"{"dtype":"f64","shape":[2],"name":"x"}"#;
        let mut expected = b"OETF".to_vec();
        expected.extend_from_slice(&(header.len() as u32).to_le_bytes());
        expected.extend_from_slice(header);
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_bitwise_including_nan() {
        let nan = f64::from_bits(0x7ff8_0000_dead_beef);
        let t = Tensor::new([2, 3], vec![0.0, -0.0, nan, f64::INFINITY, 1e-310, -3.25]).unwrap();
        let scalar = Tensor::scalar(7.0);
        let bytes = encode_records(&[("a", &t), ("s", &scalar)]).unwrap();
        let back = decode_records(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(bits(&back[0].1), bits(&t));
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        assert_eq!(bits(&back[1].1), bits(&scalar));
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let t = Tensor::ones([3]);
        let good = encode_records(&[("t", &t)]).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_dtype = good.clone();
        let pos = good.windows(3).position(|w| w == b"f64").unwrap();
        bad_dtype[pos + 2] = b'2';
        for bytes in [
            &good[..good.len() - 1],
            &good[..6],
            &bad_magic[..],
            &bad_dtype[..],
            &[][..],
        ] {
            assert!(matches!(decode_records(bytes), Err(Error::Format(_))));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.oetf");
        let t = Tensor::from_fn([4, 2], |i| i as f64 / 3.0);
        write_tensor(&path, "x", &t).unwrap();
        let (name, back) = read_tensor(&path).unwrap();
        assert_eq!(name, "x");
        assert_eq!(bits(&back), bits(&t));
    }
}
