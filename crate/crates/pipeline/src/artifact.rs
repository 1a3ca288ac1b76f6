//! Binary network artifacts: an 8-byte magic, a little-endian `u32` header
//! length, a JSON header, then the parameters as little-endian floats of
//! the width named by the header's `dtype`.

use std::io::{Read, Write};
use std::path::Path;

use gsavatar_core::error::{Error, Result};
use gsavatar_core::Scalar;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn dtype_of<T>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::validation(format!("{}: {e}", path.display()))
}

/// Serialized header must contain a `dtype` field matching `T`.
pub fn write_blob<T: Scalar, H: Serialize>(path: impl AsRef<Path>, magic: &[u8; 8], header: &H, data: &[T]) -> Result<()> {
    let path = path.as_ref();
    let head = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(12 + head.len() + std::mem::size_of_val(data));
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    if dtype_of::<T>() == "f32" {
        for v in data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    } else {
        for v in data {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Reads a blob, converting the stored floats to `T`.
pub fn read_blob<T: Scalar, H: DeserializeOwned>(path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<(H, Vec<T>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    parse_blob(&bytes, magic)
}

pub fn parse_blob<T: Scalar, H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 8]) -> Result<(H, Vec<T>)> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::validation("artifact: bad magic"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let head = bytes
        .get(12..12 + n)
        .ok_or_else(|| Error::validation("artifact: truncated header"))?;
    let value: serde_json::Value = serde_json::from_slice(head)?;
    let dtype = value.get("dtype").and_then(|d| d.as_str()).unwrap_or("f64").to_string();
    let header: H = serde_json::from_value(value)?;
    let body = &bytes[12 + n..];
    let data = match dtype.as_str() {
        "f32" => body
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        "f64" => body
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        other => return Err(Error::validation(format!("artifact: unknown dtype {other}"))),
    };
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct H {
        dtype: String,
        n: usize,
    }

    #[test]
    fn round_trip_both_widths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let data = vec![1.5f64, -2.25, 1e-300];
        write_blob(&p, b"TESTBLOB", &H { dtype: dtype_of::<f64>().into(), n: 3 }, &data).unwrap();
        let (h, back): (H, Vec<f64>) = read_blob(&p, b"TESTBLOB").unwrap();
        assert_eq!(h.n, 3);
        assert_eq!(back, data);
        let as32: (H, Vec<f32>) = read_blob(&p, b"TESTBLOB").unwrap();
        assert_eq!(as32.1[0], 1.5f32);

        let small = vec![0.5f32, 3.0];
        write_blob(&p, b"TESTBLOB", &H { dtype: dtype_of::<f32>().into(), n: 2 }, &small).unwrap();
        let (_, back): (H, Vec<f64>) = read_blob(&p, b"TESTBLOB").unwrap();
        assert_eq!(back, vec![0.5, 3.0]);
        assert!(read_blob::<f64, H>(&p, b"OTHERMAG").is_err());
    }
}
