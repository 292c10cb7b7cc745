//! Raw little-endian `f64` files. Row-major matrices, no header; shape
//! lives in the JSON manifest next to the file.

use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_f64(path: &Path, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_f64(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let mut f = std::fs::File::open(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() != expected_len * 8 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            why: format!("expected {} f64 values, file holds {} bytes", expected_len, buf.len()),
        });
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.f64");
        let data = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25];
        write_f64(&path, &data).unwrap();
        let back = read_f64(&path, data.len()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(read_f64(&path, 4).is_err());
    }
}
