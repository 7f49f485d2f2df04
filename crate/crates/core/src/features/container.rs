//! Binary tensor container shared by embedding archives and cached feature
//! bundles.
//!
//! A file holds one or more records. Each record is a single-line JSON
//! header `{rows, cols, dtype: "f32", provider_id[, name]}` terminated by
//! `\n`, followed by `rows * cols` row-major little-endian `f32` values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub provider_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl TensorHeader {
    pub fn new(matrix: &Matrix, provider_id: &str, name: Option<&str>) -> Self {
        Self {
            rows: matrix.rows(),
            cols: matrix.cols(),
            dtype: "f32".into(),
            provider_id: provider_id.into(),
            name: name.map(str::to_string),
        }
    }
}

pub fn write_record(w: &mut impl Write, header: &TensorHeader, matrix: &Matrix) -> std::io::Result<()> {
    debug_assert_eq!((header.rows, header.cols), matrix.shape());
    let line = serde_json::to_string(header).map_err(std::io::Error::other)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for &v in matrix.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensors(path: impl AsRef<Path>, records: &[(TensorHeader, &Matrix)]) -> Result<()> {
    let path = path.as_ref();
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for (h, m) in records {
        write_record(&mut w, h, m).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_record(r: &mut impl BufRead) -> Result<Option<(TensorHeader, Matrix)>> {
    let mut line = String::new();
    let n = r
        .read_line(&mut line)
        .map_err(|e| Error::io("tensor header", e))?;
    if n == 0 {
        return Ok(None);
    }
    let header: TensorHeader = serde_json::from_str(line.trim_end()).map_err(|source| Error::Json {
        context: "tensor header".into(),
        source,
    })?;
    if header.dtype != "f32" {
        return Err(Error::invalid(format!("unsupported tensor dtype `{}`", header.dtype)));
    }
    let count = header.rows * header.cols;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::io("truncated tensor data", e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let matrix = Matrix::from_vec(header.rows, header.cols, data);
    Ok(Some((header, matrix)))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(TensorHeader, Matrix)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(rec) = read_record(&mut r)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
    {
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_values_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((i as f64 + seed as f64) * 0.37).sin() as f32 as f64)
                .collect();
            let m = Matrix::from_vec(rows, cols, data);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.emb");
            let h = TensorHeader::new(&m, "test", Some("x"));
            write_tensors(&p, &[(h.clone(), &m), (h.clone(), &m)]).unwrap();
            let back = read_tensors(&p).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, &h);
            prop_assert_eq!(&back[1].1, &m);
        }
    }

    #[test]
    fn truncated_data_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.emb");
        std::fs::write(&p, b"{\"rows\":2,\"cols\":2,\"dtype\":\"f32\",\"provider_id\":\"x\"}\n\0\0\0\0").unwrap();
        assert!(read_tensors(&p).is_err());
    }
}
