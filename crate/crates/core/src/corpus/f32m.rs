//! `F32M` matrices: `"F32M"`, u32 LE rows, u32 LE cols, then `rows * cols`
//! little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::ManifestEntry;
use crate::frontend::FeatureMatrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"F32M";

pub fn encode_f32m(m: ArrayView2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32m(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing F32M header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[12..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("F32M dimensions {rows}x{cols} overflow")))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "F32M header says {rows}x{cols} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite value at row {}, col {}",
            i / cols.max(1),
            i % cols.max(1)
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn read_f32m(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32m(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_f32m(path: &Path, m: ArrayView2<f32>) -> Result<()> {
    std::fs::write(path, encode_f32m(m)).map_err(|e| Error::io(path, e))
}

/// Read a per-utterance feature file; every row counts as a valid frame.
pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::external(read_f32m(path)?)
}

pub fn write_feature_matrix(path: &Path, f: &FeatureMatrix) -> Result<()> {
    write_f32m(path, f.data.slice(ndarray::s![..f.n_valid_frames, ..]))
}

/// Precomputed image feature vectors, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureTable {
    pub matrix: Array2<f32>,
    /// Image id of each row, filled in from a manifest.
    pub row_ids: Vec<Option<String>>,
}

impl ImageFeatureTable {
    pub fn new(matrix: Array2<f32>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image features contain NaN or Inf".into()));
        }
        let n = matrix.nrows();
        Ok(ImageFeatureTable {
            matrix,
            row_ids: vec![None; n],
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_f32m(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_f32m(path, self.matrix.view())
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.matrix.row(i)
    }

    /// Label rows with the image ids from `entries`, checking that every
    /// reference is in range and ids stay unique.
    pub fn attach_ids(&mut self, entries: &[ManifestEntry]) -> Result<()> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for e in entries {
            let r = e.image_feature_ref;
            if r >= self.n_rows() {
                return Err(Error::Validation(format!(
                    "{} references image feature row {r}, table has {} rows",
                    e.utterance_id,
                    self.n_rows()
                )));
            }
            if let Some(&prev) = seen.get(e.image_id.as_str()) {
                if prev != r {
                    return Err(Error::Validation(format!(
                        "image id {} maps to rows {prev} and {r}",
                        e.image_id
                    )));
                }
            }
            match &self.row_ids[r] {
                Some(id) if id != &e.image_id => {
                    return Err(Error::Validation(format!(
                        "row {r} is labelled both {id} and {}",
                        e.image_id
                    )))
                }
                _ => self.row_ids[r] = Some(e.image_id.clone()),
            }
            seen.insert(&e.image_id, r);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_four_decode() {
        let m = Array2::from_shape_vec((2, 4), (0..8).map(|v| v as f32 * 0.5).collect()).unwrap();
        let bytes = encode_f32m(m.view());
        assert_eq!(bytes.len(), 12 + 32);
        assert_eq!(decode_f32m(&bytes).unwrap(), m);
    }

    #[test]
    fn truncation_and_magic_are_format_errors() {
        let m = Array2::<f32>::ones((2, 4));
        let bytes = encode_f32m(m.view());
        assert!(matches!(
            decode_f32m(&bytes[..bytes.len() - 2]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_f32m(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn nan_is_a_data_error() {
        let mut m = Array2::<f32>::ones((1, 3));
        m[[0, 1]] = f32::NAN;
        assert!(matches!(
            decode_f32m(&encode_f32m(m.view())),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn paper_scale_table() {
        let m = Array2::<f32>::zeros((8000, 2048));
        let t = ImageFeatureTable::new(decode_f32m(&encode_f32m(m.view())).unwrap()).unwrap();
        assert_eq!((t.n_rows(), t.dim()), (8000, 2048));
    }
}
