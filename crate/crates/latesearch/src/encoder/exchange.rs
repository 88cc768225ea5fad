//! Embedding-exchange file format, used to ingest embeddings produced by an
//! external encoder.
//!
//! Layout (little-endian): magic `LSEMB1`, u32 dimension, u8 dtype
//! (0 = f32, 1 = f16), u64 record count; then per record: u64 id length,
//! UTF-8 id bytes, u32 row count, `rows * dim` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::scoring::{EmbeddingMatrix, SimilarityMetric};

const MAGIC: &[u8; 6] = b"LSEMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeDtype {
    F32,
    F16,
}

impl ExchangeDtype {
    fn code(self) -> u8 {
        match self {
            ExchangeDtype::F32 => 0,
            ExchangeDtype::F16 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ExchangeDtype::F32),
            1 => Some(ExchangeDtype::F16),
            _ => None,
        }
    }

    fn norm_tolerance(self) -> f64 {
        match self {
            ExchangeDtype::F32 => 1e-4,
            ExchangeDtype::F16 => 1e-2,
        }
    }
}

/// One id plus its embedding matrix, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeRecord {
    pub id: String,
    pub embeddings: EmbeddingMatrix,
}

pub fn write_exchange<'a>(
    path: &Path,
    dim: usize,
    dtype: ExchangeDtype,
    records: impl ExactSizeIterator<Item = (&'a str, &'a EmbeddingMatrix)>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&[dtype.code()]).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for (id, m) in records {
        if m.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.dim(),
            });
        }
        w.write_all(&(id.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        w.write_all(&(m.rows() as u32).to_le_bytes()).map_err(io)?;
        for &v in m.data() {
            match dtype {
                ExchangeDtype::F32 => w.write_all(&v.to_le_bytes()).map_err(io)?,
                ExchangeDtype::F16 => w
                    .write_all(&f16::from_f32(v).to_le_bytes())
                    .map_err(io)?,
            }
        }
    }
    w.flush().map_err(io)
}

/// Load representations in file order. When `expected_dim` is given, the file
/// dimension must match. Under Cosine, row norms are re-validated against the
/// dtype's precision.
pub fn load_precomputed(
    path: &Path,
    expected_dim: Option<usize>,
    metric: SimilarityMetric,
) -> Result<Vec<ExchangeRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header = [0u8; 19];
    read_exact(&mut r, &mut header, path)?;
    if &header[..6] != MAGIC {
        return Err(Error::malformed(path, "bad magic"));
    }
    let dim = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let dtype = ExchangeDtype::from_code(header[10])
        .ok_or_else(|| Error::malformed(path, format!("unknown dtype code {}", header[10])))?;
    let count = u64::from_le_bytes(header[11..19].try_into().unwrap());
    if dim == 0 {
        return Err(Error::malformed(path, "zero dimension"));
    }
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: dim,
            });
        }
    }

    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let mut len_buf = [0u8; 8];
        read_exact(&mut r, &mut len_buf, path)?;
        let id_len = u64::from_le_bytes(len_buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(&mut r, &mut id_bytes, path)?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::malformed(path, "id is not valid UTF-8"))?;
        let mut rows_buf = [0u8; 4];
        read_exact(&mut r, &mut rows_buf, path)?;
        let rows = u32::from_le_bytes(rows_buf) as usize;

        let value_size = match dtype {
            ExchangeDtype::F32 => 4,
            ExchangeDtype::F16 => 2,
        };
        let mut payload = vec![0u8; rows * dim * value_size];
        read_exact(&mut r, &mut payload, path)?;
        let data: Vec<f32> = match dtype {
            ExchangeDtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            ExchangeDtype::F16 => payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "record {id:?} in {}",
                path.display()
            )));
        }
        let embeddings = EmbeddingMatrix::from_data(dim, data)?;
        if metric == SimilarityMetric::Cosine {
            let tol = dtype.norm_tolerance();
            for (i, row) in embeddings.iter_rows().enumerate() {
                let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > tol {
                    return Err(Error::malformed(
                        path,
                        format!("record {id:?} row {i} has norm {norm:.6}, expected 1"),
                    ));
                }
            }
        }
        out.push(ExchangeRecord { id, embeddings });
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::malformed(path, "truncated file"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::new(dim);
        for _ in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            let row: Vec<f32> = v.iter().map(|x| x / norm).collect();
            m.push_row(&row).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = unit_rows(&mut rng, 4, 8);
        let b = unit_rows(&mut rng, 7, 8);
        let records = vec![("doc-a", &a), ("doc-b", &b)];
        write_exchange(&path, 8, ExchangeDtype::F32, records.into_iter()).unwrap();
        let loaded = load_precomputed(&path, Some(8), SimilarityMetric::Cosine).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, "doc-a");
        assert_eq!(loaded[0].embeddings, a);
        assert_eq!(loaded[1].embeddings, b);
    }

    #[test]
    fn round_trip_f16_within_tolerance() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb16.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = unit_rows(&mut rng, 3, 16);
        write_exchange(&path, 16, ExchangeDtype::F16, vec![("x", &a)].into_iter()).unwrap();
        let loaded = load_precomputed(&path, Some(16), SimilarityMetric::Cosine).unwrap();
        for (got, want) in loaded[0].embeddings.data().iter().zip(a.data()) {
            assert!((got - want).abs() <= (2.0f32).powi(-10));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = unit_rows(&mut rng, 2, 64);
        write_exchange(&path, 64, ExchangeDtype::F32, vec![("x", &a)].into_iter()).unwrap();
        let err = load_precomputed(&path, Some(128), SimilarityMetric::Cosine).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 128, got: 64 }));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = unit_rows(&mut rng, 4, 8);
        write_exchange(&path, 8, ExchangeDtype::F32, vec![("x", &a)].into_iter()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_precomputed(&path, Some(8), SimilarityMetric::Cosine).unwrap_err();
        assert!(matches!(err, Error::MalformedFile { .. }));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        std::fs::write(&path, b"NOTMAGIC-and-more-bytes").unwrap();
        let err = load_precomputed(&path, None, SimilarityMetric::Cosine).unwrap_err();
        assert!(matches!(err, Error::MalformedFile { .. }));
    }

    #[test]
    fn non_unit_rows_rejected_under_cosine() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let m = EmbeddingMatrix::from_rows(4, &[vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
        write_exchange(&path, 4, ExchangeDtype::F32, vec![("x", &m)].into_iter()).unwrap();
        assert!(load_precomputed(&path, Some(4), SimilarityMetric::Cosine).is_err());
        assert!(load_precomputed(&path, Some(4), SimilarityMetric::NegSquaredL2).is_ok());
    }
}
