//! Product quantization: split each vector into `s` sub-vectors and replace
//! each with the id of its nearest codeword from a 256-entry per-sub-space
//! codebook.

use crate::ann::kmeans::kmeans;
use crate::error::{Error, Result};

pub const CODEBOOK_ENTRIES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    sub_vectors: usize,
    sub_dim: usize,
    /// Row-major `s * 256 * sub_dim`; codebook j covers dimensions
    /// `[j*sub_dim, (j+1)*sub_dim)`.
    centers: Vec<f32>,
}

impl Codebooks {
    pub fn sub_vectors(&self) -> usize {
        self.sub_vectors
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn dim(&self) -> usize {
        self.sub_vectors * self.sub_dim
    }

    pub fn centers(&self) -> &[f32] {
        &self.centers
    }

    pub fn from_centers(sub_vectors: usize, sub_dim: usize, centers: Vec<f32>) -> Result<Self> {
        if centers.len() != sub_vectors * CODEBOOK_ENTRIES * sub_dim {
            return Err(Error::DimensionMismatch {
                expected: sub_vectors * CODEBOOK_ENTRIES * sub_dim,
                got: centers.len(),
            });
        }
        Ok(Codebooks {
            sub_vectors,
            sub_dim,
            centers,
        })
    }

    fn codeword(&self, sub: usize, code: usize) -> &[f32] {
        let start = (sub * CODEBOOK_ENTRIES + code) * self.sub_dim;
        &self.centers[start..start + self.sub_dim]
    }

    /// Nearest codeword id per sub-space (squared L2, ties to the lower id).
    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let mut code = Vec::with_capacity(self.sub_vectors);
        for j in 0..self.sub_vectors {
            let sub = &v[j * self.sub_dim..(j + 1) * self.sub_dim];
            let mut best = f64::INFINITY;
            let mut best_c = 0usize;
            for c in 0..CODEBOOK_ENTRIES {
                let d = sq_l2(sub, self.codeword(j, c));
                if d < best {
                    best = d;
                    best_c = c;
                }
            }
            code.push(best_c as u8);
        }
        Ok(code)
    }

    /// Concatenation of the selected codewords.
    pub fn reconstruct(&self, code: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim());
        for (j, &c) in code.iter().enumerate() {
            out.extend_from_slice(self.codeword(j, c as usize));
        }
        out
    }

    /// Per-query lookup table for asymmetric distance computation:
    /// `table[j * 256 + c] = || query sub-vector j - codeword c ||^2`.
    pub fn adc_table(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        let mut table = vec![0.0f64; self.sub_vectors * CODEBOOK_ENTRIES];
        for j in 0..self.sub_vectors {
            let sub = &query[j * self.sub_dim..(j + 1) * self.sub_dim];
            for c in 0..CODEBOOK_ENTRIES {
                table[j * CODEBOOK_ENTRIES + c] = sq_l2(sub, self.codeword(j, c));
            }
        }
        Ok(table)
    }

    /// Approximate squared distance of a stored code to the query behind an
    /// ADC table.
    #[inline]
    pub fn adc_distance(table: &[f64], code: &[u8]) -> f64 {
        code.iter()
            .enumerate()
            .map(|(j, &c)| table[j * CODEBOOK_ENTRIES + c as usize])
            .sum()
    }
}

#[inline]
fn sq_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

/// Train one 256-centroid k-means per sub-space over the sample's sub-vector
/// slices.
pub fn train_pq(
    data: &[f32],
    dim: usize,
    sub_vectors: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<Codebooks> {
    if sub_vectors == 0 || dim % sub_vectors != 0 {
        return Err(Error::InvalidConfig(format!(
            "sub_vectors ({sub_vectors}) must divide the dimension ({dim})"
        )));
    }
    let n = data.len() / dim;
    if n < CODEBOOK_ENTRIES {
        return Err(Error::InvalidConfig(format!(
            "PQ training needs at least {CODEBOOK_ENTRIES} samples, got {n}"
        )));
    }
    let sub_dim = dim / sub_vectors;
    let mut centers = Vec::with_capacity(sub_vectors * CODEBOOK_ENTRIES * sub_dim);
    for j in 0..sub_vectors {
        let mut slice = Vec::with_capacity(n * sub_dim);
        for i in 0..n {
            let start = i * dim + j * sub_dim;
            slice.extend_from_slice(&data[start..start + sub_dim]);
        }
        let res = kmeans(
            &slice,
            sub_dim,
            CODEBOOK_ENTRIES,
            kmeans_iters,
            seed.wrapping_add(j as u64),
        )?;
        centers.extend_from_slice(&res.centroids);
    }
    Codebooks::from_centers(sub_vectors, sub_dim, centers)
}
