//! Approximate nearest-neighbour search over token embeddings: a k-means
//! coarse quantizer splits the collection into `P` cells, product
//! quantization compresses each vector to `s` one-byte codes, and queries
//! scan only the `p` nearest cells using an asymmetric-distance lookup table.
//!
//! Distances are always squared L2. Under the cosine metric all vectors are
//! unit-normalized, so L2 ordering matches dot-product ordering and the same
//! index serves both metrics.

pub mod kmeans;
pub mod pq;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::SimilarityMetric;
use kmeans::kmeans;
use pq::{train_pq, Codebooks, CODEBOOK_ENTRIES};

pub const ANN_FILE: &str = "ivfpq.bin";
const ANN_MAGIC: &[u8; 6] = b"LSIVF1";
const ANN_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnConfig {
    /// Number of coarse cells (P).
    pub partitions: usize,
    /// Cells scanned per query (p).
    pub probes: usize,
    /// PQ sub-vectors per embedding (s); must divide the embedding dim.
    pub sub_vectors: usize,
    pub kmeans_iters: usize,
    /// Training sample size; defaults to 256 * partitions when unset.
    pub train_sample: Option<usize>,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            partitions: 2000,
            probes: 10,
            sub_vectors: 16,
            kmeans_iters: 20,
            train_sample: None,
            seed: 0,
        }
    }
}

impl AnnConfig {
    pub fn effective_train_sample(&self) -> usize {
        self.train_sample.unwrap_or(256 * self.partitions)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.partitions == 0 {
            return Err(Error::InvalidConfig("partitions must be >= 1".into()));
        }
        if self.probes == 0 || self.probes > self.partitions {
            return Err(Error::InvalidConfig(format!(
                "probes ({}) must be in 1..=partitions ({})",
                self.probes, self.partitions
            )));
        }
        if self.sub_vectors == 0 || dim % self.sub_vectors != 0 {
            return Err(Error::InvalidConfig(format!(
                "sub_vectors ({}) must divide the embedding dim ({dim})",
                self.sub_vectors
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    dim: usize,
    metric: SimilarityMetric,
    partitions: usize,
    /// Row-major `partitions x dim`; empty until trained.
    centroids: Vec<f32>,
    codebooks: Option<Codebooks>,
    /// Per cell: ordinals and, flattened in lockstep, their s-byte codes.
    list_ordinals: Vec<Vec<u32>>,
    list_codes: Vec<Vec<u8>>,
    known_ordinals: BTreeSet<u32>,
}

impl IvfPqIndex {
    pub fn new(dim: usize, partitions: usize, metric: SimilarityMetric) -> Self {
        IvfPqIndex {
            dim,
            metric,
            partitions,
            centroids: Vec::new(),
            codebooks: None,
            list_ordinals: vec![Vec::new(); partitions],
            list_codes: vec![Vec::new(); partitions],
            known_ordinals: BTreeSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.metric
    }

    pub fn partitions(&self) -> usize {
        self.partitions
    }

    pub fn is_trained(&self) -> bool {
        self.codebooks.is_some()
    }

    pub fn len(&self) -> usize {
        self.known_ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known_ordinals.is_empty()
    }

    pub fn list_lengths(&self) -> Vec<usize> {
        self.list_ordinals.iter().map(Vec::len).collect()
    }

    pub fn codebooks(&self) -> Option<&Codebooks> {
        self.codebooks.as_ref()
    }

    /// Fit the coarse quantizer and PQ codebooks on a training sample
    /// (row-major, `dim` columns).
    pub fn train(&mut self, sample: &[f32], cfg: &AnnConfig) -> Result<()> {
        cfg.validate(self.dim)?;
        let n = sample.len() / self.dim;
        if n < self.partitions {
            return Err(Error::InvalidConfig(format!(
                "training sample ({n}) smaller than partitions ({})",
                self.partitions
            )));
        }
        let coarse = kmeans(sample, self.dim, self.partitions, cfg.kmeans_iters, cfg.seed)?;
        self.centroids = coarse.centroids;
        self.codebooks = Some(train_pq(
            sample,
            self.dim,
            cfg.sub_vectors,
            cfg.kmeans_iters,
            cfg.seed.wrapping_add(0x5051),
        )?);
        Ok(())
    }

    fn nearest_cell(&self, v: &[f32]) -> usize {
        let mut best = f64::INFINITY;
        let mut best_c = 0usize;
        for c in 0..self.partitions {
            let d = sq_l2(v, &self.centroids[c * self.dim..(c + 1) * self.dim]);
            if d < best {
                best = d;
                best_c = c;
            }
        }
        best_c
    }

    /// Assign one vector to its nearest cell, storing its PQ code under the
    /// given global ordinal.
    pub fn add(&mut self, ordinal: u32, v: &[f32]) -> Result<()> {
        let cb = self.codebooks.as_ref().ok_or(Error::UntrainedIndex)?;
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if !self.known_ordinals.insert(ordinal) {
            return Err(Error::DuplicateOrdinal(ordinal));
        }
        let code = cb.encode(v)?;
        let cell = self.nearest_cell(v);
        self.list_ordinals[cell].push(ordinal);
        self.list_codes[cell].extend_from_slice(&code);
        Ok(())
    }

    /// Add rows `0..n` of a row-major matrix with ordinals equal to row
    /// numbers.
    pub fn add_all(&mut self, data: &[f32]) -> Result<()> {
        if self.dim == 0 || data.len() % self.dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: data.len(),
            });
        }
        for (i, v) in data.chunks_exact(self.dim).enumerate() {
            self.add(i as u32, v)?;
        }
        Ok(())
    }

    /// Probe-limited ADC search: scan the `probes` cells with nearest
    /// centroids and return up to `k_prime` (ordinal, approx squared L2)
    /// pairs, ascending distance, ties to the lower ordinal.
    pub fn search(&self, query: &[f32], k_prime: usize, probes: usize) -> Result<Vec<(u32, f64)>> {
        let cb = self.codebooks.as_ref().ok_or(Error::UntrainedIndex)?;
        if k_prime == 0 {
            return Err(Error::InvalidConfig("k' must be >= 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let probes = probes.clamp(1, self.partitions);

        // nearest cells by centroid distance, ties to the lower cell id
        let mut cells: Vec<(f64, usize)> = (0..self.partitions)
            .map(|c| (sq_l2(query, &self.centroids[c * self.dim..(c + 1) * self.dim]), c))
            .collect();
        cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cells.truncate(probes);

        let table = cb.adc_table(query)?;
        let s = cb.sub_vectors();
        let mut hits: Vec<(u32, f64)> = Vec::new();
        for &(_, cell) in &cells {
            let ords = &self.list_ordinals[cell];
            let codes = &self.list_codes[cell];
            for (i, &ord) in ords.iter().enumerate() {
                let code = &codes[i * s..(i + 1) * s];
                hits.push((ord, Codebooks::adc_distance(&table, code)));
            }
        }
        hits.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        hits.truncate(k_prime);
        Ok(hits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cb = self.codebooks.as_ref().ok_or(Error::UntrainedIndex)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(ANN_MAGIC);
        buf.extend_from_slice(&ANN_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.push(match self.metric {
            SimilarityMetric::Cosine => 0,
            SimilarityMetric::NegSquaredL2 => 1,
        });
        buf.extend_from_slice(&(self.partitions as u32).to_le_bytes());
        buf.extend_from_slice(&(cb.sub_vectors() as u32).to_le_bytes());
        for v in &self.centroids {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in cb.centers() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for cell in 0..self.partitions {
            let ords = &self.list_ordinals[cell];
            buf.extend_from_slice(&(ords.len() as u32).to_le_bytes());
            for &o in ords {
                buf.extend_from_slice(&o.to_le_bytes());
            }
            buf.extend_from_slice(&self.list_codes[cell]);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < ANN_MAGIC.len() + 4 + 4 {
            return Err(Error::malformed(path, "file too short"));
        }
        let (body, crc_bytes) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::ChecksumMismatch(path.display().to_string()));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::malformed(path, "truncated record"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 6)? != ANN_MAGIC {
            return Err(Error::malformed(path, "bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != ANN_VERSION {
            return Err(Error::VersionMismatch {
                path: path.display().to_string(),
                expected: ANN_VERSION,
                got: version,
            });
        }
        let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let metric = match take(&mut pos, 1)?[0] {
            0 => SimilarityMetric::Cosine,
            1 => SimilarityMetric::NegSquaredL2,
            m => return Err(Error::malformed(path, format!("unknown metric tag {m}"))),
        };
        let partitions = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let sub_vectors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if dim == 0 || sub_vectors == 0 || dim % sub_vectors != 0 {
            return Err(Error::malformed(path, "inconsistent dimensions"));
        }
        let read_f32s = |pos: &mut usize, n: usize| -> Result<Vec<f32>> {
            let raw = take(pos, n * 4)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let centroids = read_f32s(&mut pos, partitions * dim)?;
        let centers = read_f32s(&mut pos, sub_vectors * CODEBOOK_ENTRIES * (dim / sub_vectors))?;
        let codebooks = Codebooks::from_centers(sub_vectors, dim / sub_vectors, centers)?;
        let mut list_ordinals = Vec::with_capacity(partitions);
        let mut list_codes = Vec::with_capacity(partitions);
        let mut known_ordinals = BTreeSet::new();
        for _ in 0..partitions {
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let ords: Vec<u32> = take(&mut pos, len * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            for &o in &ords {
                if !known_ordinals.insert(o) {
                    return Err(Error::DuplicateOrdinal(o));
                }
            }
            let codes = take(&mut pos, len * sub_vectors)?.to_vec();
            list_ordinals.push(ords);
            list_codes.push(codes);
        }
        if pos != body.len() {
            return Err(Error::malformed(path, "trailing bytes"));
        }
        Ok(IvfPqIndex {
            dim,
            metric,
            partitions,
            centroids,
            codebooks: Some(codebooks),
            list_ordinals,
            list_codes,
            known_ordinals,
        })
    }
}

/// Exhaustive exact top-`k_prime` scan over a row-major matrix; same distance
/// and tie rule as [`IvfPqIndex::search`].
pub fn exact_flat_search(data: &[f32], dim: usize, query: &[f32], k_prime: usize) -> Result<Vec<(u32, f64)>> {
    if k_prime == 0 {
        return Err(Error::InvalidConfig("k' must be >= 1".into()));
    }
    if dim == 0 || data.len() % dim != 0 || query.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: query.len(),
        });
    }
    let mut hits: Vec<(u32, f64)> = data
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, v)| (i as u32, sq_l2(query, v)))
        .collect();
    hits.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    hits.truncate(k_prime);
    Ok(hits)
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
