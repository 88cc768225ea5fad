//! Late-interaction scoring: a query is a fixed-size bag of embeddings, a
//! document a variable-size bag, and relevance is the sum over query rows of
//! the maximum similarity against any document row.
//!
//! Similarities are accumulated in `f64` regardless of how embeddings are
//! stored, so the batched and per-document paths agree to within 1e-5.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vector similarity used both for scoring and, on unit vectors, for ANN
/// candidate generation. `NegSquaredL2` is `-||a - b||^2`, so that larger is
/// always better for both variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Cosine,
    NegSquaredL2,
}

/// Dense row-major matrix of `f32` embeddings with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_data(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(EmbeddingMatrix { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut m = EmbeddingMatrix::new(dim);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Fixed-size bag of query embeddings (`N_q` rows).
#[derive(Debug, Clone)]
pub struct QueryRepresentation {
    pub query_id: String,
    pub embeddings: EmbeddingMatrix,
}

/// Variable-size bag of document embeddings after punctuation filtering.
#[derive(Debug, Clone)]
pub struct DocRepresentation {
    pub doc_id: String,
    pub embeddings: EmbeddingMatrix,
}

impl DocRepresentation {
    /// Token count after filtering; equals the row count.
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

#[inline]
fn neg_sq_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    -acc
}

#[inline]
pub(crate) fn similarity(a: &[f32], b: &[f32], metric: SimilarityMetric) -> f64 {
    match metric {
        SimilarityMetric::Cosine => dot(a, b),
        SimilarityMetric::NegSquaredL2 => neg_sq_l2(a, b),
    }
}

/// Similarity of a single pair of embeddings.
pub fn pair_similarity(a: &[f32], b: &[f32], metric: SimilarityMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(similarity(a, b, metric))
}

fn check_dims(q: &QueryRepresentation, d: &DocRepresentation) -> Result<()> {
    if q.embeddings.dim() != d.embeddings.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.embeddings.dim(),
            got: d.embeddings.dim(),
        });
    }
    Ok(())
}

/// Sum over query rows of the maximum similarity against any document row.
/// Ties inside the max resolve to the first document row.
pub fn maxsim_score(
    q: &QueryRepresentation,
    d: &DocRepresentation,
    metric: SimilarityMetric,
) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyDocument(d.doc_id.clone()));
    }
    check_dims(q, d)?;
    let mut score = 0.0f64;
    for qrow in q.embeddings.iter_rows() {
        let mut best = f64::NEG_INFINITY;
        for drow in d.embeddings.iter_rows() {
            let s = similarity(qrow, drow, metric);
            if s > best {
                best = s;
            }
        }
        score += best;
    }
    Ok(score)
}

/// Like [`maxsim_score`] with the max replaced by the arithmetic mean over
/// document rows.
pub fn avgsim_score(
    q: &QueryRepresentation,
    d: &DocRepresentation,
    metric: SimilarityMetric,
) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyDocument(d.doc_id.clone()));
    }
    check_dims(q, d)?;
    let n = d.embeddings.rows() as f64;
    let mut score = 0.0f64;
    for qrow in q.embeddings.iter_rows() {
        let mut acc = 0.0f64;
        for drow in d.embeddings.iter_rows() {
            acc += similarity(qrow, drow, metric);
        }
        score += acc / n;
    }
    Ok(score)
}

/// A batch of documents padded to the widest document in the batch.
/// Padding rows are zero-filled and tracked via per-document true lengths;
/// scoring treats them as `-inf` similarity so they never win the max.
#[derive(Debug, Clone)]
pub struct PaddedDocBatch {
    dim: usize,
    max_len: usize,
    lengths: Vec<usize>,
    data: Vec<f32>,
}

impl PaddedDocBatch {
    pub fn from_docs(docs: &[&DocRepresentation]) -> Result<Self> {
        let dim = docs.first().map(|d| d.embeddings.dim()).unwrap_or(0);
        let max_len = docs.iter().map(|d| d.len()).max().unwrap_or(0);
        let mut batch = PaddedDocBatch {
            dim,
            max_len,
            lengths: Vec::with_capacity(docs.len()),
            data: vec![0.0; docs.len() * max_len * dim],
        };
        for (i, d) in docs.iter().enumerate() {
            if d.embeddings.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: d.embeddings.dim(),
                });
            }
            let start = i * max_len * dim;
            batch.data[start..start + d.len() * dim].copy_from_slice(d.embeddings.data());
            batch.lengths.push(d.len());
        }
        Ok(batch)
    }

    /// Build a batch directly from `(length, rows)` matrices, e.g. views into
    /// an on-disk index. Each matrix must share `dim`.
    pub fn from_matrices(matrices: &[&EmbeddingMatrix]) -> Result<Self> {
        let dim = matrices.first().map(|m| m.dim()).unwrap_or(0);
        let max_len = matrices.iter().map(|m| m.rows()).max().unwrap_or(0);
        let mut batch = PaddedDocBatch {
            dim,
            max_len,
            lengths: Vec::with_capacity(matrices.len()),
            data: vec![0.0; matrices.len() * max_len * dim],
        };
        for (i, m) in matrices.iter().enumerate() {
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim(),
                });
            }
            let start = i * max_len * dim;
            batch.data[start..start + m.rows() * dim].copy_from_slice(m.data());
            batch.lengths.push(m.rows());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn doc_rows(&self, i: usize) -> impl Iterator<Item = &[f32]> {
        let start = i * self.max_len * self.dim;
        self.data[start..start + self.max_len * self.dim].chunks_exact(self.dim)
    }
}

/// Score every document in the batch against the query. `scores[i]` equals
/// `maxsim_score(q, docs[i])` exactly; documents are scored in parallel but
/// results keep batch order.
pub fn batch_maxsim(
    q: &QueryRepresentation,
    batch: &PaddedDocBatch,
    metric: SimilarityMetric,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    if q.embeddings.dim() != batch.dim {
        return Err(Error::DimensionMismatch {
            expected: q.embeddings.dim(),
            got: batch.dim,
        });
    }
    if let Some(i) = batch.lengths.iter().position(|&l| l == 0) {
        return Err(Error::EmptyDocument(format!("batch position {i}")));
    }
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let len = batch.lengths[i];
            let mut score = 0.0f64;
            for qrow in q.embeddings.iter_rows() {
                let mut best = f64::NEG_INFINITY;
                for (j, drow) in batch.doc_rows(i).enumerate() {
                    let s = if j < len {
                        similarity(qrow, drow, metric)
                    } else {
                        f64::NEG_INFINITY
                    };
                    if s > best {
                        best = s;
                    }
                }
                score += best;
            }
            Ok(score)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn query(rows: &[Vec<f32>]) -> QueryRepresentation {
        QueryRepresentation {
            query_id: "q".into(),
            embeddings: EmbeddingMatrix::from_rows(rows[0].len(), rows).unwrap(),
        }
    }

    fn doc(rows: &[Vec<f32>]) -> DocRepresentation {
        DocRepresentation {
            doc_id: "d".into(),
            embeddings: EmbeddingMatrix::from_rows(rows[0].len(), rows).unwrap(),
        }
    }

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                v.iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    /// Independent doubly-nested-loop reference for MaxSim.
    fn naive_maxsim(q: &[Vec<f32>], d: &[Vec<f32>], metric: SimilarityMetric) -> f64 {
        let mut total = 0.0f64;
        for qr in q {
            let mut best = f64::NEG_INFINITY;
            for dr in d {
                let mut s = 0.0f64;
                match metric {
                    SimilarityMetric::Cosine => {
                        for k in 0..qr.len() {
                            s += qr[k] as f64 * dr[k] as f64;
                        }
                    }
                    SimilarityMetric::NegSquaredL2 => {
                        for k in 0..qr.len() {
                            let diff = qr[k] as f64 - dr[k] as f64;
                            s += diff * diff;
                        }
                        s = -s;
                    }
                }
                if s > best {
                    best = s;
                }
            }
            total += best;
        }
        total
    }

    fn naive_avgsim(q: &[Vec<f32>], d: &[Vec<f32>], metric: SimilarityMetric) -> f64 {
        let mut total = 0.0f64;
        for qr in q {
            let mut acc = 0.0f64;
            for dr in d {
                let mut s = 0.0f64;
                for k in 0..qr.len() {
                    match metric {
                        SimilarityMetric::Cosine => s += qr[k] as f64 * dr[k] as f64,
                        SimilarityMetric::NegSquaredL2 => {
                            let diff = qr[k] as f64 - dr[k] as f64;
                            s -= diff * diff;
                        }
                    }
                }
                acc += s;
            }
            total += acc / d.len() as f64;
        }
        total
    }

    #[test]
    fn pair_similarity_identical_unit_vectors() {
        let e1 = unit(4, 0);
        let s = pair_similarity(&e1, &e1, SimilarityMetric::Cosine).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn pair_similarity_orthonormal_l2() {
        let s = pair_similarity(&unit(4, 0), &unit(4, 1), SimilarityMetric::NegSquaredL2).unwrap();
        assert_eq!(s, -2.0);
    }

    #[test]
    fn pair_similarity_hand_dot_product() {
        // 0.6*0.8 + 0.8*0.6 = 0.96
        let s = pair_similarity(&[0.6, 0.8], &[0.8, 0.6], SimilarityMetric::Cosine).unwrap();
        assert!((s - 0.96).abs() < 1e-7);
    }

    #[test]
    fn pair_similarity_dimension_mismatch() {
        let err = pair_similarity(&[1.0, 0.0], &[1.0], SimilarityMetric::Cosine).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn maxsim_single_matching_row() {
        let q = query(&[unit(4, 0)]);
        let d = doc(&[unit(4, 0)]);
        assert_eq!(maxsim_score(&q, &d, SimilarityMetric::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn maxsim_orthonormal_basis() {
        let q = query(&[unit(4, 0), unit(4, 1)]);
        let d = doc(&[unit(4, 0)]);
        // e1 matches exactly (1.0), e2 is orthogonal (0.0).
        assert_eq!(maxsim_score(&q, &d, SimilarityMetric::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn maxsim_empty_document() {
        let q = query(&[unit(4, 0)]);
        let d = DocRepresentation {
            doc_id: "empty".into(),
            embeddings: EmbeddingMatrix::new(4),
        };
        assert!(matches!(
            maxsim_score(&q, &d, SimilarityMetric::Cosine),
            Err(Error::EmptyDocument(_))
        ));
    }

    #[test]
    fn maxsim_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let qr = random_unit_rows(&mut rng, 4, 8);
            let dr = random_unit_rows(&mut rng, 6, 8);
            for metric in [SimilarityMetric::Cosine, SimilarityMetric::NegSquaredL2] {
                let got = maxsim_score(&query(&qr), &doc(&dr), metric).unwrap();
                assert_eq!(got, naive_maxsim(&qr, &dr, metric));
            }
        }
    }

    #[test]
    fn avgsim_mean_of_similarities() {
        let q = query(&[unit(4, 0)]);
        let d = doc(&[unit(4, 0), unit(4, 1)]);
        assert_eq!(avgsim_score(&q, &d, SimilarityMetric::Cosine).unwrap(), 0.5);
        let d1 = doc(&[unit(4, 0)]);
        assert_eq!(avgsim_score(&q, &d1, SimilarityMetric::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn avgsim_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let qr = random_unit_rows(&mut rng, 3, 6);
            let dr = random_unit_rows(&mut rng, 5, 6);
            let got = avgsim_score(&query(&qr), &doc(&dr), SimilarityMetric::Cosine).unwrap();
            assert!((got - naive_avgsim(&qr, &dr, SimilarityMetric::Cosine)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_singleton_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = query(&random_unit_rows(&mut rng, 4, 8));
        let d = doc(&random_unit_rows(&mut rng, 5, 8));
        let batch = PaddedDocBatch::from_docs(&[&d]).unwrap();
        let scores = batch_maxsim(&q, &batch, SimilarityMetric::Cosine).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(
            scores[0],
            maxsim_score(&q, &d, SimilarityMetric::Cosine).unwrap()
        );
    }

    #[test]
    fn batch_padding_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = query(&random_unit_rows(&mut rng, 4, 8));
        let short = doc(&random_unit_rows(&mut rng, 3, 8));
        let long = doc(&random_unit_rows(&mut rng, 6, 8)); // forces 3 padding rows on `short`
        let batch = PaddedDocBatch::from_docs(&[&short, &long]).unwrap();
        let scores = batch_maxsim(&q, &batch, SimilarityMetric::Cosine).unwrap();
        assert_eq!(
            scores[0],
            maxsim_score(&q, &short, SimilarityMetric::Cosine).unwrap()
        );
        assert_eq!(
            scores[1],
            maxsim_score(&q, &long, SimilarityMetric::Cosine).unwrap()
        );
    }

    #[test]
    fn batch_of_32_equals_independent_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = query(&random_unit_rows(&mut rng, 4, 8));
        let docs: Vec<DocRepresentation> = (0..32)
            .map(|_| {
                let n = rng.random_range(1..12);
                doc(&random_unit_rows(&mut rng, n, 8))
            })
            .collect();
        let refs: Vec<&DocRepresentation> = docs.iter().collect();
        let batch = PaddedDocBatch::from_docs(&refs).unwrap();
        for metric in [SimilarityMetric::Cosine, SimilarityMetric::NegSquaredL2] {
            let scores = batch_maxsim(&q, &batch, metric).unwrap();
            for (i, d) in docs.iter().enumerate() {
                assert_eq!(scores[i], maxsim_score(&q, d, metric).unwrap());
            }
        }
    }

    #[test]
    fn batch_rejects_zero_length_doc() {
        let q = query(&[unit(4, 0)]);
        let d = doc(&[unit(4, 0)]);
        let empty = DocRepresentation {
            doc_id: "empty".into(),
            embeddings: EmbeddingMatrix::new(4),
        };
        let batch = PaddedDocBatch::from_docs(&[&d, &empty]).unwrap();
        assert!(matches!(
            batch_maxsim(&q, &batch, SimilarityMetric::Cosine),
            Err(Error::EmptyDocument(_))
        ));
    }

    proptest! {
        /// Appending a row to the document never decreases the cosine score.
        #[test]
        fn superset_monotonicity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let qr = random_unit_rows(&mut rng, 4, 6);
            let mut dr = random_unit_rows(&mut rng, 3, 6);
            let q = query(&qr);
            let before = maxsim_score(&q, &doc(&dr), SimilarityMetric::Cosine).unwrap();
            dr.push(random_unit_rows(&mut rng, 1, 6).remove(0));
            let after = maxsim_score(&q, &doc(&dr), SimilarityMetric::Cosine).unwrap();
            prop_assert!(after >= before);
        }

        /// Cosine MaxSim over unit vectors is bounded by +/- N_q.
        #[test]
        fn cosine_score_bound(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nq = rng.random_range(1..8usize);
            let qr = random_unit_rows(&mut rng, nq, 6);
            let dr = random_unit_rows(&mut rng, 5, 6);
            let s = maxsim_score(&query(&qr), &doc(&dr), SimilarityMetric::Cosine).unwrap();
            // small slack for f32 normalization error
            prop_assert!(s.abs() <= nq as f64 + 1e-4);
        }

        /// On unit vectors the two metrics order documents identically.
        #[test]
        fn metric_rank_equivalence(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = query(&random_unit_rows(&mut rng, 4, 6));
            let docs: Vec<DocRepresentation> = (0..8)
                .map(|_| {
                    let n = rng.random_range(1..6);
                    doc(&random_unit_rows(&mut rng, n, 6))
                })
                .collect();
            let rank = |metric| {
                let mut idx: Vec<usize> = (0..docs.len()).collect();
                let scores: Vec<f64> = docs
                    .iter()
                    .map(|d| maxsim_score(&q, d, metric).unwrap())
                    .collect();
                idx.sort_by(|&a, &b| {
                    scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
                });
                idx
            };
            prop_assert_eq!(
                rank(SimilarityMetric::Cosine),
                rank(SimilarityMetric::NegSquaredL2)
            );
        }

        /// avgsim never exceeds maxsim for the same pair (Cosine).
        #[test]
        fn avgsim_below_maxsim(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = query(&random_unit_rows(&mut rng, 4, 6));
            let d = doc(&random_unit_rows(&mut rng, 5, 6));
            let avg = avgsim_score(&q, &d, SimilarityMetric::Cosine).unwrap();
            let max = maxsim_score(&q, &d, SimilarityMetric::Cosine).unwrap();
            prop_assert!(avg <= max + 1e-12);
        }

        /// batch_maxsim agrees with per-document scoring for arbitrary batch
        /// compositions (and thus arbitrary padding amounts).
        #[test]
        fn batch_equals_elementwise(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = query(&random_unit_rows(&mut rng, 3, 5));
            let n_docs = rng.random_range(1..10usize);
            let docs: Vec<DocRepresentation> = (0..n_docs)
                .map(|_| {
                    let n = rng.random_range(1..9);
                    doc(&random_unit_rows(&mut rng, n, 5))
                })
                .collect();
            let refs: Vec<&DocRepresentation> = docs.iter().collect();
            let batch = PaddedDocBatch::from_docs(&refs).unwrap();
            let scores = batch_maxsim(&q, &batch, SimilarityMetric::Cosine).unwrap();
            for (i, d) in docs.iter().enumerate() {
                prop_assert_eq!(scores[i], maxsim_score(&q, d, SimilarityMetric::Cosine).unwrap());
            }
        }
    }
}
