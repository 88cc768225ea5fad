//! Query serving: exhaustive re-ranking of a candidate set, and two-stage
//! end-to-end retrieval where per-query-row vector searches propose
//! candidates and full-precision MaxSim refines them.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{exact_flat_search, IvfPqIndex};
use crate::error::{Error, Result};
use crate::indexer::EmbeddingIndex;
use crate::scoring::{batch_maxsim, PaddedDocBatch, QueryRepresentation};

/// Candidate mini-batch width for the gather/score stage; bounds peak memory
/// for padded batches.
pub const RERANK_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// Score only externally supplied candidates.
    Rerank,
    /// ANN candidate generation, then full-precision refinement.
    EndToEnd,
    /// Exhaustive stage 1 over all stored embeddings (oracle mode).
    EndToEndExact,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    /// Results requested (k).
    pub k: usize,
    /// Per-query-row vector-search depth (k'); defaults to k when unset.
    pub k_prime: Option<usize>,
    /// Cells probed per vector search.
    pub probes: usize,
    pub mode: RetrievalMode,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            k: 1000,
            k_prime: None,
            probes: 10,
            mode: RetrievalMode::EndToEnd,
        }
    }
}

impl RetrievalParams {
    pub fn effective_k_prime(&self) -> usize {
        self.k_prime.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.effective_k_prime() == 0 {
            return Err(Error::InvalidConfig("k' must be >= 1".into()));
        }
        Ok(())
    }
}

/// Documents ordered by descending score; ties broken by ascending ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    /// `(doc ordinal, doc id, score)`.
    pub entries: Vec<(u32, String, f64)>,
}

impl RankedList {
    fn from_scored(query_id: &str, mut scored: Vec<(u32, String, f64)>, k: usize) -> Self {
        scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        RankedList {
            query_id: query_id.to_string(),
            entries: scored,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, id, _)| id.as_str())
    }
}

/// Score the given candidates against the query and keep the top `k`.
/// Unknown doc ids are skipped (a warning goes to stderr); the query text is
/// encoded by the caller, exactly once.
pub fn rerank(
    q: &QueryRepresentation,
    candidates: &[String],
    index: &EmbeddingIndex,
    k: usize,
) -> Result<RankedList> {
    let mut ords: Vec<u32> = Vec::with_capacity(candidates.len());
    let mut seen = BTreeSet::new();
    for id in candidates {
        match index.ord_of(id) {
            Some(o) => {
                if seen.insert(o) {
                    ords.push(o);
                }
            }
            None => eprintln!("warning: candidate {id:?} not in index, skipped"),
        }
    }
    rerank_ordinals(q, &ords, index, k)
}

fn rerank_ordinals(
    q: &QueryRepresentation,
    ords: &[u32],
    index: &EmbeddingIndex,
    k: usize,
) -> Result<RankedList> {
    let metric = index.metric();
    let scored: Vec<Vec<(u32, String, f64)>> = ords
        .par_chunks(RERANK_BATCH)
        .map(|chunk| {
            let mats: Vec<_> = chunk.iter().map(|&o| index.doc_matrix(o)).collect();
            let refs: Vec<_> = mats.iter().collect();
            let batch = PaddedDocBatch::from_matrices(&refs)?;
            let scores = batch_maxsim(q, &batch, metric)?;
            Ok(chunk
                .iter()
                .zip(scores)
                .map(|(&o, s)| (o, index.doc_id(o).to_string(), s))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(RankedList::from_scored(
        &q.query_id,
        scored.into_iter().flatten().collect(),
        k,
    ))
}

/// Stage 1 of end-to-end retrieval: one vector search per query row, mapped
/// through `emb2doc` and deduplicated. The result size K is at most
/// `N_q * k'`.
pub fn stage1_candidates(
    q: &QueryRepresentation,
    ann: &IvfPqIndex,
    emb2doc: &[u32],
    k_prime: usize,
    probes: usize,
) -> Result<BTreeSet<u32>> {
    let hits: Vec<Vec<(u32, f64)>> = (0..q.embeddings.rows())
        .into_par_iter()
        .map(|i| ann.search(q.embeddings.row(i), k_prime, probes))
        .collect::<Result<_>>()?;
    let mut docs = BTreeSet::new();
    for row_hits in hits {
        for (emb_ord, _) in row_hits {
            docs.insert(emb2doc[emb_ord as usize]);
        }
    }
    Ok(docs)
}

/// Stage 1 with the approximate search replaced by an exhaustive scan over
/// the stored full-precision embeddings.
pub fn stage1_exact(
    q: &QueryRepresentation,
    index: &EmbeddingIndex,
    k_prime: usize,
) -> Result<BTreeSet<u32>> {
    let payload = index.payload();
    let dim = index.dim();
    let emb2doc = index.emb2doc();
    let hits: Vec<Vec<(u32, f64)>> = (0..q.embeddings.rows())
        .into_par_iter()
        .map(|i| exact_flat_search(payload, dim, q.embeddings.row(i), k_prime))
        .collect::<Result<_>>()?;
    let mut docs = BTreeSet::new();
    for row_hits in hits {
        for (emb_ord, _) in row_hits {
            docs.insert(emb2doc[emb_ord as usize]);
        }
    }
    Ok(docs)
}

/// Full retrieval: candidate generation per the configured mode, then
/// re-ranking over full-precision embeddings. Stage-1 distances are
/// discarded; stage 2 recomputes every score.
pub fn retrieve(
    q: &QueryRepresentation,
    params: &RetrievalParams,
    index: &EmbeddingIndex,
    ann: Option<&IvfPqIndex>,
) -> Result<RankedList> {
    params.validate()?;
    let k_prime = params.effective_k_prime();
    let candidates: BTreeSet<u32> = match params.mode {
        RetrievalMode::Rerank => {
            return Err(Error::InvalidConfig(
                "rerank mode needs an explicit candidate list".into(),
            ))
        }
        RetrievalMode::EndToEnd => {
            let ann = ann.ok_or_else(|| {
                Error::InvalidConfig("end-to-end mode needs a vector index".into())
            })?;
            stage1_candidates(q, ann, index.emb2doc(), k_prime, params.probes)?
        }
        RetrievalMode::EndToEndExact => stage1_exact(q, index, k_prime)?,
    };
    let ords: Vec<u32> = candidates.into_iter().collect();
    rerank_ordinals(q, &ords, index, params.k)
}

/// Write ranked lists in TREC run format: `qid Q0 docid rank score tag`.
pub fn write_run<W: Write>(w: &mut W, lists: &[RankedList], tag: &str) -> Result<()> {
    for list in lists {
        for (rank, (_, doc_id, score)) in list.entries.iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {} {}", list.query_id, doc_id, rank + 1, score, tag)
                .map_err(|e| Error::io("<run output>", e))?;
        }
    }
    Ok(())
}
