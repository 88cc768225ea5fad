//! Offline indexing: encode a corpus into an on-disk multi-vector index.
//!
//! Documents are processed in groups, sorted by token length, and encoded in
//! length-bucketed batches across a configurable worker pool. Serialization
//! is single-writer in corpus order, so index bytes are identical for any
//! worker count. The index directory holds:
//!
//! - `manifest.json`   counts, dimensions, encoder parameters, self-CRC
//! - `doclens.bin`     u32 LE per-document row counts
//! - `payload.bin`     concatenated embedding rows, f32 or f16 LE
//! - `emb2doc.bin`     u32 LE map from embedding ordinal to doc ordinal
//! - `docids.tsv`      one external document id per line
//! - `projection.bin`  the projection used at build time
//!
//! Binary files end with a CRC32 of the preceding bytes; the manifest and
//! docids carry their own checksums.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, ProjectionLayer, Token};
use crate::error::{Error, Result};
use crate::scoring::{DocRepresentation, EmbeddingMatrix, SimilarityMetric};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DOCLENS_FILE: &str = "doclens.bin";
pub const PAYLOAD_FILE: &str = "payload.bin";
pub const EMB2DOC_FILE: &str = "emb2doc.bin";
pub const DOCIDS_FILE: &str = "docids.tsv";
pub const PROJECTION_FILE: &str = "projection.bin";
pub const INDEX_VERSION: u32 = 1;

fn default_group_size() -> usize {
    100_000
}
fn default_batch_size() -> usize {
    128
}
fn default_bytes_per_dim() -> u8 {
    4
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexerConfig {
    /// Documents per length-sorting group (B).
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Documents per encoding batch (b).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// 4 for f32 storage, 2 for IEEE half precision.
    #[serde(default = "default_bytes_per_dim")]
    pub bytes_per_dim: u8,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
}

impl Default for IndexerConfig {
    fn default() -> Self {
        IndexerConfig {
            group_size: default_group_size(),
            batch_size: default_batch_size(),
            bytes_per_dim: default_bytes_per_dim(),
            worker_count: default_workers(),
        }
    }
}

impl IndexerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.batch_size == 0 || self.worker_count == 0 {
            return Err(Error::InvalidConfig(
                "group_size, batch_size and worker_count must be positive".into(),
            ));
        }
        if self.batch_size > self.group_size {
            return Err(Error::InvalidConfig(
                "batch_size must not exceed group_size".into(),
            ));
        }
        if self.bytes_per_dim != 2 && self.bytes_per_dim != 4 {
            return Err(Error::InvalidConfig("bytes_per_dim must be 2 or 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexManifest {
    pub version: u32,
    pub dim: usize,
    pub metric: SimilarityMetric,
    pub bytes_per_dim: u8,
    pub doc_count: usize,
    pub total_embeddings: u64,
    /// External ids of documents skipped for having no content tokens.
    pub skipped: Vec<String>,
    pub encoder: EncoderConfig,
    pub crc32: u32,
}

fn manifest_checksum(m: &IndexManifest) -> u32 {
    let mut copy = m.clone();
    copy.crc32 = 0;
    crc32fast::hash(serde_json::to_string(&copy).expect("manifest serializes").as_bytes())
}

/// Sort documents ascending by token length and chunk into batches of at most
/// `batch_size`. The sort is stable, so equal lengths keep corpus order.
pub fn bucket_batches<T>(mut docs: Vec<(T, usize)>, batch_size: usize) -> Vec<Vec<(T, usize)>> {
    docs.sort_by_key(|&(_, len)| len);
    let mut out = Vec::new();
    let mut it = docs.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(batch_size).collect());
    }
    out
}

fn write_with_crc(path: &Path, mut bytes: Vec<u8>) -> Result<()> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

fn read_with_crc(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::malformed(path, "shorter than its checksum"));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    bytes.truncate(bytes.len() - 4);
    if crc32fast::hash(&bytes) != stored {
        return Err(Error::ChecksumMismatch(path.display().to_string()));
    }
    Ok(bytes)
}

/// Stream a `doc_id \t text` TSV corpus.
pub fn read_corpus_tsv(path: &Path) -> Result<impl Iterator<Item = Result<(String, String)>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let path = path.to_path_buf();
    let reader = BufReader::new(file);
    Ok(reader.lines().enumerate().filter_map(move |(lineno, line)| {
        match line {
            Err(e) => Some(Err(Error::io(&path, e))),
            Ok(l) if l.is_empty() => None,
            Ok(l) => match l.split_once('\t') {
                Some((id, text)) => Some(Ok((id.to_string(), text.to_string()))),
                None => Some(Err(Error::malformed(
                    &path,
                    format!("line {}: expected `doc_id\\ttext`", lineno + 1),
                ))),
            },
        }
    }))
}

/// Encode a corpus and persist the index at `out_dir`. Documents with no
/// content tokens (empty or all punctuation) are recorded in the manifest's
/// skip list rather than indexed.
pub fn build_index<I>(
    corpus: I,
    encoder: &Encoder,
    cfg: &IndexerConfig,
    out_dir: &Path,
) -> Result<EmbeddingIndex>
where
    I: IntoIterator<Item = Result<(String, String)>>,
{
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;

    let dim = encoder.config().dim;
    let mut doclens: Vec<u32> = Vec::new();
    let mut doc_ids: Vec<String> = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    let mut payload: Vec<f32> = Vec::new();

    let mut corpus = corpus.into_iter();
    let mut saw_any = false;
    loop {
        let group: Vec<(String, String)> = corpus
            .by_ref()
            .take(cfg.group_size)
            .collect::<Result<_>>()?;
        if group.is_empty() {
            break;
        }
        saw_any = true;

        // parallel preprocessing: tokenize the whole group
        let tokenized: Vec<(String, Vec<Token>)> = pool.install(|| {
            group
                .into_par_iter()
                .map(|(id, text)| {
                    let tokens = encoder.embedder().doc_tokens(&text);
                    (id, tokens)
                })
                .collect()
        });

        let mut kept: Vec<(usize, &(String, Vec<Token>))> = Vec::new();
        for (pos, entry) in tokenized.iter().enumerate() {
            if encoder.embedder().content_len(&entry.1) == 0 {
                skipped.push(entry.0.clone());
            } else {
                kept.push((pos, entry));
            }
        }

        // length-bucketed batches; encoded in parallel, merged in corpus order
        let with_len: Vec<((usize, &(String, Vec<Token>)), usize)> =
            kept.into_iter().map(|k| (k, k.1 .1.len())).collect();
        let batches = bucket_batches(with_len, cfg.batch_size);
        let encoded: Vec<Vec<(usize, DocRepresentation)>> = pool.install(|| {
            batches
                .par_iter()
                .map(|batch| {
                    batch
                        .iter()
                        .map(|&((pos, (id, tokens)), _)| {
                            let rep = encoder.encode_doc_tokens(id, tokens)?;
                            Ok((pos, rep))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut by_pos: Vec<(usize, DocRepresentation)> =
            encoded.into_iter().flatten().collect();
        by_pos.sort_by_key(|&(pos, _)| pos);
        for (_, rep) in by_pos {
            doclens.push(rep.len() as u32);
            payload.extend_from_slice(rep.embeddings.data());
            doc_ids.push(rep.doc_id);
        }
    }
    if !saw_any {
        return Err(Error::NoData("corpus is empty".into()));
    }

    let total_embeddings: u64 = doclens.iter().map(|&l| l as u64).sum();
    let emb2doc: Vec<u32> = doclens
        .iter()
        .enumerate()
        .flat_map(|(doc, &len)| std::iter::repeat(doc as u32).take(len as usize))
        .collect();

    // serialize
    let mut doclens_bytes = Vec::with_capacity(doclens.len() * 4);
    for &l in &doclens {
        doclens_bytes.extend_from_slice(&l.to_le_bytes());
    }
    write_with_crc(&out_dir.join(DOCLENS_FILE), doclens_bytes)?;

    let mut emb2doc_bytes = Vec::with_capacity(emb2doc.len() * 4);
    for &d in &emb2doc {
        emb2doc_bytes.extend_from_slice(&d.to_le_bytes());
    }
    write_with_crc(&out_dir.join(EMB2DOC_FILE), emb2doc_bytes)?;

    let mut payload_bytes = Vec::with_capacity(payload.len() * cfg.bytes_per_dim as usize);
    match cfg.bytes_per_dim {
        4 => {
            for &v in &payload {
                payload_bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        2 => {
            // round-to-nearest-even conversion
            for &v in &payload {
                payload_bytes.extend_from_slice(&f16::from_f32(v).to_le_bytes());
            }
        }
        _ => unreachable!("validated"),
    }
    write_with_crc(&out_dir.join(PAYLOAD_FILE), payload_bytes)?;

    let mut docids_text = String::new();
    for id in &doc_ids {
        docids_text.push_str(id);
        docids_text.push('\n');
    }
    let docids_crc = crc32fast::hash(docids_text.as_bytes());
    docids_text.push_str(&format!("#crc32={docids_crc:08x}\n"));
    fs::write(out_dir.join(DOCIDS_FILE), &docids_text)
        .map_err(|e| Error::io(out_dir.join(DOCIDS_FILE), e))?;

    encoder.projection().save(&out_dir.join(PROJECTION_FILE))?;

    let mut manifest = IndexManifest {
        version: INDEX_VERSION,
        dim,
        metric: encoder.config().metric,
        bytes_per_dim: cfg.bytes_per_dim,
        doc_count: doc_ids.len(),
        total_embeddings,
        skipped,
        encoder: encoder.config().clone(),
        crc32: 0,
    };
    manifest.crc32 = manifest_checksum(&manifest);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;

    EmbeddingIndex::open(out_dir)
}

/// Exact payload size of an index: one value per embedding dimension.
pub fn payload_bytes(total_embeddings: u64, dim: u64, bytes_per_dim: u64) -> u64 {
    total_embeddings * dim * bytes_per_dim
}

/// In-memory read view of an index directory. Half-precision payloads are
/// widened to f32 on open.
#[derive(Debug)]
pub struct EmbeddingIndex {
    dir: PathBuf,
    manifest: IndexManifest,
    doclens: Vec<u32>,
    /// prefix sums over doclens, length doc_count + 1
    offsets: Vec<u64>,
    payload: Vec<f32>,
    emb2doc: Vec<u32>,
    doc_ids: Vec<String>,
    id_to_ord: HashMap<String, u32>,
    metadata_bytes: u64,
}

impl EmbeddingIndex {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest_text =
            fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: IndexManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
        if manifest.version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                path: manifest_path.display().to_string(),
                expected: INDEX_VERSION,
                got: manifest.version,
            });
        }
        if manifest.crc32 != manifest_checksum(&manifest) {
            return Err(Error::ChecksumMismatch(manifest_path.display().to_string()));
        }

        let doclens_bytes = read_with_crc(&dir.join(DOCLENS_FILE))?;
        let doclens: Vec<u32> = doclens_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let emb2doc_bytes = read_with_crc(&dir.join(EMB2DOC_FILE))?;
        let emb2doc: Vec<u32> = emb2doc_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let payload_raw = read_with_crc(&dir.join(PAYLOAD_FILE))?;
        let payload: Vec<f32> = match manifest.bytes_per_dim {
            4 => payload_raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            2 => payload_raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
            other => {
                return Err(Error::malformed(
                    &manifest_path,
                    format!("unsupported bytes_per_dim {other}"),
                ))
            }
        };

        let docids_path = dir.join(DOCIDS_FILE);
        let docids_text =
            fs::read_to_string(&docids_path).map_err(|e| Error::io(&docids_path, e))?;
        let (body, crc_line) = docids_text
            .rsplit_once("#crc32=")
            .ok_or_else(|| Error::malformed(&docids_path, "missing checksum line"))?;
        let stored = u32::from_str_radix(crc_line.trim(), 16)
            .map_err(|_| Error::malformed(&docids_path, "bad checksum line"))?;
        if crc32fast::hash(body.as_bytes()) != stored {
            return Err(Error::ChecksumMismatch(docids_path.display().to_string()));
        }
        let doc_ids: Vec<String> = body.lines().map(|l| l.to_string()).collect();

        // invariants
        let total: u64 = doclens.iter().map(|&l| l as u64).sum();
        if doclens.len() != manifest.doc_count
            || doc_ids.len() != manifest.doc_count
            || total != manifest.total_embeddings
            || emb2doc.len() as u64 != total
            || payload.len() as u64 != total * manifest.dim as u64
        {
            return Err(Error::malformed(
                dir,
                "inconsistent doc/embedding counts across index files",
            ));
        }

        let mut offsets = Vec::with_capacity(doclens.len() + 1);
        let mut acc = 0u64;
        offsets.push(0);
        for &l in &doclens {
            acc += l as u64;
            offsets.push(acc);
        }
        let id_to_ord = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();

        let mut metadata_bytes = 0u64;
        for f in [MANIFEST_FILE, DOCLENS_FILE, EMB2DOC_FILE, DOCIDS_FILE, PROJECTION_FILE] {
            let p = dir.join(f);
            if let Ok(meta) = fs::metadata(&p) {
                metadata_bytes += meta.len();
            }
        }

        Ok(EmbeddingIndex {
            dir: dir.to_path_buf(),
            manifest,
            doclens,
            offsets,
            payload,
            emb2doc,
            doc_ids,
            id_to_ord,
            metadata_bytes,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.manifest.metric
    }

    pub fn doc_count(&self) -> usize {
        self.manifest.doc_count
    }

    pub fn total_embeddings(&self) -> u64 {
        self.manifest.total_embeddings
    }

    pub fn doc_len(&self, ord: u32) -> usize {
        self.doclens[ord as usize] as usize
    }

    pub fn doc_id(&self, ord: u32) -> &str {
        &self.doc_ids[ord as usize]
    }

    pub fn ord_of(&self, doc_id: &str) -> Option<u32> {
        self.id_to_ord.get(doc_id).copied()
    }

    pub fn doc_slice(&self, ord: u32) -> &[f32] {
        let dim = self.manifest.dim;
        let start = self.offsets[ord as usize] as usize * dim;
        let end = self.offsets[ord as usize + 1] as usize * dim;
        &self.payload[start..end]
    }

    pub fn doc_matrix(&self, ord: u32) -> EmbeddingMatrix {
        EmbeddingMatrix::from_data(self.manifest.dim, self.doc_slice(ord).to_vec())
            .expect("stored payload is rectangular")
    }

    /// All stored embeddings as one flat row-major matrix.
    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    pub fn emb2doc(&self) -> &[u32] {
        &self.emb2doc
    }

    pub fn doclens(&self) -> &[u32] {
        &self.doclens
    }

    pub fn projection(&self) -> Result<ProjectionLayer> {
        ProjectionLayer::load(&self.dir.join(PROJECTION_FILE))
    }

    /// Rebuild the encoder this index was created with.
    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.manifest.encoder.clone(), self.projection()?)
    }

    /// Exact on-disk byte count: payload (per the size formula, plus its
    /// trailing checksum) plus all metadata files.
    pub fn footprint(&self) -> u64 {
        payload_bytes(
            self.manifest.total_embeddings,
            self.manifest.dim as u64,
            self.manifest.bytes_per_dim as u64,
        ) + 4
            + self.metadata_bytes
    }
}
