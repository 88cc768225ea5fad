//! Text-to-embedding pipeline: tokenize, prepend marker tokens, augment
//! queries with [MASK] padding, embed with a deterministic contextual
//! embedder, project to the output dimension, L2-normalize, and filter
//! punctuation rows from documents.
//!
//! The base embedder is a stand-in for a deep LM: each token gets a
//! hash-seeded pseudo-random vector, then positions are mixed with their
//! neighbors (triangular weights) so the output depends on context.

mod exchange;

pub use exchange::{load_precomputed, write_exchange, ExchangeDtype, ExchangeRecord};

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{DocRepresentation, EmbeddingMatrix, QueryRepresentation, SimilarityMetric};

pub const CLS_TOKEN: &str = "[CLS]";
pub const QUERY_MARKER: &str = "[Q]";
pub const DOC_MARKER: &str = "[D]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Token-to-id interner with pre-assigned special tokens.
#[derive(Debug)]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

pub const CLS_ID: u32 = 0;
pub const QUERY_MARKER_ID: u32 = 1;
pub const DOC_MARKER_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        for special in [CLS_TOKEN, QUERY_MARKER, DOC_MARKER, MASK_TOKEN, UNK_TOKEN] {
            v.intern(special);
        }
        v
    }

    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.to_string(), id);
        self.tokens.push(token.to_string());
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub text: String,
    pub special: bool,
}

impl Token {
    fn special(id: u32, text: &str) -> Self {
        Token {
            id,
            text: text.to_string(),
            special: true,
        }
    }
}

pub type TokenSequence = Vec<Token>;

fn default_punctuation() -> BTreeSet<String> {
    // the 32 ASCII punctuation characters
    r##"!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~"##
        .chars()
        .map(|c| c.to_string())
        .collect()
}

fn default_n_query() -> usize {
    32
}
fn default_dim() -> usize {
    128
}
fn default_base_dim() -> usize {
    256
}
fn default_context_window() -> usize {
    2
}
fn default_max_doc_len() -> usize {
    180
}
fn default_metric() -> SimilarityMetric {
    SimilarityMetric::Cosine
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Fixed number of query embeddings, counting [CLS] and [Q].
    #[serde(default = "default_n_query")]
    pub n_query: usize,
    /// Output embedding dimension m.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Pre-projection width of the base embedder.
    #[serde(default = "default_base_dim")]
    pub base_dim: usize,
    /// Neighbor radius for contextualization; 0 disables mixing.
    #[serde(default = "default_context_window")]
    pub context_window: usize,
    /// Maximum document length in tokens, including [CLS] and [D].
    #[serde(default = "default_max_doc_len")]
    pub max_doc_len: usize,
    #[serde(default = "default_metric")]
    pub metric: SimilarityMetric,
    #[serde(default = "default_punctuation")]
    pub punctuation: BTreeSet<String>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_query: default_n_query(),
            dim: default_dim(),
            base_dim: default_base_dim(),
            context_window: default_context_window(),
            max_doc_len: default_max_doc_len(),
            metric: default_metric(),
            punctuation: default_punctuation(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_query < 2 {
            return Err(Error::InvalidConfig(
                "n_query must be >= 2 ([CLS] and [Q] occupy two positions)".into(),
            ));
        }
        if self.dim == 0 || self.base_dim == 0 {
            return Err(Error::InvalidConfig("dim and base_dim must be positive".into()));
        }
        if self.dim > self.base_dim {
            return Err(Error::InvalidConfig(format!(
                "dim ({}) must not exceed base_dim ({})",
                self.dim, self.base_dim
            )));
        }
        if self.max_doc_len < 2 {
            return Err(Error::InvalidConfig("max_doc_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// Linear projection from `base_dim` to `dim`, no bias, no activation.
/// Weights are row-major `base_dim x dim` and kept in f64 so training and
/// gradient checks are exact; encoding casts to f32 only after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer {
    base_dim: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl ProjectionLayer {
    pub fn new(base_dim: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != base_dim * dim {
            return Err(Error::DimensionMismatch {
                expected: base_dim * dim,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("projection weights".into()));
        }
        Ok(ProjectionLayer {
            base_dim,
            dim,
            weights,
        })
    }

    /// Seeded random initialization, scaled by 1/sqrt(base_dim).
    pub fn seeded(base_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f6a); // "proj"
        let scale = 1.0 / (base_dim as f64).sqrt();
        let weights = (0..base_dim * dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        ProjectionLayer {
            base_dim,
            dim,
            weights,
        }
    }

    pub fn zeros(base_dim: usize, dim: usize) -> Self {
        ProjectionLayer {
            base_dim,
            dim,
            weights: vec![0.0; base_dim * dim],
        }
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// `out = W^T b`, where `b` has length `base_dim`.
    pub fn apply(&self, base_row: &[f64], out: &mut [f64]) {
        debug_assert_eq!(base_row.len(), self.base_dim);
        debug_assert_eq!(out.len(), self.dim);
        out.fill(0.0);
        for (i, &b) in base_row.iter().enumerate() {
            let row = &self.weights[i * self.dim..(i + 1) * self.dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += b * w;
            }
        }
    }

    const MAGIC: &'static [u8; 6] = b"LSPRJ1";

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::with_capacity(14 + self.weights.len() * 8);
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(self.base_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 18 || &buf[..6] != Self::MAGIC {
            return Err(Error::malformed(path, "bad magic or truncated header"));
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::ChecksumMismatch(path.display().to_string()));
        }
        let base_dim = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
        let expected = 14 + base_dim * dim * 8 + 4;
        if buf.len() != expected {
            return Err(Error::malformed(path, "unexpected length"));
        }
        let weights = buf[14..buf.len() - 4]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ProjectionLayer::new(base_dim, dim, weights)
    }
}

/// Base (pre-projection) embeddings in f64, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEmbeddings {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl BaseEmbeddings {
    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn hash64(seed: u64, text: &str) -> u64 {
    // FNV-1a over the seed bytes then the token bytes
    let mut h = 0xcbf29ce484222325u64;
    for b in seed.to_le_bytes().iter().chain(text.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub const NORM_EPSILON: f64 = 1e-12;

/// Tokenization and the base embedder; immutable apart from the internal
/// token interner, so encoding calls are freely parallelizable.
#[derive(Debug)]
pub struct Embedder {
    cfg: EncoderConfig,
    vocab: Mutex<Vocabulary>,
}

impl Embedder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Embedder {
            cfg,
            vocab: Mutex::new(Vocabulary::new()),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Lowercase, split on whitespace, and emit punctuation characters as
    /// standalone single-char tokens.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut vocab = self.vocab.lock().unwrap();
        let mut out = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<Token>, vocab: &mut Vocabulary| {
            if !word.is_empty() {
                let id = vocab.intern(word);
                out.push(Token {
                    id,
                    text: std::mem::take(word),
                    special: false,
                });
            }
        };
        for c in text.chars().flat_map(|c| c.to_lowercase()) {
            if c.is_whitespace() {
                flush(&mut word, &mut out, &mut vocab);
            } else if c.is_ascii_punctuation() {
                flush(&mut word, &mut out, &mut vocab);
                let t = c.to_string();
                let id = vocab.intern(&t);
                out.push(Token {
                    id,
                    text: t,
                    special: false,
                });
            } else {
                word.push(c);
            }
        }
        flush(&mut word, &mut out, &mut vocab);
        out
    }

    /// `[CLS] [Q] t1..tl [MASK]...` padded or truncated to exactly `n_query`
    /// positions.
    pub fn augment_query(&self, tokens: TokenSequence) -> TokenSequence {
        let n = self.cfg.n_query;
        let mut out = Vec::with_capacity(n);
        out.push(Token::special(CLS_ID, CLS_TOKEN));
        out.push(Token::special(QUERY_MARKER_ID, QUERY_MARKER));
        out.extend(tokens.into_iter().take(n - 2));
        while out.len() < n {
            out.push(Token::special(MASK_ID, MASK_TOKEN));
        }
        out
    }

    /// `[CLS] [D] t1..tn`, truncated to `max_doc_len` positions. No [MASK]
    /// padding for documents.
    pub fn doc_tokens(&self, text: &str) -> TokenSequence {
        let mut out = Vec::new();
        out.push(Token::special(CLS_ID, CLS_TOKEN));
        out.push(Token::special(DOC_MARKER_ID, DOC_MARKER));
        out.extend(self.tokenize(text));
        out.truncate(self.cfg.max_doc_len);
        out
    }

    pub fn query_tokens(&self, text: &str) -> TokenSequence {
        self.augment_query(self.tokenize(text))
    }

    /// True for rows that survive punctuation filtering. Special tokens are
    /// never filtered.
    pub fn keep_mask(&self, tokens: &TokenSequence) -> Vec<bool> {
        tokens
            .iter()
            .map(|t| t.special || !self.cfg.punctuation.contains(&t.text))
            .collect()
    }

    /// Number of ordinary (non-special, non-punctuation) tokens.
    pub fn content_len(&self, tokens: &TokenSequence) -> usize {
        tokens
            .iter()
            .filter(|t| !t.special && !self.cfg.punctuation.contains(&t.text))
            .count()
    }

    /// Deterministic contextual base embeddings: a hash-seeded vector per
    /// token, then each position replaced by the triangular-weighted average
    /// of its neighbors within `context_window`.
    pub fn toy_embed(&self, tokens: &TokenSequence) -> BaseEmbeddings {
        let dim = self.cfg.base_dim;
        let n = tokens.len();
        let mut base = vec![0.0f64; n * dim];
        for (i, t) in tokens.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(hash64(self.cfg.seed, &t.text));
            for v in &mut base[i * dim..(i + 1) * dim] {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
        let w = self.cfg.context_window as isize;
        if w == 0 || n <= 1 {
            return BaseEmbeddings { dim, data: base };
        }
        let mut out = vec![0.0f64; n * dim];
        for i in 0..n as isize {
            let mut total_weight = 0.0f64;
            let row = &mut out[i as usize * dim..(i as usize + 1) * dim];
            for delta in -w..=w {
                let j = i + delta;
                if j < 0 || j >= n as isize {
                    continue;
                }
                let weight = (w + 1 - delta.abs()) as f64;
                total_weight += weight;
                let src = &base[j as usize * dim..(j as usize + 1) * dim];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += weight * s;
                }
            }
            for o in row.iter_mut() {
                *o /= total_weight;
            }
        }
        BaseEmbeddings { dim, data: out }
    }
}

/// Project a base row and L2-normalize it (epsilon-guarded), in f64.
pub fn project_normalize_row(proj: &ProjectionLayer, base_row: &[f64], out: &mut [f64]) {
    proj.apply(base_row, out);
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPSILON);
    for o in out.iter_mut() {
        *o /= norm;
    }
}

/// Full encoder: base embedder plus the trained projection. Counts query
/// encodings so serving paths can assert the query is processed once.
#[derive(Debug)]
pub struct Encoder {
    embedder: Embedder,
    projection: ProjectionLayer,
    query_encodes: AtomicU64,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, projection: ProjectionLayer) -> Result<Self> {
        cfg.validate()?;
        if projection.base_dim() != cfg.base_dim || projection.dim() != cfg.dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.base_dim * cfg.dim,
                got: projection.base_dim() * projection.dim(),
            });
        }
        Ok(Encoder {
            embedder: Embedder::new(cfg)?,
            projection,
            query_encodes: AtomicU64::new(0),
        })
    }

    /// Encoder with the default seeded projection derived from the config.
    pub fn seeded(cfg: EncoderConfig) -> Result<Self> {
        let proj = ProjectionLayer::seeded(cfg.base_dim, cfg.dim, cfg.seed);
        Encoder::new(cfg, proj)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.embedder.cfg
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn projection(&self) -> &ProjectionLayer {
        &self.projection
    }

    pub fn query_encode_count(&self) -> u64 {
        self.query_encodes.load(Ordering::Relaxed)
    }

    fn project_all(&self, base: &BaseEmbeddings, keep: Option<&[bool]>) -> EmbeddingMatrix {
        let dim = self.embedder.cfg.dim;
        let mut out = EmbeddingMatrix::new(dim);
        let mut row = vec![0.0f64; dim];
        let mut row32 = vec![0.0f32; dim];
        for i in 0..base.rows() {
            if let Some(mask) = keep {
                if !mask[i] {
                    continue;
                }
            }
            project_normalize_row(&self.projection, base.row(i), &mut row);
            for (a, &b) in row32.iter_mut().zip(&row) {
                *a = b as f32;
            }
            out.push_row(&row32).expect("row width is fixed");
        }
        out
    }

    /// Encode a query text into exactly `n_query` unit-norm embeddings.
    pub fn encode_query(&self, query_id: &str, text: &str) -> QueryRepresentation {
        self.query_encodes.fetch_add(1, Ordering::Relaxed);
        let tokens = self.embedder.query_tokens(text);
        let base = self.embedder.toy_embed(&tokens);
        QueryRepresentation {
            query_id: query_id.to_string(),
            embeddings: self.project_all(&base, None),
        }
    }

    /// Encode a document text; punctuation rows are dropped, marker rows kept.
    pub fn encode_doc(&self, doc_id: &str, text: &str) -> Result<DocRepresentation> {
        let tokens = self.embedder.doc_tokens(text);
        self.encode_doc_tokens(doc_id, &tokens)
    }

    /// Encode an already tokenized document (must come from [`Embedder::doc_tokens`]).
    pub fn encode_doc_tokens(&self, doc_id: &str, tokens: &TokenSequence) -> Result<DocRepresentation> {
        let keep = self.embedder.keep_mask(tokens);
        let base = self.embedder.toy_embed(tokens);
        let embeddings = self.project_all(&base, Some(&keep));
        if embeddings.is_empty() {
            return Err(Error::EmptyDocument(doc_id.to_string()));
        }
        Ok(DocRepresentation {
            doc_id: doc_id.to_string(),
            embeddings,
        })
    }
}
