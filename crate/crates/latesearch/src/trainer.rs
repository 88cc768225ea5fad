//! Pairwise softmax cross-entropy training of the projection layer over
//! frozen base token embeddings.
//!
//! The forward pass here runs end-to-end in f64 (projection, normalization,
//! MaxSim, loss) so the analytic gradient can be checked against central
//! finite differences at tight tolerance. The argmax selections inside MaxSim
//! are treated as locally constant, with ties flowing to the first-index
//! winner, matching the scoring kernels.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::{BaseEmbeddings, Embedder, ProjectionLayer, NORM_EPSILON};
use crate::error::{Error, Result};
use crate::scoring::SimilarityMetric;

/// A training example: query text with one positive and one negative document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

impl Triple {
    pub fn is_degenerate(&self) -> bool {
        self.positive == self.negative
    }
}

fn default_learning_rate() -> f64 {
    3e-3
}
fn default_batch_size() -> usize {
    32
}
fn default_iterations() -> usize {
    200
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            iterations: default_iterations(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `-log(exp(s_pos) / (exp(s_pos) + exp(s_neg)))`, evaluated as
/// `softplus(-(s_pos - s_neg))` for numerical stability.
pub fn pairwise_loss(s_pos: f64, s_neg: f64) -> Result<f64> {
    if !s_pos.is_finite() || !s_neg.is_finite() {
        return Err(Error::NonFinite("pairwise_loss inputs".into()));
    }
    Ok(softplus(-(s_pos - s_neg)))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pair forward state needed for backprop.
struct PairForward {
    score: f64,
    /// normalized query rows, row-major n_q x m
    e: Vec<f64>,
    q_norms: Vec<f64>,
    /// normalized doc rows, row-major n_d x m
    f: Vec<f64>,
    d_norms: Vec<f64>,
    /// winning doc row per query row
    argmax: Vec<usize>,
}

fn encode_rows(proj: &ProjectionLayer, base: &BaseEmbeddings) -> (Vec<f64>, Vec<f64>) {
    let m = proj.dim();
    let rows = base.rows();
    let mut out = vec![0.0f64; rows * m];
    let mut norms = vec![0.0f64; rows];
    for i in 0..rows {
        let row = &mut out[i * m..(i + 1) * m];
        proj.apply(base.row(i), row);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPSILON);
        norms[i] = norm;
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    (out, norms)
}

fn sim(metric: SimilarityMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        SimilarityMetric::Cosine => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        SimilarityMetric::NegSquaredL2 => {
            -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        }
    }
}

fn forward_pair(
    proj: &ProjectionLayer,
    metric: SimilarityMetric,
    base_q: &BaseEmbeddings,
    base_d: &BaseEmbeddings,
) -> PairForward {
    let m = proj.dim();
    let (e, q_norms) = encode_rows(proj, base_q);
    let (f, d_norms) = encode_rows(proj, base_d);
    let n_q = base_q.rows();
    let n_d = base_d.rows();
    let mut score = 0.0;
    let mut argmax = Vec::with_capacity(n_q);
    for i in 0..n_q {
        let qrow = &e[i * m..(i + 1) * m];
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0;
        for j in 0..n_d {
            let s = sim(metric, qrow, &f[j * m..(j + 1) * m]);
            if s > best {
                best = s;
                best_j = j;
            }
        }
        score += best;
        argmax.push(best_j);
    }
    PairForward {
        score,
        e,
        q_norms,
        f,
        d_norms,
        argmax,
    }
}

/// Backprop `coef * dScore/dW` into `grad` for one (query, doc) pair.
fn accumulate_pair_grad(
    coef: f64,
    metric: SimilarityMetric,
    base_q: &BaseEmbeddings,
    base_d: &BaseEmbeddings,
    fwd: &PairForward,
    grad: &mut [f64],
) {
    let dim = fwd.e.len() / base_q.rows();
    let n_q = base_q.rows();
    let n_d = base_d.rows();

    // gradient wrt doc rows accumulates over the query rows that select them
    let mut g_f = vec![0.0f64; fwd.f.len()];

    let mut g_e = vec![0.0f64; dim];
    for i in 0..n_q {
        let j = fwd.argmax[i];
        let e_i = &fwd.e[i * dim..(i + 1) * dim];
        let f_j = &fwd.f[j * dim..(j + 1) * dim];
        match metric {
            SimilarityMetric::Cosine => {
                g_e.copy_from_slice(f_j);
                for (gf, &ei) in g_f[j * dim..(j + 1) * dim].iter_mut().zip(e_i) {
                    *gf += ei;
                }
            }
            SimilarityMetric::NegSquaredL2 => {
                for k in 0..dim {
                    g_e[k] = 2.0 * (f_j[k] - e_i[k]);
                    g_f[j * dim + k] += 2.0 * (e_i[k] - f_j[k]);
                }
            }
        }
        backprop_row(coef, &g_e, e_i, fwd.q_norms[i], base_q.row(i), dim, grad);
    }
    for j in 0..n_d {
        let gf = &g_f[j * dim..(j + 1) * dim];
        if gf.iter().all(|&v| v == 0.0) {
            continue;
        }
        let f_j = &fwd.f[j * dim..(j + 1) * dim];
        backprop_row(coef, gf, f_j, fwd.d_norms[j], base_d.row(j), dim, grad);
    }
}

/// Given dScore/d(normalized row), push through the normalization and the
/// projection: g_p = (g - (g . e) e) / norm; dW += b (outer) g_p.
fn backprop_row(
    coef: f64,
    g: &[f64],
    e: &[f64],
    norm: f64,
    base_row: &[f64],
    dim: usize,
    grad: &mut [f64],
) {
    let g_dot_e: f64 = g.iter().zip(e).map(|(a, b)| a * b).sum();
    for (bi, &b) in base_row.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let row = &mut grad[bi * dim..(bi + 1) * dim];
        for k in 0..dim {
            row[k] += coef * b * (g[k] - g_dot_e * e[k]) / norm;
        }
    }
}

fn base_doc(embedder: &Embedder, doc_id_hint: &str, text: &str) -> Result<BaseEmbeddings> {
    let tokens = embedder.doc_tokens(text);
    let keep = embedder.keep_mask(&tokens);
    let base = embedder.toy_embed(&tokens);
    let dim = base.dim;
    let mut data = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            data.extend_from_slice(base.row(i));
        }
    }
    if data.is_empty() {
        return Err(Error::EmptyDocument(doc_id_hint.to_string()));
    }
    Ok(BaseEmbeddings { dim, data })
}

fn triple_forward(
    embedder: &Embedder,
    triple: &Triple,
    proj: &ProjectionLayer,
) -> Result<(BaseEmbeddings, BaseEmbeddings, BaseEmbeddings, PairForward, PairForward)> {
    let metric = embedder.config().metric;
    let base_q = embedder.toy_embed(&embedder.query_tokens(&triple.query));
    let base_pos = base_doc(embedder, "positive", &triple.positive)?;
    let base_neg = base_doc(embedder, "negative", &triple.negative)?;
    let fwd_pos = forward_pair(proj, metric, &base_q, &base_pos);
    let fwd_neg = forward_pair(proj, metric, &base_q, &base_neg);
    Ok((base_q, base_pos, base_neg, fwd_pos, fwd_neg))
}

/// Loss of one triple under the given projection weights.
pub fn triple_loss(embedder: &Embedder, triple: &Triple, proj: &ProjectionLayer) -> Result<f64> {
    let (_, _, _, fwd_pos, fwd_neg) = triple_forward(embedder, triple, proj)?;
    pairwise_loss(fwd_pos.score, fwd_neg.score)
}

/// Analytic gradient of the triple loss with respect to the projection
/// weights (row-major `base_dim x dim`). Also returns the loss.
pub fn loss_gradient(
    embedder: &Embedder,
    triple: &Triple,
    proj: &ProjectionLayer,
) -> Result<(f64, Vec<f64>)> {
    let (base_q, base_pos, base_neg, fwd_pos, fwd_neg) = triple_forward(embedder, triple, proj)?;
    let loss = pairwise_loss(fwd_pos.score, fwd_neg.score)?;
    let delta = fwd_pos.score - fwd_neg.score;
    // d softplus(-delta) / d s_pos = -sigmoid(-delta); / d s_neg = +sigmoid(-delta)
    let g = sigmoid(-delta);
    // the two score gradients are built separately and subtracted so that a
    // textually identical d+/d- pair cancels exactly, not just approximately
    let n = proj.base_dim() * proj.dim();
    let mut grad_pos = vec![0.0f64; n];
    let mut grad_neg = vec![0.0f64; n];
    accumulate_pair_grad(1.0, embedder.config().metric, &base_q, &base_pos, &fwd_pos, &mut grad_pos);
    accumulate_pair_grad(1.0, embedder.config().metric, &base_q, &base_neg, &fwd_neg, &mut grad_neg);
    let grad: Vec<f64> = grad_pos
        .iter()
        .zip(&grad_neg)
        .map(|(p, q)| g * (q - p))
        .collect();
    Ok((loss, grad))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub projection: ProjectionLayer,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// Mini-batch gradient descent over the triples. Deterministic given the
/// config seed; per-triple gradients are evaluated in parallel but summed in
/// a fixed order.
pub fn train(
    triples: &[Triple],
    cfg: &TrainConfig,
    embedder: &Embedder,
    initial: ProjectionLayer,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let usable: Vec<&Triple> = triples.iter().filter(|t| !t.is_degenerate()).collect();
    if usable.is_empty() {
        return Err(Error::NoData("no non-degenerate training triples".into()));
    }
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);

    let mut proj = initial;
    let n_weights = proj.base_dim() * proj.dim();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut cursor = 0usize;
    for _ in 0..cfg.iterations {
        let batch: Vec<&Triple> = (0..cfg.batch_size.min(usable.len()))
            .map(|i| usable[order[(cursor + i) % order.len()]])
            .collect();
        cursor = (cursor + batch.len()) % order.len();

        let results: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .map(|t| loss_gradient(embedder, t, &proj))
            .collect();
        let mut total = vec![0.0f64; n_weights];
        let mut loss_sum = 0.0;
        for r in results {
            let (loss, grad) = r?;
            loss_sum += loss;
            for (t, g) in total.iter_mut().zip(&grad) {
                *t += g;
            }
        }
        let scale = cfg.learning_rate / batch.len() as f64;
        for (w, g) in proj.weights_mut().iter_mut().zip(&total) {
            *w -= scale * g;
        }
        losses.push(loss_sum / batch.len() as f64);
    }
    Ok(TrainOutcome {
        projection: proj,
        losses,
    })
}

/// Parse a `query \t positive \t negative` TSV file.
pub fn read_triples(path: &std::path::Path) -> Result<Vec<Triple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(q), Some(pos), Some(neg)) => out.push(Triple {
                query: q.to_string(),
                positive: pos.to_string(),
                negative: neg.to_string(),
            }),
            _ => {
                return Err(Error::malformed(
                    path,
                    format!("line {}: expected 3 tab-separated fields", lineno + 1),
                ))
            }
        }
    }
    Ok(out)
}
