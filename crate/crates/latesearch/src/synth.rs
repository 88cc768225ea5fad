//! Seeded synthetic data: a topic-structured corpus with matching queries,
//! relevance judgements, and training triples. Everything is deterministic
//! given the seed so pipeline tests can assert exact outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub docs: usize,
    pub queries: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub topics: usize,
    pub triples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            docs: 2000,
            queries: 50,
            min_len: 5,
            max_len: 60,
            topics: 20,
            triples: 200,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.docs == 0 || self.topics == 0 {
            return Err(Error::InvalidConfig("docs and topics must be >= 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// `(doc_id, text)`
    pub docs: Vec<(String, String)>,
    /// `(query_id, text)`
    pub queries: Vec<(String, String)>,
    /// `(query_id, relevant doc_id)` — binary relevance
    pub qrels: Vec<(String, String)>,
    /// `(query text, positive doc text, negative doc text)`
    pub triples: Vec<(String, String, String)>,
}

/// Generate the full synthetic bundle. Each document draws most of its words
/// from its topic's private vocabulary plus a shared pool, with occasional
/// punctuation; queries sample content words from a source document, which
/// becomes their relevant document.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let topic_words: Vec<Vec<String>> = (0..cfg.topics)
        .map(|t| (0..30).map(|j| format!("t{t}w{j}")).collect())
        .collect();
    let shared: Vec<String> = (0..40).map(|j| format!("common{j}")).collect();
    let punct = [",", ".", "!", "?"];

    let mut docs = Vec::with_capacity(cfg.docs);
    let mut doc_topics = Vec::with_capacity(cfg.docs);
    for i in 0..cfg.docs {
        let topic = rng.random_range(0..cfg.topics);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let r: f64 = rng.random();
            if r < 0.70 {
                words.push(topic_words[topic][rng.random_range(0..30)].clone());
            } else if r < 0.95 {
                words.push(shared[rng.random_range(0..40)].clone());
            } else {
                words.push(punct[rng.random_range(0..punct.len())].to_string());
            }
        }
        docs.push((format!("d{i}"), words.join(" ")));
        doc_topics.push(topic);
    }

    let content_words = |text: &str| -> Vec<String> {
        text.split_whitespace()
            .filter(|w| !punct.contains(w))
            .map(str::to_string)
            .collect()
    };

    let mut queries = Vec::with_capacity(cfg.queries);
    let mut qrels = Vec::with_capacity(cfg.queries);
    for qi in 0..cfg.queries {
        let src = rng.random_range(0..cfg.docs);
        let words = content_words(&docs[src].1);
        let n = rng.random_range(2..=4.min(words.len().max(2)));
        let picked: Vec<String> = (0..n)
            .map(|_| words[rng.random_range(0..words.len())].clone())
            .collect();
        queries.push((format!("q{qi}"), picked.join(" ")));
        qrels.push((format!("q{qi}"), docs[src].0.clone()));
    }

    let mut triples = Vec::with_capacity(cfg.triples);
    if cfg.topics > 1 {
        for _ in 0..cfg.triples {
            let pos = rng.random_range(0..cfg.docs);
            let words = content_words(&docs[pos].1);
            let n = rng.random_range(2..=4.min(words.len().max(2)));
            let qtext: Vec<String> = (0..n)
                .map(|_| words[rng.random_range(0..words.len())].clone())
                .collect();
            let neg = loop {
                let cand = rng.random_range(0..cfg.docs);
                if doc_topics[cand] != doc_topics[pos] {
                    break cand;
                }
            };
            triples.push((qtext.join(" "), docs[pos].1.clone(), docs[neg].1.clone()));
        }
    }

    Ok(SynthData {
        docs,
        queries,
        qrels,
        triples,
    })
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Write the bundle as corpus.tsv, queries.tsv, qrels.txt (TREC format), and
/// triples.tsv under `dir`.
pub fn write_files(data: &SynthData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("corpus.tsv");
    let mut w = writer(&path)?;
    for (id, text) in &data.docs {
        writeln!(w, "{id}\t{text}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("queries.tsv");
    let mut w = writer(&path)?;
    for (id, text) in &data.queries {
        writeln!(w, "{id}\t{text}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("qrels.txt");
    let mut w = writer(&path)?;
    for (qid, did) in &data.qrels {
        writeln!(w, "{qid} 0 {did} 1").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("triples.tsv");
    let mut w = writer(&path)?;
    for (q, pos, neg) in &data.triples {
        writeln!(w, "{q}\t{pos}\t{neg}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            docs: 50,
            queries: 10,
            triples: 20,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.docs, b.docs);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.qrels, b.qrels);
        assert_eq!(a.triples, b.triples);
    }

    #[test]
    fn lengths_and_counts_respected() {
        let cfg = SynthConfig {
            docs: 200,
            queries: 25,
            min_len: 5,
            max_len: 60,
            triples: 30,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.docs.len(), 200);
        assert_eq!(data.queries.len(), 25);
        assert_eq!(data.qrels.len(), 25);
        assert_eq!(data.triples.len(), 30);
        for (_, text) in &data.docs {
            let n = text.split_whitespace().count();
            assert!((5..=60).contains(&n), "doc length {n}");
        }
        let ids: HashSet<&String> = data.docs.iter().map(|(id, _)| id).collect();
        assert_eq!(ids.len(), 200);
    }

    #[test]
    fn qrels_point_at_existing_docs_and_queries_share_their_words() {
        let cfg = SynthConfig {
            docs: 100,
            queries: 20,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let by_id: std::collections::HashMap<&str, &str> = data
            .docs
            .iter()
            .map(|(id, text)| (id.as_str(), text.as_str()))
            .collect();
        for ((qid, qtext), (rqid, did)) in data.queries.iter().zip(&data.qrels) {
            assert_eq!(qid, rqid);
            let doc_text = by_id[did.as_str()];
            let doc_words: HashSet<&str> = doc_text.split_whitespace().collect();
            for w in qtext.split_whitespace() {
                assert!(doc_words.contains(w), "query word {w} not in source doc");
            }
        }
    }

    #[test]
    fn triples_are_non_degenerate() {
        let cfg = SynthConfig {
            docs: 100,
            triples: 50,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for (_, pos, neg) in &data.triples {
            assert_ne!(pos, neg);
        }
    }

    #[test]
    fn files_round_trip() {
        let cfg = SynthConfig {
            docs: 30,
            queries: 5,
            triples: 10,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_files(&data, dir.path()).unwrap();

        let corpus: Vec<(String, String)> =
            crate::indexer::read_corpus_tsv(&dir.path().join("corpus.tsv"))
                .unwrap()
                .collect::<Result<_>>()
                .unwrap();
        assert_eq!(corpus, data.docs);

        let qrels = crate::eval::Qrels::read(&dir.path().join("qrels.txt")).unwrap();
        assert_eq!(qrels.relevant.len(), data.qrels.iter().map(|(q, _)| q).collect::<HashSet<_>>().len());

        let triples = crate::trainer::read_triples(&dir.path().join("triples.tsv")).unwrap();
        assert_eq!(triples.len(), 10);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.min_len = 10;
        cfg.max_len = 5;
        assert!(generate(&cfg).is_err());
    }
}
