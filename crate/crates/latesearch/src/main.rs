//! Command-line surface for the retrieval pipeline: synthetic data
//! generation, index building, ANN construction, projection training,
//! search, re-ranking, and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use latesearch::ann::{AnnConfig, IvfPqIndex, ANN_FILE};
use latesearch::config::AppConfig;
use latesearch::encoder::Encoder;
use latesearch::error::{Error, Result};
use latesearch::eval::{read_run, EvalReport, Qrels};
use latesearch::indexer::{build_index, read_corpus_tsv, EmbeddingIndex};
use latesearch::retrieval::{rerank, retrieve, write_run, RetrievalMode};
use latesearch::synth;
use latesearch::trainer::{read_triples, train};

#[derive(Parser)]
#[command(name = "latesearch", version, about = "Late-interaction passage retrieval")]
struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    /// approximate two-stage retrieval
    E2e,
    /// exhaustive stage 1 (oracle)
    E2eExact,
}

impl From<ModeArg> for RetrievalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::E2e => RetrievalMode::EndToEnd,
            ModeArg::E2eExact => RetrievalMode::EndToEndExact,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus, queries, qrels, and triples
    Synth {
        /// output directory
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode a corpus TSV (doc_id \t text) into an embedding index
    Index {
        /// corpus TSV path
        #[arg(long)]
        corpus: PathBuf,
        /// index output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// 4 for f32 storage, 2 for f16
        #[arg(long)]
        bytes_per_dim: Option<u8>,
    },
    /// Build the IVF-PQ vector index over an existing embedding index
    AnnBuild {
        /// embedding index directory
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        partitions: Option<usize>,
        #[arg(long)]
        sub_vectors: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the projection layer on training triples and save it
    Train {
        /// triples TSV (query \t positive \t negative)
        #[arg(long)]
        triples: PathBuf,
        /// output projection file
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrieve from the full collection and write a TREC run file
    Search {
        #[arg(long)]
        index: PathBuf,
        /// queries TSV (qid \t text)
        #[arg(long)]
        queries: PathBuf,
        /// output run file
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "e2e")]
        mode: ModeArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        k_prime: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long, default_value = "latesearch")]
        tag: String,
    },
    /// Re-rank externally supplied candidates and write a TREC run file
    Rerank {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// candidates TSV (qid \t docid)
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "latesearch")]
        tag: String,
    },
    /// Score a run file against qrels and print a report
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// evaluate only a random sample of N queries
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value = "0")]
        seed: u64,
        /// write the JSON report here instead of stdout
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

fn read_tsv_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let a = parts.next().unwrap_or_default().to_string();
        let b = parts
            .next()
            .ok_or_else(|| Error::malformed(path, format!("line {}: expected 2 fields", lineno + 1)))?
            .to_string();
        out.push((a, b));
    }
    Ok(out)
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig> {
    match path {
        Some(p) => AppConfig::load(p),
        None => Ok(AppConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Synth {
            out,
            docs,
            queries,
            seed,
        } => {
            if let Some(d) = docs {
                cfg.synth.docs = d;
            }
            if let Some(q) = queries {
                cfg.synth.queries = q;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let data = synth::generate(&cfg.synth)?;
            synth::write_files(&data, &out)?;
            println!(
                "wrote {} docs, {} queries, {} triples to {}",
                data.docs.len(),
                data.queries.len(),
                data.triples.len(),
                out.display()
            );
        }
        Command::Index {
            corpus,
            out,
            workers,
            bytes_per_dim,
        } => {
            if let Some(w) = workers {
                cfg.indexer.worker_count = w;
            }
            if let Some(b) = bytes_per_dim {
                cfg.indexer.bytes_per_dim = b;
            }
            cfg.indexer.validate()?;
            let encoder = Encoder::seeded(cfg.encoder.clone())?;
            let docs = read_corpus_tsv(&corpus)?;
            let index = build_index(docs, &encoder, &cfg.indexer, &out)?;
            println!(
                "indexed {} docs, {} embeddings ({} bytes) at {}",
                index.doc_count(),
                index.total_embeddings(),
                index.footprint(),
                out.display()
            );
        }
        Command::AnnBuild {
            index,
            partitions,
            sub_vectors,
            seed,
        } => {
            if let Some(p) = partitions {
                cfg.ann.partitions = p;
            }
            if let Some(s) = sub_vectors {
                cfg.ann.sub_vectors = s;
            }
            if let Some(s) = seed {
                cfg.ann.seed = s;
            }
            let emb = EmbeddingIndex::open(&index)?;
            let mut ann = IvfPqIndex::new(emb.dim(), cfg.ann.partitions, emb.metric());
            let sample = training_sample(emb.payload(), emb.dim(), &cfg.ann);
            ann.train(&sample, &cfg.ann)?;
            ann.add_all(emb.payload())?;
            let path = index.join(ANN_FILE);
            ann.save(&path)?;
            println!(
                "built IVF-PQ over {} embeddings ({} cells) at {}",
                ann.len(),
                ann.partitions(),
                path.display()
            );
        }
        Command::Train {
            triples,
            out,
            iterations,
            learning_rate,
            seed,
        } => {
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let triples = read_triples(&triples)?;
            let encoder = Encoder::seeded(cfg.encoder.clone())?;
            let outcome = train(
                &triples,
                &cfg.train,
                encoder.embedder(),
                encoder.projection().clone(),
            )?;
            outcome.projection.save(&out)?;
            println!(
                "trained on {} triples for {} iterations; loss {:.6} -> {:.6}; saved {}",
                triples.len(),
                cfg.train.iterations,
                outcome.losses.first().copied().unwrap_or(f64::NAN),
                outcome.losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Search {
            index,
            queries,
            out,
            mode,
            k,
            k_prime,
            probes,
            tag,
        } => {
            if let Some(k) = k {
                cfg.retrieval.k = k;
            }
            if let Some(kp) = k_prime {
                cfg.retrieval.k_prime = Some(kp);
            }
            if let Some(p) = probes {
                cfg.retrieval.probes = p;
            }
            cfg.retrieval.mode = mode.into();
            cfg.retrieval.validate()?;
            let emb = EmbeddingIndex::open(&index)?;
            let encoder = emb.encoder()?;
            let ann = match cfg.retrieval.mode {
                RetrievalMode::EndToEnd => Some(IvfPqIndex::load(&index.join(ANN_FILE))?),
                _ => None,
            };
            let queries = read_tsv_pairs(&queries)?;
            let mut lists = Vec::with_capacity(queries.len());
            for (qid, text) in &queries {
                let q = encoder.encode_query(qid, text);
                lists.push(retrieve(&q, &cfg.retrieval, &emb, ann.as_ref())?);
            }
            let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
            write_run(&mut w, &lists, &tag)?;
            w.flush().map_err(|e| Error::io(&out, e))?;
            println!("wrote run for {} queries to {}", lists.len(), out.display());
        }
        Command::Rerank {
            index,
            queries,
            candidates,
            out,
            k,
            tag,
        } => {
            if let Some(k) = k {
                cfg.retrieval.k = k;
            }
            let emb = EmbeddingIndex::open(&index)?;
            let encoder = emb.encoder()?;
            let queries = read_tsv_pairs(&queries)?;
            let mut cand_map: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for (qid, did) in read_tsv_pairs(&candidates)? {
                cand_map.entry(qid).or_default().push(did);
            }
            let mut lists = Vec::new();
            for (qid, text) in &queries {
                let Some(cands) = cand_map.get(qid) else {
                    eprintln!("warning: no candidates for query {qid:?}, skipped");
                    continue;
                };
                let q = encoder.encode_query(qid, text);
                lists.push(rerank(&q, cands, &emb, cfg.retrieval.k)?);
            }
            let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
            write_run(&mut w, &lists, &tag)?;
            w.flush().map_err(|e| Error::io(&out, e))?;
            println!("wrote run for {} queries to {}", lists.len(), out.display());
        }
        Command::Eval {
            run,
            qrels,
            sample,
            seed,
            json_out,
        } => {
            let mut run = read_run(&run)?;
            let qrels = Qrels::read(&qrels)?;
            if let Some(n) = sample {
                let mut qids: Vec<String> = run.keys().cloned().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                qids.shuffle(&mut rng);
                qids.truncate(n);
                run.retain(|qid, _| qids.contains(qid));
            }
            let report = EvalReport::compute(&run, &qrels)?;
            match json_out {
                Some(p) => {
                    std::fs::write(&p, report.to_json()).map_err(|e| Error::io(&p, e))?;
                }
                None => println!("{}", report.to_json()),
            }
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

/// Cap the ANN training data at the configured sample size, taking an evenly
/// spaced subset so all regions of the collection contribute.
fn training_sample(payload: &[f32], dim: usize, cfg: &AnnConfig) -> Vec<f32> {
    let n = payload.len() / dim;
    let want = cfg.effective_train_sample();
    if n <= want {
        return payload.to_vec();
    }
    let mut out = Vec::with_capacity(want * dim);
    for i in 0..want {
        let idx = i * n / want;
        out.extend_from_slice(&payload[idx * dim..(idx + 1) * dim]);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
