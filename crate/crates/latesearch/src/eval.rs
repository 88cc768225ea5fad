//! Ranking evaluation: qrels and run-file parsing, MRR@10, Recall@k, and
//! mean average precision over binary relevance judgements.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Binary relevance judgements: query id -> set of relevant doc ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    /// Parse TREC qrels lines: `qid 0 docid rel`. Zero/negative relevance
    /// lines are ignored.
    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut qrels = Qrels::default();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::malformed(
                    path,
                    format!("line {}: expected 4 fields, got {}", lineno + 1, fields.len()),
                ));
            }
            let rel: i64 = fields[3]
                .parse()
                .map_err(|_| Error::malformed(path, format!("line {}: bad relevance", lineno + 1)))?;
            if rel > 0 {
                qrels
                    .relevant
                    .entry(fields[0].to_string())
                    .or_default()
                    .insert(fields[2].to_string());
            }
        }
        Ok(qrels)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.relevant.keys().map(String::as_str)
    }
}

/// Ranked doc ids per query, in rank order (rank 1 first).
pub type Run = BTreeMap<String, Vec<String>>;

/// Parse a TREC run file: `qid Q0 docid rank score tag`, sorted per query by
/// the rank field.
pub fn read_run(path: &Path) -> Result<Run> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ranked: BTreeMap<String, Vec<(u64, String)>> = BTreeMap::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::malformed(
                path,
                format!("line {}: expected 6 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let rank: u64 = fields[3]
            .parse()
            .map_err(|_| Error::malformed(path, format!("line {}: bad rank", lineno + 1)))?;
        ranked
            .entry(fields[0].to_string())
            .or_default()
            .push((rank, fields[2].to_string()));
    }
    let mut run = Run::new();
    for (qid, mut docs) in ranked {
        docs.sort_by_key(|(r, _)| *r);
        run.insert(qid, docs.into_iter().map(|(_, d)| d).collect());
    }
    Ok(run)
}

/// Queries present in both the run and the qrels. Queries missing from the
/// qrels are reported back so callers can warn about them.
fn scored_queries<'a>(run: &'a Run, qrels: &Qrels) -> Result<(Vec<&'a str>, Vec<&'a str>)> {
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for qid in run.keys() {
        if qrels.relevant.contains_key(qid) {
            scored.push(qid.as_str());
        } else {
            skipped.push(qid.as_str());
        }
    }
    if scored.is_empty() {
        return Err(Error::NoData(
            "no overlap between run queries and qrels".into(),
        ));
    }
    Ok((scored, skipped))
}

fn mean_over_queries<F>(run: &Run, qrels: &Qrels, per_query: F) -> Result<(f64, BTreeMap<String, f64>)>
where
    F: Fn(&[String], &BTreeSet<String>) -> f64,
{
    let (scored, skipped) = scored_queries(run, qrels)?;
    for qid in &skipped {
        eprintln!("warning: query {qid:?} missing from qrels, skipped");
    }
    let mut per = BTreeMap::new();
    let mut sum = 0.0;
    for qid in &scored {
        let v = per_query(&run[*qid], &qrels.relevant[*qid]);
        sum += v;
        per.insert((*qid).to_string(), v);
    }
    Ok((sum / scored.len() as f64, per))
}

/// Mean reciprocal rank of the first relevant doc within the top 10; 0 for
/// queries with no relevant doc that high.
pub fn mrr_at_10(run: &Run, qrels: &Qrels) -> Result<f64> {
    Ok(mean_over_queries(run, qrels, |docs, rel| {
        docs.iter()
            .take(10)
            .position(|d| rel.contains(d))
            .map(|p| 1.0 / (p as f64 + 1.0))
            .unwrap_or(0.0)
    })?
    .0)
}

/// Mean over queries of |relevant ∩ top-k| / |relevant|.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    Ok(mean_over_queries(run, qrels, |docs, rel| {
        let hit = docs.iter().take(k).filter(|d| rel.contains(*d)).count();
        hit as f64 / rel.len() as f64
    })?
    .0)
}

/// Mean average precision with binary relevance.
pub fn map_metric(run: &Run, qrels: &Qrels) -> Result<f64> {
    Ok(mean_over_queries(run, qrels, |docs, rel| {
        let mut hits = 0usize;
        let mut acc = 0.0;
        for (i, d) in docs.iter().enumerate() {
            if rel.contains(d) {
                hits += 1;
                acc += hits as f64 / (i + 1) as f64;
            }
        }
        acc / rel.len() as f64
    })?
    .0)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub query_count: usize,
    /// metric name -> aggregate (arithmetic mean of the per-query values)
    pub aggregates: BTreeMap<String, f64>,
    /// metric name -> per-query values
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalReport {
    /// Score a run against qrels with the standard metric set: MRR@10, MAP,
    /// and Recall@{50,200,1000}.
    pub fn compute(run: &Run, qrels: &Qrels) -> Result<Self> {
        let mut aggregates = BTreeMap::new();
        let mut per_query = BTreeMap::new();

        let (mrr, per) = mean_over_queries(run, qrels, |docs, rel| {
            docs.iter()
                .take(10)
                .position(|d| rel.contains(d))
                .map(|p| 1.0 / (p as f64 + 1.0))
                .unwrap_or(0.0)
        })?;
        let count = per.len();
        aggregates.insert("mrr_at_10".into(), mrr);
        per_query.insert("mrr_at_10".into(), per);

        for k in [50usize, 200, 1000] {
            let (r, per) = mean_over_queries(run, qrels, |docs, rel| {
                let hit = docs.iter().take(k).filter(|d| rel.contains(*d)).count();
                hit as f64 / rel.len() as f64
            })?;
            aggregates.insert(format!("recall_at_{k}"), r);
            per_query.insert(format!("recall_at_{k}"), per);
        }

        let (map, per) = mean_over_queries(run, qrels, |docs, rel| {
            let mut hits = 0usize;
            let mut acc = 0.0;
            for (i, d) in docs.iter().enumerate() {
                if rel.contains(d) {
                    hits += 1;
                    acc += hits as f64 / (i + 1) as f64;
                }
            }
            acc / rel.len() as f64
        })?;
        aggregates.insert("map".into(), map);
        per_query.insert("map".into(), per);

        Ok(EvalReport {
            query_count: count,
            aggregates,
            per_query,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table of the aggregate metrics.
    pub fn to_table(&self) -> String {
        let width = self
            .aggregates
            .keys()
            .map(String::len)
            .max()
            .unwrap_or(6)
            .max("metric".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  value", "metric");
        let _ = writeln!(out, "{:-<width$}  ------", "");
        for (name, value) in &self.aggregates {
            let _ = writeln!(out, "{name:<width$}  {value:.4}");
        }
        let _ = writeln!(out, "queries scored: {}", self.query_count);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn qrels_of(pairs: &[(&str, &[&str])]) -> Qrels {
        let mut q = Qrels::default();
        for (qid, docs) in pairs {
            q.relevant.insert(
                qid.to_string(),
                docs.iter().map(|d| d.to_string()).collect(),
            );
        }
        q
    }

    fn run_of(pairs: &[(&str, &[&str])]) -> Run {
        pairs
            .iter()
            .map(|(qid, docs)| {
                (
                    qid.to_string(),
                    docs.iter().map(|d| d.to_string()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn mrr_basics() {
        let qrels = qrels_of(&[("q1", &["d1"])]);
        let run = run_of(&[("q1", &["d1", "d2"])]);
        assert_eq!(mrr_at_10(&run, &qrels).unwrap(), 1.0);

        let run = run_of(&[("q1", &["a", "b", "c", "d1"])]);
        assert_eq!(mrr_at_10(&run, &qrels).unwrap(), 0.25);

        let qrels = qrels_of(&[("q1", &["d1"]), ("q2", &["x"])]);
        let run = run_of(&[("q1", &["d1"]), ("q2", &["y", "z"])]);
        assert_eq!(mrr_at_10(&run, &qrels).unwrap(), 0.5);
    }

    #[test]
    fn mrr_ignores_hits_after_rank_10() {
        let qrels = qrels_of(&[("q1", &["d1"])]);
        let docs: Vec<String> = (0..10)
            .map(|i| format!("x{i}"))
            .chain(["d1".to_string()])
            .collect();
        let mut run = Run::new();
        run.insert("q1".into(), docs);
        assert_eq!(mrr_at_10(&run, &qrels).unwrap(), 0.0);
    }

    #[test]
    fn recall_extremes() {
        let qrels = qrels_of(&[("q1", &["d1", "d2"])]);
        let run = run_of(&[("q1", &["d1", "d2", "d3"])]);
        assert_eq!(recall_at_k(&run, &qrels, 50).unwrap(), 1.0);
        let run = run_of(&[("q1", &["x", "y"])]);
        assert_eq!(recall_at_k(&run, &qrels, 50).unwrap(), 0.0);
    }

    #[test]
    fn map_basics() {
        let qrels = qrels_of(&[("q1", &["d1", "d2"])]);
        let run = run_of(&[("q1", &["d1", "d2", "x"])]);
        assert_eq!(map_metric(&run, &qrels).unwrap(), 1.0);

        let qrels = qrels_of(&[("q1", &["d1"])]);
        let run = run_of(&[("q1", &["x", "y", "d1"])]);
        assert!((map_metric(&run, &qrels).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_queries_error() {
        let qrels = qrels_of(&[("q1", &["d1"])]);
        let run = run_of(&[("q2", &["d1"])]);
        assert!(matches!(mrr_at_10(&run, &qrels), Err(Error::NoData(_))));
    }

    // slow but obviously-correct reference implementations
    fn naive_mrr(run: &Run, qrels: &Qrels) -> f64 {
        let mut vals = Vec::new();
        for (qid, docs) in run {
            let Some(rel) = qrels.relevant.get(qid) else { continue };
            let mut v = 0.0;
            for rank in 1..=10usize.min(docs.len()) {
                if rel.contains(&docs[rank - 1]) {
                    v = 1.0 / rank as f64;
                    break;
                }
            }
            vals.push(v);
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    fn naive_recall(run: &Run, qrels: &Qrels, k: usize) -> f64 {
        let mut vals = Vec::new();
        for (qid, docs) in run {
            let Some(rel) = qrels.relevant.get(qid) else { continue };
            let top: BTreeSet<&String> = docs.iter().take(k).collect();
            let hits = rel.iter().filter(|d| top.contains(d)).count();
            vals.push(hits as f64 / rel.len() as f64);
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    fn naive_map(run: &Run, qrels: &Qrels) -> f64 {
        let mut vals = Vec::new();
        for (qid, docs) in run {
            let Some(rel) = qrels.relevant.get(qid) else { continue };
            let mut precisions = Vec::new();
            for (i, d) in docs.iter().enumerate() {
                if rel.contains(d) {
                    let hits_so_far = docs[..=i].iter().filter(|x| rel.contains(*x)).count();
                    precisions.push(hits_so_far as f64 / (i + 1) as f64);
                }
            }
            vals.push(precisions.iter().sum::<f64>() / rel.len() as f64);
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn random_runs_match_naive_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n_docs = rng.random_range(5..30);
            let docs: Vec<String> = (0..n_docs).map(|i| format!("d{i}")).collect();
            let n_queries = rng.random_range(1..6);
            let mut qrels = Qrels::default();
            let mut run = Run::new();
            for qi in 0..n_queries {
                let qid = format!("q{qi}");
                let n_rel = rng.random_range(1..4.min(n_docs));
                let rel: BTreeSet<String> = (0..n_rel)
                    .map(|_| docs[rng.random_range(0..n_docs)].clone())
                    .collect();
                qrels.relevant.insert(qid.clone(), rel);
                let mut ranked = docs.clone();
                ranked.shuffle(&mut rng);
                ranked.truncate(rng.random_range(1..=n_docs));
                run.insert(qid, ranked);
            }
            assert!((mrr_at_10(&run, &qrels).unwrap() - naive_mrr(&run, &qrels)).abs() < 1e-9);
            for k in [3usize, 10, 50] {
                assert!(
                    (recall_at_k(&run, &qrels, k).unwrap() - naive_recall(&run, &qrels, k)).abs()
                        < 1e-9
                );
            }
            assert!((map_metric(&run, &qrels).unwrap() - naive_map(&run, &qrels)).abs() < 1e-9);
        }
    }

    #[test]
    fn report_aggregates_are_means_of_per_query() {
        let qrels = qrels_of(&[("q1", &["d1"]), ("q2", &["d2", "d3"])]);
        let run = run_of(&[("q1", &["d1", "x"]), ("q2", &["x", "d2", "y", "d3"])]);
        let report = EvalReport::compute(&run, &qrels).unwrap();
        assert_eq!(report.query_count, 2);
        for (metric, agg) in &report.aggregates {
            let per = &report.per_query[metric];
            let mean = per.values().sum::<f64>() / per.len() as f64;
            assert!((agg - mean).abs() < 1e-12, "{metric}");
        }
        let json = report.to_json();
        assert!(json.contains("mrr_at_10"));
        assert!(report.to_table().contains("queries scored: 2"));
    }

    #[test]
    fn qrels_and_run_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let qrels_path = dir.path().join("qrels.txt");
        std::fs::write(&qrels_path, "q1 0 d1 1\nq1 0 d9 0\nq2 0 d2 1\n").unwrap();
        let qrels = Qrels::read(&qrels_path).unwrap();
        assert_eq!(qrels.relevant.len(), 2);
        assert!(!qrels.relevant["q1"].contains("d9"));

        let run_path = dir.path().join("run.txt");
        std::fs::write(
            &run_path,
            "q1 Q0 d5 2 1.5 tag\nq1 Q0 d1 1 2.5 tag\nq2 Q0 d2 1 3.0 tag\n",
        )
        .unwrap();
        let run = read_run(&run_path).unwrap();
        assert_eq!(run["q1"], vec!["d1".to_string(), "d5".to_string()]);
    }

    #[test]
    fn malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, "q1 0 d1\n").unwrap();
        assert!(Qrels::read(&p).is_err());
        std::fs::write(&p, "q1 Q0 d1 one 2.0 tag\n").unwrap();
        assert!(read_run(&p).is_err());
    }
}
