//! Evaluation of selection rules: label accuracy under the backend, corpus
//! coverage ("representativeness": lower means a smaller reused subset) and
//! per-query label diversity.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bm25_retrieve, oracle, random_retrieve, Bm25Index};
use crate::corpus::Query;
use crate::error::{Error, Result};
use crate::numerics::argmax;
use crate::retrieval::{greedy_decode, RetrievalHead, Scorer};

/// Backend prediction for a context: argmax class, lowest class on ties.
pub fn predict(scorer: Scorer<'_>, query: &Query, ids: &[usize]) -> Result<usize> {
    Ok(argmax(&scorer.score(query, ids)?).expect("at least two classes"))
}

pub fn accuracy(scorer: Scorer<'_>, selections: &[Vec<usize>], queries: &[Query]) -> Result<f64> {
    check_lengths(selections, queries)?;
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (ids, q) in selections.iter().zip(queries) {
        if predict(scorer, q, ids)? == q.gold_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// Mean `P(gold | z, x)` over queries.
pub fn mean_gold_prob(scorer: Scorer<'_>, selections: &[Vec<usize>], queries: &[Query]) -> Result<f64> {
    check_lengths(selections, queries)?;
    let mut total = 0.0;
    for (ids, q) in selections.iter().zip(queries) {
        total += scorer.gold_logprob(q, ids)?.exp();
    }
    Ok(total / queries.len().max(1) as f64)
}

/// Fraction of the corpus that appears in at least one selection.
pub fn representativeness(selections: &[Vec<usize>], corpus_size: usize) -> f64 {
    let used: HashSet<usize> = selections.iter().flatten().copied().collect();
    used.len() as f64 / corpus_size as f64
}

/// Mean number of distinct labels per selection.
pub fn diversity(selections: &[Vec<usize>], labels: &[usize]) -> f64 {
    if selections.is_empty() {
        return 0.0;
    }
    let total: usize = selections
        .iter()
        .map(|ids| ids.iter().map(|&i| labels[i]).collect::<HashSet<_>>().len())
        .sum();
    total as f64 / selections.len() as f64
}

fn check_lengths(selections: &[Vec<usize>], queries: &[Query]) -> Result<()> {
    if selections.len() != queries.len() {
        return Err(Error::DimensionMismatch {
            what: "selections per query",
            expected: queries.len(),
            got: selections.len(),
        });
    }
    Ok(())
}

/// A selection rule under evaluation.
pub enum Method<'a> {
    Random { seed: u64 },
    Bm25 { index: &'a Bm25Index, seed: u64 },
    Head { name: String, head: &'a RetrievalHead },
    Oracle,
}

impl Method<'_> {
    pub fn name(&self) -> &str {
        match self {
            Method::Random { .. } => "random",
            Method::Bm25 { .. } => "bm25",
            Method::Head { name, .. } => name,
            Method::Oracle => "oracle",
        }
    }

    /// One ordered tuple per query.
    pub fn select_all(&self, scorer: Scorer<'_>, queries: &[Query], k: usize) -> Result<Vec<Vec<usize>>> {
        let n = scorer.corpus_len();
        match self {
            Method::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                queries.iter().map(|_| random_retrieve(n, k, &mut rng)).collect()
            }
            Method::Bm25 { index, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                queries
                    .iter()
                    .map(|q| bm25_retrieve(index, q.text.as_deref().unwrap_or(""), k, &mut rng))
                    .collect()
            }
            Method::Head { head, .. } => queries.iter().map(|q| greedy_decode(head, scorer, q, k)).collect(),
            Method::Oracle => queries
                .par_iter()
                .map(|q| oracle(scorer.backend, q, k).map(|(ids, _)| ids))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: usize,
    pub ids: Vec<usize>,
    pub predicted: usize,
    pub gold: usize,
    pub gold_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub accuracy: f64,
    pub representativeness: f64,
    pub diversity: f64,
    pub mean_gold_prob: f64,
    pub records: Vec<QueryRecord>,
}

pub fn evaluate(name: &str, scorer: Scorer<'_>, selections: Vec<Vec<usize>>, queries: &[Query]) -> Result<EvalReport> {
    check_lengths(&selections, queries)?;
    let labels: Vec<usize> = scorer.backend.corpus().iter().map(|d| d.label).collect();
    let mut records = Vec::with_capacity(queries.len());
    for (ids, q) in selections.iter().zip(queries) {
        records.push(QueryRecord {
            query_id: q.id,
            ids: ids.clone(),
            predicted: predict(scorer, q, ids)?,
            gold: q.gold_label,
            gold_prob: scorer.gold_logprob(q, ids)?.exp(),
        });
    }
    let correct = records.iter().filter(|r| r.predicted == r.gold).count();
    Ok(EvalReport {
        method: name.to_string(),
        accuracy: if records.is_empty() {
            0.0
        } else {
            correct as f64 / records.len() as f64
        },
        representativeness: representativeness(&selections, labels.len()),
        diversity: diversity(&selections, &labels),
        mean_gold_prob: records.iter().map(|r| r.gold_prob).sum::<f64>() / records.len().max(1) as f64,
        records,
    })
}

/// Runs every method over `queries` and evaluates its selections.
pub fn compare(methods: &[Method<'_>], scorer: Scorer<'_>, queries: &[Query], k: usize) -> Result<Vec<EvalReport>> {
    methods
        .iter()
        .map(|m| evaluate(m.name(), scorer, m.select_all(scorer, queries, k)?, queries))
        .collect()
}

fn with_header(path: &Path, config_hash: &str) -> Result<File> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# config_hash={config_hash}").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

/// Summary CSV: one row per method.
pub fn write_report_csv(path: &Path, reports: &[EvalReport], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(with_header(path, config_hash)?);
    w.write_record(["method", "accuracy", "representativeness", "diversity", "mean_gold_prob"])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.representativeness),
            format!("{:.6}", r.diversity),
            format!("{:.6}", r.mean_gold_prob),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-query detail CSV; the id tuple is space-separated in one column.
pub fn write_detail_csv(path: &Path, reports: &[EvalReport], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(with_header(path, config_hash)?);
    w.write_record(["method", "query_id", "ids", "predicted", "gold", "gold_prob"])?;
    for r in reports {
        for q in &r.records {
            let ids: Vec<String> = q.ids.iter().map(usize::to_string).collect();
            w.write_record([
                r.method.clone(),
                q.query_id.to_string(),
                ids.join(" "),
                q.predicted.to_string(),
                q.gold.to_string(),
                format!("{:.6}", q.gold_prob),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aligned plain-text table for terminals.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>9}\n",
        "method", "accuracy", "repr.", "diversity", "P(gold)"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>8.4}  {:>7.2}%  {:>9.3}  {:>9.4}\n",
            r.method,
            r.accuracy,
            100.0 * r.representativeness,
            r.diversity,
            r.mean_gold_prob
        ));
    }
    out
}
