//! Reference selectors: uniform random draws, Okapi BM25 over the text
//! field, and the exhaustive oracle over ordered k-tuples.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backend::Backend;
use crate::corpus::{Demonstration, Query};
use crate::error::{Error, Result};

/// `k` ids drawn uniformly without replacement, in draw order.
pub fn random_retrieve<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::TooManyDemos { k, n });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let (chosen, _) = ids.partial_shuffle(rng, k);
    Ok(chosen.to_vec())
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    doc_freq: HashMap<String, usize>,
    term_counts: Vec<HashMap<String, usize>>,
    doc_len: Vec<usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut term_counts = Vec::with_capacity(docs.len());
        let mut doc_len = Vec::with_capacity(docs.len());
        for doc in docs {
            let toks = tokenize(doc.as_ref());
            doc_len.push(toks.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_counts.push(tf);
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Self {
            k1: 1.2,
            b: 0.75,
            doc_freq,
            term_counts,
            doc_len,
            avg_len,
        }
    }

    /// Index over the demonstrations' text; missing text is an empty document.
    pub fn from_corpus(corpus: &[Demonstration]) -> Self {
        let docs: Vec<&str> = corpus.iter().map(|d| d.text.as_deref().unwrap_or("")).collect();
        Self::new(&docs)
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    /// Non-negative idf variant `ln(1 + (N - n + 0.5) / (n + 0.5))`.
    fn idf(&self, term: &str) -> f64 {
        let n = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let total = self.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Okapi BM25 of every document; each query token occurrence contributes.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q = tokenize(query);
        let idfs: Vec<f64> = q.iter().map(|t| self.idf(t)).collect();
        (0..self.len())
            .map(|d| {
                let norm = if self.avg_len > 0.0 {
                    self.k1 * (1.0 - self.b + self.b * self.doc_len[d] as f64 / self.avg_len)
                } else {
                    self.k1
                };
                q.iter()
                    .zip(&idfs)
                    .map(|(t, idf)| {
                        let tf = self.term_counts[d].get(t).copied().unwrap_or(0) as f64;
                        idf * tf * (self.k1 + 1.0) / (tf + norm)
                    })
                    .sum()
            })
            .collect()
    }

    fn overlaps(&self, query: &str) -> bool {
        tokenize(query).iter().any(|t| self.doc_freq.contains_key(t))
    }
}

/// Top-`k` BM25 matches, emitted in ascending score order so the best
/// match sits next to the query. Without any vocabulary overlap this falls
/// back to a random draw.
pub fn bm25_retrieve<R: Rng + ?Sized>(index: &Bm25Index, query: &str, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > index.len() {
        return Err(Error::TooManyDemos { k, n: index.len() });
    }
    if !index.overlaps(query) {
        log::warn!("bm25: query shares no terms with the corpus; using a random draw");
        return random_retrieve(index.len(), k, rng);
    }
    let scores = index.scores(query);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.reverse();
    Ok(order)
}

/// Enumeration limit for [`oracle`].
pub const ORACLE_LIMIT: u128 = 1_000_000;

/// Number of ordered `k`-tuples without repetition from `n` items.
pub fn ordered_tuples(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    ((n - k + 1)..=n).map(|v| v as u128).product()
}

/// Exhaustive argmax of `log P(gold | z, x)` over every ordered k-tuple of
/// distinct ids; ties keep the lexicographically smallest tuple.
pub fn oracle(backend: &dyn Backend, query: &Query, k: usize) -> Result<(Vec<usize>, f64)> {
    let n = backend.corpus().len();
    if k > n {
        return Err(Error::TooManyDemos { k, n });
    }
    let count = ordered_tuples(n, k);
    if count > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            count,
            limit: ORACLE_LIMIT,
        });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut tuple = Vec::with_capacity(k);
    let mut used = vec![false; n];
    enumerate(backend, query, k, &mut tuple, &mut used, &mut best)?;
    Ok(best.expect("at least the empty tuple is enumerated"))
}

fn enumerate(
    backend: &dyn Backend,
    query: &Query,
    k: usize,
    tuple: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(Vec<usize>, f64)>,
) -> Result<()> {
    if tuple.len() == k {
        let s = backend.gold_logprob(query, tuple)?;
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            *best = Some((tuple.clone(), s));
        }
        return Ok(());
    }
    for i in 0..used.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        tuple.push(i);
        enumerate(backend, query, k, tuple, used, best)?;
        tuple.pop();
        used[i] = false;
    }
    Ok(())
}
