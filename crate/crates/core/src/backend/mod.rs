//! The frozen scoring model: embeddings, context pooling, and per-class
//! label log-probabilities for a query given an ordered demonstration
//! context.

mod cache;
mod toy;

use std::sync::atomic::{AtomicU64, Ordering};

pub use cache::{CachedState, StateCache};
pub use toy::{ToyConfig, ToyLm};

use crate::corpus::{Demonstration, Query};
use crate::error::Result;

/// Capability set of a frozen model that can both pick and consume
/// demonstrations.
pub trait Backend: Send + Sync {
    /// Width `D` of embeddings and pooled states.
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn corpus(&self) -> &[Demonstration];

    fn embed_demo(&self, demo: &Demonstration) -> Vec<f64>;
    fn embed_query(&self, query: &Query) -> Vec<f64>;

    /// State after reading `ids` (in order) followed by the query.
    fn pool(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>>;

    /// Per-class log-probabilities of the query label under the context.
    fn score(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>>;

    /// `log P(gold | ids, query)`.
    fn gold_logprob(&self, query: &Query, ids: &[usize]) -> Result<f64> {
        Ok(self.score(query, ids)?[query.gold_label])
    }
}

/// Wraps a backend and counts fresh `score` evaluations.
pub struct CountingBackend<B> {
    inner: B,
    scores: AtomicU64,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            scores: AtomicU64::new(0),
        }
    }

    pub fn score_calls(&self) -> u64 {
        self.scores.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn corpus(&self) -> &[Demonstration] {
        self.inner.corpus()
    }
    fn embed_demo(&self, demo: &Demonstration) -> Vec<f64> {
        self.inner.embed_demo(demo)
    }
    fn embed_query(&self, query: &Query) -> Vec<f64> {
        self.inner.embed_query(query)
    }
    fn pool(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        self.inner.pool(query, ids)
    }
    fn score(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        self.scores.fetch_add(1, Ordering::Relaxed);
        self.inner.score(query, ids)
    }
}
