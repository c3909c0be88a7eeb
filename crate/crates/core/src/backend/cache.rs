use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use super::Backend;
use crate::corpus::Query;
use crate::error::{Error, Result};

type Ids = SmallVec<[usize; 6]>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
struct Key {
    query: usize,
    ids: Ids,
}

/// Pooled state and label log-probabilities for one `(query, context)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedState {
    pub pooled: Vec<f64>,
    pub scores: Vec<f64>,
}

const SNAPSHOT_VERSION: &str = "demoselect-cache/1";

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: String,
    entries: Vec<(Key, CachedState)>,
}

/// Memo table over the frozen backend, keyed by query id and the ordered
/// demonstration ids.
///
/// Readers share the table; inserts take the write lock. Keys are
/// order-sensitive: `[a, b]` and `[b, a]` are distinct entries.
#[derive(Debug, Default)]
pub struct StateCache {
    map: RwLock<FxHashMap<Key, Arc<CachedState>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl StateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the cached entry, computing and storing it on first use.
    pub fn lookup<B: Backend + ?Sized>(
        &self,
        backend: &B,
        query: &Query,
        ids: &[usize],
    ) -> Result<Arc<CachedState>> {
        let key = Key {
            query: query.id,
            ids: SmallVec::from_slice(ids),
        };
        if let Some(hit) = self.map.read().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(hit));
        }
        let fresh = Arc::new(CachedState {
            pooled: backend.pool(query, ids)?,
            scores: backend.score(query, ids)?,
        });
        self.misses.fetch_add(1, Ordering::Relaxed);
        let mut map = self.map.write().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(fresh)))
    }

    pub fn cached_score<B: Backend + ?Sized>(&self, backend: &B, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.lookup(backend, query, ids)?.scores.clone())
    }

    pub fn cached_pool<B: Backend + ?Sized>(&self, backend: &B, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.lookup(backend, query, ids)?.pooled.clone())
    }

    pub fn gold_logprob<B: Backend + ?Sized>(&self, backend: &B, query: &Query, ids: &[usize]) -> Result<f64> {
        Ok(self.lookup(backend, query, ids)?.scores[query.gold_label])
    }

    /// Writes every entry, sorted by key, as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(Key, CachedState)> = self
            .map
            .read()
            .expect("cache lock")
            .iter()
            .map(|(k, v)| (k.clone(), (**v).clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let snap = Snapshot {
            version: SNAPSHOT_VERSION.to_string(),
            entries,
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &snap)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let snap: Snapshot = serde_json::from_reader(BufReader::new(file))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::VersionMismatch {
                found: snap.version,
                expected: SNAPSHOT_VERSION.to_string(),
            });
        }
        let map = snap.entries.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        Ok(Self {
            map: RwLock::new(map),
            ..Self::default()
        })
    }
}
