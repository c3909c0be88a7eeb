//! Shared fixtures for the benchmarks.

use demoselect_core::corpus::{generate_task, Task};
use demoselect_core::{Backend, Query, TaskSpec, ToyConfig, ToyLm};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The desk-scale task and its toy backend.
pub fn toy_setup() -> (Task, ToyLm) {
    let task = generate_task(&TaskSpec::toy()).expect("toy task");
    let lm = ToyLm::new(task.corpus.clone(), task.prototypes.len(), ToyConfig::default()).expect("toy backend");
    (task, lm)
}

/// `lookups` (query, ordered 3-tuple) keys drawn from `distinct` fixed ones.
pub fn repeated_keys<'q>(queries: &'q [Query], backend: &dyn Backend, distinct: usize, lookups: usize) -> Vec<(&'q Query, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = backend.corpus().len();
    let pool: Vec<(&Query, Vec<usize>)> = (0..distinct)
        .map(|i| (&queries[i % queries.len()], index::sample(&mut rng, n, 3).into_vec()))
        .collect();
    (0..lookups).map(|i| pool[i % distinct].clone()).collect()
}
