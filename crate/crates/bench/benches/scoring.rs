use criterion::{criterion_group, criterion_main, Criterion};
use demoselect_bench::{repeated_keys, toy_setup};
use demoselect_core::baselines::oracle;
use demoselect_core::{Backend, StateCache};
use std::hint::black_box;

fn cache(c: &mut Criterion) {
    let (task, lm) = toy_setup();
    let keys = repeated_keys(&task.test, &lm, 100, 10_000);
    let mut g = c.benchmark_group("repeated_scoring_10k");
    g.bench_function("uncached", |b| {
        b.iter(|| {
            for (q, ids) in &keys {
                black_box(lm.pool(q, ids).unwrap());
                black_box(lm.score(q, ids).unwrap());
            }
        })
    });
    g.bench_function("cached", |b| {
        b.iter(|| {
            let cache = StateCache::new();
            for (q, ids) in &keys {
                black_box(cache.lookup(&lm, q, ids).unwrap());
            }
        })
    });
    g.finish();
}

fn exhaustive(c: &mut Criterion) {
    let (task, lm) = toy_setup();
    c.bench_function("oracle_n50_k2", |b| b.iter(|| oracle(&lm, black_box(&task.test[0]), 2).unwrap()));
}

criterion_group!(benches, cache, exhaustive);
criterion_main!(benches);
