use criterion::{criterion_group, criterion_main, Criterion};
use demoselect_bench::toy_setup;
use demoselect_core::numerics::Mlp2;
use demoselect_core::retrieval::{sample_candidate_tree, Decode};
use demoselect_core::reward::bt_loss_states;
use demoselect_core::{Backend, RetrievalHead, Scorer, StateCache};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn candidate_tree(c: &mut Criterion) {
    let (task, lm) = toy_setup();
    let head = RetrievalHead::init(&lm).unwrap();
    c.bench_function("candidate_tree_3x2x2_cold_cache", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            let cache = StateCache::new();
            let scorer = Scorer::new(&lm, &cache);
            sample_candidate_tree(&head, scorer, &task.train[0], &[3, 2, 2], Decode::Sample(&mut rng)).unwrap()
        })
    });
}

fn reward_step(c: &mut Criterion) {
    let (task, lm) = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = Mlp2::random(lm.dim(), 64, &mut rng);
    let plus = lm.pool(&task.train[0], &[0, 1, 2]).unwrap();
    let minus = lm.pool(&task.train[0], &[3, 4, 5]).unwrap();
    c.bench_function("bt_loss_and_grad_h64", |b| b.iter(|| bt_loss_states(black_box(&mlp), &plus, &minus).unwrap()));
}

criterion_group!(benches, candidate_tree, reward_step);
criterion_main!(benches);
