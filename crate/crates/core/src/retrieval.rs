//! Retrieval head and the auto-regressive selection policy.
//!
//! The head is an `N × D` matrix whose rows start as the backend's
//! demonstration embeddings. At step `t` the pooled state `h_t` of
//! `[selected so far ; query]` scores every demonstration by `M h_t`; a
//! masked softmax over those logits is the policy. Already-selected ids are
//! masked, so a context never repeats a demonstration.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, StateCache};
use crate::corpus::Query;
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax, Matrix};

/// Backend plus the memo table every stage reads through.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub backend: &'a dyn Backend,
    pub cache: &'a StateCache,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn Backend, cache: &'a StateCache) -> Self {
        Self { backend, cache }
    }

    pub fn pool(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        self.cache.cached_pool(self.backend, query, ids)
    }

    pub fn score(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        self.cache.cached_score(self.backend, query, ids)
    }

    pub fn gold_logprob(&self, query: &Query, ids: &[usize]) -> Result<f64> {
        self.cache.gold_logprob(self.backend, query, ids)
    }

    pub fn corpus_len(&self) -> usize {
        self.backend.corpus().len()
    }
}

/// Trainable head `M` with its frozen starting point `M̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHead {
    current: Matrix,
    reference: Matrix,
}

/// Which of the two matrices defines the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Current,
    Reference,
}

impl RetrievalHead {
    /// Rows are the backend's demonstration embeddings; `M̂` is a copy.
    pub fn init(backend: &dyn Backend) -> Result<Self> {
        let rows: Vec<Vec<f64>> = backend.corpus().iter().map(|d| backend.embed_demo(d)).collect();
        if rows.is_empty() {
            return Err(Error::InvalidSpec("cannot build a head over an empty corpus".into()));
        }
        Self::from_matrix(Matrix::from_rows(&rows)?)
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidSpec("head entries must be finite".into()));
        }
        Ok(Self {
            reference: m.clone(),
            current: m,
        })
    }

    /// Rebuilds a head from stored parts; shapes must agree.
    pub fn from_parts(current: Matrix, reference: Matrix) -> Result<Self> {
        if (current.rows(), current.cols()) != (reference.rows(), reference.cols()) {
            return Err(Error::DimensionMismatch {
                what: "head shapes",
                expected: reference.rows() * reference.cols(),
                got: current.rows() * current.cols(),
            });
        }
        Ok(Self { current, reference })
    }

    pub fn num_demos(&self) -> usize {
        self.current.rows()
    }

    pub fn dim(&self) -> usize {
        self.current.cols()
    }

    pub fn current(&self) -> &Matrix {
        &self.current
    }

    pub fn reference(&self) -> &Matrix {
        &self.reference
    }

    /// Only the trainable matrix is exposed mutably.
    pub fn current_mut(&mut self) -> &mut Matrix {
        &mut self.current
    }

    /// The head with `M` reset to `M̂`.
    pub fn reset(&self) -> Self {
        Self {
            current: self.reference.clone(),
            reference: self.reference.clone(),
        }
    }

    fn matrix(&self, which: Policy) -> &Matrix {
        match which {
            Policy::Current => &self.current,
            Policy::Reference => &self.reference,
        }
    }

    pub fn logits(&self, which: Policy, state: &[f64]) -> Result<Vec<f64>> {
        self.matrix(which).matvec(state)
    }

    pub fn log_policy(&self, which: Policy, state: &[f64], allowed: &[bool]) -> Result<Vec<f64>> {
        if allowed.len() != self.num_demos() {
            return Err(Error::DimensionMismatch {
                what: "policy mask",
                expected: self.num_demos(),
                got: allowed.len(),
            });
        }
        log_softmax(&self.logits(which, state)?, Some(allowed))
    }

    /// `softmax(M h)` over allowed ids; masked ids get exactly zero.
    pub fn policy_step(&self, state: &[f64], allowed: &[bool]) -> Result<Vec<f64>> {
        Ok(to_probs(&self.log_policy(Policy::Current, state, allowed)?))
    }
}

fn to_probs(logp: &[f64]) -> Vec<f64> {
    logp.iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
        .collect()
}

/// How an action is picked from the policy distribution.
pub enum Decode<'r> {
    Sample(&'r mut dyn RngCore),
    /// Highest probability, lowest id on ties.
    Argmax,
}

impl Decode<'_> {
    fn pick(&mut self, probs: &[f64]) -> Result<usize> {
        match self {
            Decode::Argmax => argmax_allowed(probs),
            Decode::Sample(rng) => {
                let dist = WeightedIndex::new(probs).map_err(|_| Error::EmptyActionSpace)?;
                Ok(dist.sample(rng))
            }
        }
    }
}

fn argmax_allowed(probs: &[f64]) -> Result<usize> {
    // Masked entries are exactly 0 and an allowed entry is always > 0.
    match argmax(probs) {
        Some(i) if probs[i] > 0.0 => Ok(i),
        _ => Err(Error::EmptyActionSpace),
    }
}

/// One recorded selection step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub allowed: Vec<bool>,
    pub action: usize,
    pub logp: f64,
    pub logp_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub query_id: usize,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        Err(Error::TooManyDemos { k, n })
    } else {
        Ok(())
    }
}

/// Runs the policy for `k` steps, recording states and log-probabilities
/// under both `M` and `M̂`.
pub fn rollout(head: &RetrievalHead, scorer: Scorer<'_>, query: &Query, k: usize, mut decode: Decode<'_>) -> Result<Episode> {
    let n = head.num_demos();
    check_k(k, n)?;
    let mut allowed = vec![true; n];
    let mut selected = Vec::with_capacity(k);
    let mut steps = Vec::with_capacity(k);
    for _ in 0..k {
        let state = scorer.pool(query, &selected)?;
        let logp = head.log_policy(Policy::Current, &state, &allowed)?;
        let logp_ref = head.log_policy(Policy::Reference, &state, &allowed)?;
        let action = decode.pick(&to_probs(&logp))?;
        steps.push(Step {
            state,
            allowed: allowed.clone(),
            action,
            logp: logp[action],
            logp_ref: logp_ref[action],
        });
        allowed[action] = false;
        selected.push(action);
    }
    Ok(Episode {
        query_id: query.id,
        steps,
    })
}

/// Deterministic test-time selection: argmax at every step.
pub fn greedy_decode(head: &RetrievalHead, scorer: Scorer<'_>, query: &Query, k: usize) -> Result<Vec<usize>> {
    Ok(rollout(head, scorer, query, k, Decode::Argmax)?.actions())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ids: Vec<usize>,
    /// `log P(gold | ids, query)`.
    pub score: f64,
}

/// Leaves of one candidate tree, in sampling order, plus their ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: usize,
    pub candidates: Vec<Candidate>,
    /// `ranking[r]` is the index of the rank-`r` candidate.
    pub ranking: Vec<usize>,
}

impl CandidateSet {
    /// Orders candidates by descending score, breaking ties by the
    /// lexicographically smaller id tuple.
    pub fn new(query_id: usize, candidates: Vec<Candidate>) -> Self {
        let mut ranking: Vec<usize> = (0..candidates.len()).collect();
        ranking.sort_by(|&a, &b| {
            let (ca, cb) = (&candidates[a], &candidates[b]);
            cb.score.total_cmp(&ca.score).then_with(|| ca.ids.cmp(&cb.ids))
        });
        Self {
            query_id,
            candidates,
            ranking,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ranked(&self) -> impl Iterator<Item = &Candidate> + '_ {
        self.ranking.iter().map(|&i| &self.candidates[i])
    }

    /// `ranks[j]` is the rank of candidate `j`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.ranking.len()];
        for (r, &i) in self.ranking.iter().enumerate() {
            ranks[i] = r;
        }
        ranks
    }
}

/// Draws `count` distinct actions, renormalizing after each draw.
fn draw_distinct(probs: &[f64], allowed: &[bool], count: usize, decode: &mut Decode<'_>) -> Result<Vec<usize>> {
    let available = allowed.iter().filter(|&&a| a).count();
    if count > available {
        return Err(Error::InsufficientActions {
            wanted: count,
            available,
        });
    }
    let mut p = probs.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = decode.pick(&p)?;
        p[a] = 0.0;
        out.push(a);
    }
    Ok(out)
}

/// Breadth-wise candidate tree: `widths[t]` distinct children per node at
/// depth `t`, giving `Π widths` leaves. Each leaf is scored by the backend
/// and the set is ranked.
pub fn sample_candidate_tree(
    head: &RetrievalHead,
    scorer: Scorer<'_>,
    query: &Query,
    widths: &[usize],
    mut decode: Decode<'_>,
) -> Result<CandidateSet> {
    let n = head.num_demos();
    check_k(widths.len(), n)?;
    if let Some(t) = widths.iter().position(|&w| w == 0) {
        return Err(Error::Config(format!("candidate width at step {t} must be >= 1")));
    }
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for &width in widths {
        let mut next = Vec::with_capacity(frontier.len() * width);
        for prefix in &frontier {
            let state = scorer.pool(query, prefix)?;
            let mut allowed = vec![true; n];
            prefix.iter().for_each(|&i| allowed[i] = false);
            let probs = head.policy_step(&state, &allowed)?;
            for a in draw_distinct(&probs, &allowed, width, &mut decode)? {
                let mut child = prefix.clone();
                child.push(a);
                next.push(child);
            }
        }
        frontier = next;
    }
    let candidates = frontier
        .into_iter()
        .map(|ids| {
            let score = scorer.gold_logprob(query, &ids)?;
            Ok(Candidate { ids, score })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateSet::new(query.id, candidates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyConfig, ToyLm};
    use crate::corpus::{generate_task, Demonstration, TaskSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn toy(spec: &TaskSpec) -> (ToyLm, Vec<Query>) {
        let task = generate_task(spec).unwrap();
        (ToyLm::new(task.corpus, spec.num_classes, ToyConfig::default()).unwrap(), task.test)
    }

    fn micro() -> TaskSpec {
        TaskSpec {
            dim: 4,
            num_classes: 2,
            corpus_size: 6,
            n_train: 4,
            n_test: 10,
            prototype_noise: 0.3,
            seed: 5,
        }
    }

    #[test]
    fn init_copies_embeddings() {
        let demo = Demonstration {
            id: 0,
            features: vec![1.0, 0.0],
            label: 0,
            text: None,
        };
        let lm = ToyLm::new(vec![demo], 2, ToyConfig::default()).unwrap();
        let head = RetrievalHead::init(&lm).unwrap();
        assert_eq!((head.num_demos(), head.dim()), (1, 4));
        assert_eq!(head.current().row(0), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(head.current(), head.reference());
    }

    #[test]
    fn zero_head_is_uniform_over_allowed() {
        let head = RetrievalHead::from_matrix(Matrix::zeros(4, 3)).unwrap();
        let p = head.policy_step(&[0.3, 0.1, 0.2], &[true, false, true, true]).unwrap();
        assert_eq!(p[1], 0.0);
        for i in [0, 2, 3] {
            assert!((p[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_row_takes_the_mass() {
        let head = RetrievalHead::from_matrix(Matrix::identity(3)).unwrap();
        let p = head.policy_step(&[0.0, 0.0, 50.0], &[true; 3]).unwrap();
        assert_eq!(argmax(&p), Some(2));
        assert!(p[2] > 1.0 - 1e-12);
    }

    #[test]
    fn masking_one_of_two() {
        let head = RetrievalHead::from_matrix(Matrix::identity(2)).unwrap();
        assert_eq!(head.policy_step(&[4.0, -1.0], &[false, true]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(head.policy_step(&[1.0, 1.0], &[false, false]), Err(Error::EmptyActionSpace)));
    }

    #[test]
    fn single_demo_rollout() {
        let demo = Demonstration {
            id: 0,
            features: vec![1.0, 0.0],
            label: 1,
            text: None,
        };
        let lm = ToyLm::new(vec![demo], 2, ToyConfig::default()).unwrap();
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let q = Query {
            id: 9,
            features: vec![0.0, 1.0],
            gold_label: 0,
            text: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = rollout(&head, Scorer::new(&lm, &cache), &q, 1, Decode::Sample(&mut rng)).unwrap();
        assert_eq!(ep.actions(), vec![0]);
        assert_eq!(ep.steps[0].logp, 0.0);
        assert!(matches!(
            rollout(&head, Scorer::new(&lm, &cache), &q, 2, Decode::Argmax),
            Err(Error::TooManyDemos { k: 2, n: 1 })
        ));
    }

    #[test]
    fn full_length_rollout_is_a_permutation() {
        let spec = TaskSpec {
            corpus_size: 3,
            ..micro()
        };
        let (lm, qs) = toy(&spec);
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for q in &qs {
            let mut a = rollout(&head, Scorer::new(&lm, &cache), q, 3, Decode::Sample(&mut rng))
                .unwrap()
                .actions();
            a.sort();
            assert_eq!(a, vec![0, 1, 2]);
        }
    }

    #[test]
    fn seeded_rollouts_repeat() {
        let (lm, qs) = toy(&TaskSpec::toy());
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            qs.iter()
                .map(|q| rollout(&head, Scorer::new(&lm, &cache), q, 3, Decode::Sample(&mut rng)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn zero_head_greedy_takes_lowest_ids() {
        let (lm, qs) = toy(&micro());
        let head = RetrievalHead::from_matrix(Matrix::zeros(6, lm.dim())).unwrap();
        let cache = StateCache::new();
        let s = Scorer::new(&lm, &cache);
        assert_eq!(greedy_decode(&head, s, &qs[0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(greedy_decode(&head, s, &qs[0], 3).unwrap(), greedy_decode(&head, s, &qs[0], 3).unwrap());
    }

    #[test]
    fn default_widths_give_twelve_distinct_ranked_leaves() {
        let (lm, qs) = toy(&TaskSpec::toy());
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in &qs[..20] {
            let cs = sample_candidate_tree(&head, Scorer::new(&lm, &cache), q, &[3, 2, 2], Decode::Sample(&mut rng))
                .unwrap();
            assert_eq!(cs.len(), 12);
            let uniq: HashSet<&Vec<usize>> = cs.candidates.iter().map(|c| &c.ids).collect();
            assert_eq!(uniq.len(), 12);
            let scores: Vec<f64> = cs.ranked().map(|c| c.score).collect();
            assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            let mut r = cs.ranks();
            r.sort();
            assert_eq!(r, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn unit_widths_under_argmax_reproduce_greedy() {
        let (lm, qs) = toy(&TaskSpec::toy());
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let s = Scorer::new(&lm, &cache);
        for q in &qs[..10] {
            let cs = sample_candidate_tree(&head, s, q, &[1, 1, 1], Decode::Argmax).unwrap();
            assert_eq!(cs.candidates[0].ids, greedy_decode(&head, s, q, 3).unwrap());
        }
    }

    #[test]
    fn rank_zero_beats_every_rescored_leaf() {
        let (lm, qs) = toy(&micro());
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for q in &qs {
            let cs = sample_candidate_tree(&head, Scorer::new(&lm, &cache), q, &[2, 2], Decode::Sample(&mut rng))
                .unwrap();
            let top = cs.ranked().next().unwrap();
            // Fresh scores, bypassing the cache.
            for c in &cs.candidates {
                assert!(top.score >= lm.gold_logprob(q, &c.ids).unwrap());
            }
        }
    }

    #[test]
    fn too_wide_tree_is_an_error() {
        let (lm, qs) = toy(&micro());
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let err = sample_candidate_tree(&head, Scorer::new(&lm, &cache), &qs[0], &[2, 6], Decode::Argmax).unwrap_err();
        assert!(matches!(err, Error::InsufficientActions { wanted: 6, available: 5 }));
    }

    #[test]
    fn rank_ties_break_lexicographically() {
        let cs = CandidateSet::new(
            0,
            vec![
                Candidate { ids: vec![2, 1], score: -1.0 },
                Candidate { ids: vec![0, 3], score: -1.0 },
                Candidate { ids: vec![5, 4], score: -0.5 },
            ],
        );
        assert_eq!(cs.ranking, vec![2, 1, 0]);
    }

    #[test]
    fn reference_head_logs_match_at_init() {
        let (lm, qs) = toy(&TaskSpec::toy());
        let head = RetrievalHead::init(&lm).unwrap();
        let cache = StateCache::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for q in &qs {
            let ep = rollout(&head, Scorer::new(&lm, &cache), q, 3, Decode::Sample(&mut rng)).unwrap();
            assert!(ep.steps.iter().all(|s| s.logp == s.logp_ref));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn row_shift_keeps_greedy_choices(seed in any::<u64>(), shift in -5.0f64..5.0) {
            // Adding c·1 to every row adds c·sum(h) to every logit, which is
            // the same constant for all ids at a given step.
            let spec = TaskSpec { seed, ..micro() };
            let (lm, qs) = toy(&spec);
            let head = RetrievalHead::init(&lm).unwrap();
            let mut shifted = head.current().clone();
            shifted.as_mut_slice().iter_mut().for_each(|v| *v += shift);
            let shifted = RetrievalHead::from_matrix(shifted).unwrap();
            let cache = StateCache::new();
            let s = Scorer::new(&lm, &cache);
            for q in &qs {
                let mut allowed = vec![true; 6];
                let mut picked = Vec::new();
                for _ in 0..3 {
                    let h = s.pool(q, &picked).unwrap();
                    let p = head.policy_step(&h, &allowed).unwrap();
                    let r = shifted.policy_step(&h, &allowed).unwrap();
                    prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert_eq!(argmax(&p), argmax(&r));
                    let a = argmax(&p).unwrap();
                    allowed[a] = false;
                    picked.push(a);
                }
            }
        }
    }
}
