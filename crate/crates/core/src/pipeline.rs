//! Stage orchestration shared by the command line and the acceptance
//! suite: task materialization, reward-head training, policy training,
//! evaluation and the k-sweep cost measurement.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CountingBackend, StateCache, ToyLm};
use crate::baselines::{self, Bm25Index};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::corpus::{self, Demonstration, Query, Task};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, Method};
use crate::ppo::{self, CurvePoint, RewardSource, Rewarder};
use crate::retrieval::{sample_candidate_tree, CandidateSet, Decode, RetrievalHead, Scorer};
use crate::reward::{self, EpochStats, RewardHeadModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub corpus: Vec<Demonstration>,
    pub train: Vec<Query>,
    pub test: Vec<Query>,
}

impl From<Task> for TaskData {
    fn from(t: Task) -> Self {
        Self {
            corpus: t.corpus,
            train: t.train,
            test: t.test,
        }
    }
}

impl TaskData {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Ok(corpus::generate_task(&cfg.task)?.into())
    }

    /// Generates the task and writes the three JSONL files named in `cfg.paths`.
    pub fn write(cfg: &RunConfig) -> Result<Self> {
        let data = Self::generate(cfg)?;
        let p = &cfg.paths;
        let need = |o: &Option<std::path::PathBuf>, what: &str| {
            o.clone()
                .ok_or_else(|| Error::Config(format!("paths.{what} must be set")))
        };
        corpus::save_jsonl(&need(&p.corpus, "corpus")?, &data.corpus)?;
        corpus::save_jsonl(&need(&p.train_queries, "train_queries")?, &data.train)?;
        corpus::save_jsonl(&need(&p.test_queries, "test_queries")?, &data.test)?;
        Ok(data)
    }

    /// Reads the JSONL files when all three paths are set, otherwise
    /// regenerates the task from its spec.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        match (&p.corpus, &p.train_queries, &p.test_queries) {
            (Some(c), Some(tr), Some(te)) => Ok(Self {
                corpus: corpus::load_corpus(c)?,
                train: corpus::load_queries(tr)?,
                test: corpus::load_queries(te)?,
            }),
            _ => Self::generate(cfg),
        }
    }
}

/// Splits off the last `frac` of `items`.
pub fn split_tail<T>(items: &[T], frac: f64) -> (&[T], &[T]) {
    let tail = ((items.len() as f64) * frac).round() as usize;
    items.split_at(items.len() - tail.min(items.len()))
}

/// Backend, cache and data for one run.
pub struct Session {
    pub cfg: RunConfig,
    pub data: TaskData,
    pub backend: ToyLm,
    pub cache: StateCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Report {
    pub history: Vec<EpochStats>,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub candidate_sets: Vec<CandidateSet>,
}

impl Session {
    pub fn new(cfg: RunConfig, data: TaskData) -> Result<Self> {
        cfg.validate()?;
        let backend = ToyLm::new(data.corpus.clone(), cfg.task.num_classes, cfg.backend)?;
        Ok(Self {
            cfg,
            data,
            backend,
            cache: StateCache::new(),
        })
    }

    pub fn scorer(&self) -> Scorer<'_> {
        Scorer::new(&self.backend, &self.cache)
    }

    pub fn fingerprint(&self) -> String {
        corpus::fingerprint(&self.data.corpus)
    }

    pub fn init_checkpoint(&self) -> Result<Checkpoint> {
        let head = RetrievalHead::init(&self.backend)?;
        Ok(Checkpoint::new(head, self.cfg.clone(), self.fingerprint()))
    }

    fn check_fingerprint(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.task_fingerprint != self.fingerprint() {
            return Err(Error::Config("checkpoint was built for a different corpus".into()));
        }
        Ok(())
    }

    /// Stage one: candidate trees from the initial policy, preference pairs,
    /// Bradley–Terry training, frozen output normalization.
    pub fn train_reward(&self, ckpt: &mut Checkpoint) -> Result<Stage1Report> {
        self.check_fingerprint(ckpt)?;
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.reward.seed);
        let initial = ckpt.head.reset();
        let sets = candidate_sets(&initial, self.scorer(), &self.data.train, &cfg.widths, &mut rng)?;

        let (fit_q, hold_q) = split_tail(&self.data.train, cfg.reward.holdout_frac);
        let (fit_sets, hold_sets) = sets.split_at(fit_q.len());
        let mut pairs_for = |sets: &[CandidateSet]| {
            sets.iter()
                .flat_map(|cs| reward::build_pairs(cs, cfg.max_pairs(), cfg.reward.tie_tol, &mut rng))
                .collect::<Vec<_>>()
        };
        let fit_pairs = pairs_for(fit_sets);
        let hold_pairs = pairs_for(hold_sets);
        let fit_states = reward::pair_states(self.scorer(), fit_q, &fit_pairs)?;
        let hold_states = reward::pair_states(self.scorer(), hold_q, &hold_pairs)?;

        let mut rh = RewardHeadModel::random(self.backend.dim(), cfg.reward.hidden, &mut rng);
        let history = reward::train_reward(&mut rh, &fit_states, &hold_states, &cfg.reward.train, &mut rng)?;

        let mut leaf_states = Vec::new();
        for (cs, q) in fit_sets.iter().zip(fit_q) {
            for c in &cs.candidates {
                leaf_states.push(self.scorer().pool(q, &c.ids)?);
            }
        }
        rh.fit_normalization(&leaf_states)?;
        if let Some(last) = history.last() {
            log::info!(
                "reward head: {} train / {} holdout pairs, final loss {:.4}, holdout acc {:.4}",
                fit_pairs.len(),
                hold_pairs.len(),
                last.loss,
                last.holdout_acc
            );
        }

        ckpt.reward_head = Some(rh);
        ckpt.stage = Stage::RewardTrained;
        Ok(Stage1Report {
            history,
            train_pairs: fit_pairs.len(),
            holdout_pairs: hold_pairs.len(),
            candidate_sets: sets,
        })
    }

    /// Stage two: PPO on the head, rewarded by the stage-one head or by raw
    /// backend log-probabilities.
    pub fn train_policy(&self, ckpt: &mut Checkpoint, source: RewardSource) -> Result<Vec<CurvePoint>> {
        self.check_fingerprint(ckpt)?;
        let mut ppo_cfg = self.cfg.ppo.ppo.clone();
        ppo_cfg.reward_source = source;
        let rewarder = match source {
            RewardSource::RewardHead => Rewarder::Head(ckpt.reward_head.as_ref().ok_or_else(|| {
                Error::Config("no reward head in checkpoint; run train-reward first or use raw log-prob rewards".into())
            })?),
            RewardSource::RawLogprob => Rewarder::RawLogprob,
        };
        let (fit_q, dev_q) = split_tail(&self.data.train, self.cfg.ppo.dev_frac);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.ppo.seed);
        let mut head = ckpt.head.clone();
        let curve = ppo::train_ppo(&mut head, rewarder, self.scorer(), fit_q, dev_q, self.cfg.k, &ppo_cfg, &mut rng)?;
        if let Some(last) = curve.last() {
            log::info!(
                "policy: {} steps, final mean reward {:.4}, mean KL {:.4}",
                curve.len(),
                last.mean_reward,
                last.mean_kl
            );
        }
        ckpt.head = head;
        ckpt.stage = Stage::PolicyTrained;
        Ok(curve)
    }

    pub fn evaluate(&self, ckpt: &Checkpoint, methods: &[MethodName]) -> Result<Vec<EvalReport>> {
        self.check_fingerprint(ckpt)?;
        let index = Bm25Index::from_corpus(&self.data.corpus);
        let initial = ckpt.head.reset();
        let built: Vec<Method<'_>> = methods
            .iter()
            .map(|m| match m {
                MethodName::Random => Method::Random { seed: self.cfg.eval_seed },
                MethodName::Bm25 => Method::Bm25 {
                    index: &index,
                    seed: self.cfg.eval_seed,
                },
                MethodName::Initial => Method::Head {
                    name: "initial".into(),
                    head: &initial,
                },
                MethodName::Trained => Method::Head {
                    name: "trained".into(),
                    head: &ckpt.head,
                },
                MethodName::Oracle => Method::Oracle,
            })
            .collect();
        metrics::compare(&built, self.scorer(), &self.data.test, self.cfg.k)
    }
}

/// Candidate sets for every query, sampled from `head`.
pub fn candidate_sets(
    head: &RetrievalHead,
    scorer: Scorer<'_>,
    queries: &[Query],
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CandidateSet>> {
    queries
        .iter()
        .map(|q| sample_candidate_tree(head, scorer, q, widths, Decode::Sample(rng)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Random,
    Bm25,
    Initial,
    Trained,
    Oracle,
}

impl MethodName {
    pub const ALL: [MethodName; 5] = [
        MethodName::Random,
        MethodName::Bm25,
        MethodName::Initial,
        MethodName::Trained,
        MethodName::Oracle,
    ];
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "bm25" => Ok(Self::Bm25),
            "initial" => Ok(Self::Initial),
            "trained" => Ok(Self::Trained),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Widths used for a k-sweep entry: the configured widths truncated to
/// `k`, padded with 2s.
pub fn widths_for_k(base: &[usize], k: usize) -> Vec<usize> {
    (0..k).map(|t| base.get(t).copied().unwrap_or(2)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringCost {
    pub k: usize,
    pub m: usize,
    /// Fresh backend forward passes while building candidate sets: one per
    /// tree node, since every prefix state is pooled on the way to a leaf.
    pub score_calls: u64,
    pub seconds: f64,
}

/// Stage-one candidate generation and scoring for every training query,
/// with a cold cache; best wall-clock of `repeats` runs.
pub fn stage1_scoring_cost(cfg: &RunConfig, data: &TaskData, widths: &[usize], repeats: usize) -> Result<ScoringCost> {
    let mut best = f64::INFINITY;
    let mut calls = 0;
    for _ in 0..repeats.max(1) {
        let backend = CountingBackend::new(ToyLm::new(data.corpus.clone(), cfg.task.num_classes, cfg.backend)?);
        let cache = StateCache::new();
        let head = RetrievalHead::init(&backend)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.reward.seed);
        let start = Instant::now();
        candidate_sets(&head, Scorer::new(&backend, &cache), &data.train, widths, &mut rng)?;
        best = best.min(start.elapsed().as_secs_f64());
        calls = backend.score_calls();
    }
    Ok(ScoringCost {
        k: widths.len(),
        m: widths.iter().product(),
        score_calls: calls,
        seconds: best,
    })
}

fn comment_line(f: &mut File, path: &Path, hash: &str) -> Result<()> {
    writeln!(f, "# config_hash={hash}").map_err(|e| Error::io(path, e))
}

pub fn write_history_csv(path: &Path, history: &[EpochStats], hash: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    comment_line(&mut f, path, hash)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["epoch", "loss", "holdout_acc"])?;
    for h in history {
        w.write_record([h.epoch.to_string(), format!("{:.8}", h.loss), format!("{:.6}", h.holdout_acc)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint], hash: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    comment_line(&mut f, path, hash)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["step", "mean_reward", "mean_kl", "entropy", "clip_frac", "dev_accuracy", "reward_var"])?;
    for c in curve {
        w.write_record([
            c.step.to_string(),
            format!("{:.8}", c.mean_reward),
            format!("{:.8e}", c.mean_kl),
            format!("{:.8}", c.entropy),
            format!("{:.6}", c.clip_frac),
            c.dev_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            format!("{:.8}", c.reward_var),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub m: usize,
    pub score_calls: u64,
    pub stage1_seconds: f64,
    pub train_seconds: f64,
    pub accuracy: f64,
}

/// Runs the full pipeline at each `k` and records cost and test accuracy.
pub fn sweep_k(cfg: &RunConfig, data: &TaskData, ks: &[usize]) -> Result<Vec<SweepRow>> {
    ks.iter()
        .map(|&k| {
            let widths = widths_for_k(&cfg.widths, k);
            let cost = stage1_scoring_cost(cfg, data, &widths, 1)?;
            let mut c = cfg.clone();
            c.k = k;
            c.widths = widths;
            let session = Session::new(c, data.clone())?;
            let start = Instant::now();
            let mut ckpt = session.init_checkpoint()?;
            session.train_reward(&mut ckpt)?;
            session.train_policy(&mut ckpt, session.cfg.reward_source())?;
            let train_seconds = start.elapsed().as_secs_f64();
            let report = session.evaluate(&ckpt, &[MethodName::Trained])?;
            Ok(SweepRow {
                k,
                m: cost.m,
                score_calls: cost.score_calls,
                stage1_seconds: cost.seconds,
                train_seconds,
                accuracy: report[0].accuracy,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], hash: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    comment_line(&mut f, path, hash)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["k", "m", "score_calls", "stage1_seconds", "train_seconds", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.m.to_string(),
            r.score_calls.to_string(),
            format!("{:.6}", r.stage1_seconds),
            format!("{:.3}", r.train_seconds),
            format!("{:.6}", r.accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub query_id: usize,
    pub ids: Vec<usize>,
    pub gold_logprob: f64,
}

/// Exhaustive best ordered tuple for every query, in query order.
pub fn oracle_tuples(backend: &dyn Backend, queries: &[Query], k: usize) -> Result<Vec<OracleRow>> {
    queries
        .par_iter()
        .map(|q| {
            baselines::oracle(backend, q, k).map(|(ids, gold_logprob)| OracleRow {
                query_id: q.id,
                ids,
                gold_logprob,
            })
        })
        .collect()
}

pub fn write_oracle_csv(path: &Path, rows: &[OracleRow], hash: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    comment_line(&mut f, path, hash)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["query_id", "ids", "gold_logprob"])?;
    for r in rows {
        let ids: Vec<String> = r.ids.iter().map(|i| i.to_string()).collect();
        w.write_record([r.query_id.to_string(), ids.join(" "), format!("{:.10}", r.gold_logprob)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_tail_rounds() {
        let v: Vec<u32> = (0..10).collect();
        let (a, b) = split_tail(&v, 0.2);
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a, b) = split_tail(&v, 0.0);
        assert_eq!((a.len(), b.len()), (10, 0));
    }

    #[test]
    fn widths_for_k_prefixes_and_pads() {
        assert_eq!(widths_for_k(&[3, 2, 2], 1), vec![3]);
        assert_eq!(widths_for_k(&[3, 2, 2], 3), vec![3, 2, 2]);
        assert_eq!(widths_for_k(&[3, 2, 2], 4), vec![3, 2, 2, 2]);
    }

    #[test]
    fn method_names_parse() {
        for m in MethodName::ALL {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s.trim_matches('"').parse::<MethodName>().unwrap(), m);
        }
        assert!("sbert".parse::<MethodName>().is_err());
    }

    #[test]
    fn scoring_work_counts_every_tree_node() {
        let mut cfg = RunConfig::toy();
        cfg.task.n_train = 20;
        let data = TaskData::generate(&cfg).unwrap();
        let cost = stage1_scoring_cost(&cfg, &data, &[3, 2], 1).unwrap();
        assert_eq!(cost.m, 6);
        // Root, three depth-1 prefixes, six leaves.
        assert_eq!(cost.score_calls, 20 * (1 + 3 + 6));
    }
}
