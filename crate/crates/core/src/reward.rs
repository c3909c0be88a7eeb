//! Stage one: preference pairs from ranked candidate sets, and a scalar
//! reward head fitted to them with the Bradley–Terry pairwise loss
//! `-ln σ(r(z⁺) - r(z⁻))`.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, AdamState, Mlp2, MlpGrads};
use crate::retrieval::{CandidateSet, Scorer};

/// Default score-gap tolerance below which two candidates count as tied.
pub const DEFAULT_TIE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: usize,
    pub plus: Vec<usize>,
    pub minus: Vec<usize>,
    /// `log P(gold | plus) - log P(gold | minus)`.
    pub gap: f64,
}

/// All rank-ordered pairs whose score gap exceeds `tie_tol`, subsampled
/// uniformly to at most `max_pairs`.
pub fn build_pairs<R: Rng + ?Sized>(
    cs: &CandidateSet,
    max_pairs: Option<usize>,
    tie_tol: f64,
    rng: &mut R,
) -> Vec<PreferencePair> {
    let ranked: Vec<_> = cs.ranked().collect();
    let mut eligible = Vec::new();
    for (a, hi) in ranked.iter().enumerate() {
        for lo in &ranked[a + 1..] {
            let gap = hi.score - lo.score;
            if gap > tie_tol {
                eligible.push(PreferencePair {
                    query_id: cs.query_id,
                    plus: hi.ids.clone(),
                    minus: lo.ids.clone(),
                    gap,
                });
            }
        }
    }
    match max_pairs {
        Some(cap) if eligible.len() > cap => {
            let mut keep = index::sample(rng, eligible.len(), cap).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| eligible[i].clone()).collect()
        }
        _ => eligible,
    }
}

/// Output standardization applied before rewards reach the policy trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for RewardNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHeadModel {
    pub mlp: Mlp2,
    pub norm: RewardNorm,
}

impl RewardHeadModel {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        Self {
            mlp: Mlp2::zeros(d_in, hidden),
            norm: RewardNorm::default(),
        }
    }

    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp2::random(d_in, hidden, rng),
            norm: RewardNorm::default(),
        }
    }

    /// Raw head output on a pooled state.
    pub fn raw(&self, state: &[f64]) -> Result<f64> {
        self.mlp.forward(state)
    }

    pub fn normalized(&self, state: &[f64]) -> Result<f64> {
        Ok((self.raw(state)? - self.norm.mean) / self.norm.std)
    }

    /// Freezes output statistics over `states`.
    pub fn fit_normalization(&mut self, states: &[Vec<f64>]) -> Result<()> {
        if states.is_empty() {
            self.norm = RewardNorm::default();
            return Ok(());
        }
        let outs = states.iter().map(|s| self.raw(s)).collect::<Result<Vec<_>>>()?;
        let n = outs.len() as f64;
        let mean = outs.iter().sum::<f64>() / n;
        let var = outs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        self.norm = RewardNorm {
            mean,
            std: if std > 1e-8 { std } else { 1.0 },
        };
        Ok(())
    }
}

/// `r([z, x])`: the raw head output on the pooled state of the full context.
pub fn reward_of(rh: &RewardHeadModel, scorer: Scorer<'_>, query: &Query, ids: &[usize]) -> Result<f64> {
    rh.raw(&scorer.pool(query, ids)?)
}

/// Pooled states of both sides of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStates {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

pub fn pair_states(scorer: Scorer<'_>, queries: &[Query], pairs: &[PreferencePair]) -> Result<Vec<PairStates>> {
    let by_id: HashMap<usize, &Query> = queries.iter().map(|q| (q.id, q)).collect();
    pairs
        .iter()
        .map(|p| {
            let q = by_id.get(&p.query_id).ok_or(Error::InvalidId {
                id: p.query_id,
                size: queries.len(),
            })?;
            Ok(PairStates {
                plus: scorer.pool(q, &p.plus)?,
                minus: scorer.pool(q, &p.minus)?,
            })
        })
        .collect()
}

/// Bradley–Terry loss and its parameter gradient for one pair of states.
pub fn bt_loss_states(mlp: &Mlp2, plus: &[f64], minus: &[f64]) -> Result<(f64, MlpGrads)> {
    let margin = mlp.forward(plus)? - mlp.forward(minus)?;
    let loss = softplus(-margin);
    // d loss / d margin = -σ(-margin)
    let upstream = -sigmoid(-margin);
    let mut grads = mlp.backward(plus, upstream)?;
    grads.accumulate(&mlp.backward(minus, -upstream)?);
    Ok((loss, grads))
}

pub fn bt_loss(rh: &RewardHeadModel, scorer: Scorer<'_>, query: &Query, pair: &PreferencePair) -> Result<(f64, MlpGrads)> {
    let plus = scorer.pool(query, &pair.plus)?;
    let minus = scorer.pool(query, &pair.minus)?;
    bt_loss_states(&rh.mlp, &plus, &minus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub holdout_acc: f64,
}

/// Fraction of pairs with `r(plus) > r(minus)`.
pub fn pair_accuracy(mlp: &Mlp2, pairs: &[PairStates]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for p in pairs {
        if mlp.forward(&p.plus)? > mlp.forward(&p.minus)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Mini-batch Adam on the mean Bradley–Terry loss.
///
/// Returns one record per epoch: mean training loss over the epoch's
/// batches and pair accuracy on `holdout` at the end of the epoch.
pub fn train_reward<R: Rng + ?Sized>(
    rh: &mut RewardHeadModel,
    train: &[PairStates],
    holdout: &[PairStates],
    cfg: &RewardTrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(Error::Config("reward training needs at least one preference pair".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("reward batch size must be positive".into()));
    }
    let mut adam = AdamState::new(cfg.lr, &rh.mlp.param_sizes());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = MlpGrads::zeros_like(&rh.mlp);
            for &i in batch {
                let (loss, g) = bt_loss_states(&rh.mlp, &train[i].plus, &train[i].minus)?;
                total += loss;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut rh.mlp.params_mut(), &grads.param_blocks())?;
            step += 1;
            if !rh.mlp.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    diagnostics: format!("reward head diverged in epoch {epoch}"),
                });
            }
        }
        history.push(EpochStats {
            epoch,
            loss: total / train.len() as f64,
            holdout_acc: pair_accuracy(&rh.mlp, holdout)?,
        });
    }
    Ok(history)
}
