//! Stage two: clipped PPO on the retrieval head.
//!
//! The terminal reward of an episode comes either from the stage-one
//! reward head (standardized) or straight from the backend's
//! `log P(gold | z, x)`. Every step additionally pays
//! `-β (log π_M(a|h) - log π_M̂(a|h))`, which keeps `M` near its
//! initialization. Returns are undiscounted and whitened across the batch
//! in place of a learned critic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::{AdamState, Matrix};
use crate::retrieval::{greedy_decode, rollout, Decode, Episode, Policy, RetrievalHead, Scorer};
use crate::reward::RewardHeadModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    RewardHead,
    RawLogprob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub beta: f64,
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub reward_source: RewardSource,
    /// Greedy dev accuracy is logged every this many steps.
    pub dev_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            clip_eps: 0.2,
            epochs_per_batch: 4,
            batch_size: 32,
            total_steps: 10_000,
            lr: 1e-4,
            entropy_coef: 0.0,
            reward_source: RewardSource::RewardHead,
            dev_every: 100,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip epsilon must be in (0,1), got {}", self.clip_eps)));
        }
        if self.batch_size == 0 || self.dev_every == 0 {
            return Err(Error::Config("batch size and dev interval must be positive".into()));
        }
        Ok(())
    }
}

/// `KL(π_M(·|h) ‖ π_M̂(·|h))` over allowed ids.
pub fn kl_step(head: &RetrievalHead, state: &[f64], allowed: &[bool]) -> Result<f64> {
    let lp = head.log_policy(Policy::Current, state, allowed)?;
    let lq = head.log_policy(Policy::Reference, state, allowed)?;
    let mut kl = 0.0;
    for (a, b) in lp.iter().zip(&lq) {
        if *a == f64::NEG_INFINITY {
            continue;
        }
        let p = a.exp();
        if p > 0.0 {
            kl += p * (a - b);
        }
    }
    // Rounding can leave a tiny negative when the policies coincide.
    Ok(kl.max(0.0))
}

fn entropy(logp: &[f64]) -> f64 {
    -logp
        .iter()
        .filter(|l| l.is_finite())
        .map(|&l| l.exp() * l)
        .sum::<f64>()
}

/// Per-step rewards `-β·(log π - log π̂)` with the terminal reward added on
/// the last step, summed backwards into undiscounted returns.
pub fn compute_returns(episode: &Episode, terminal_reward: f64, beta: f64) -> Vec<f64> {
    let k = episode.len();
    let mut returns = vec![0.0; k];
    let mut acc = 0.0;
    for t in (0..k).rev() {
        let s = &episode.steps[t];
        let mut r = -beta * (s.logp - s.logp_ref);
        if t + 1 == k {
            r += terminal_reward;
        }
        acc += r;
        returns[t] = acc;
    }
    returns
}

/// Centers and scales to unit variance; only centers when the variance
/// vanishes.
pub fn whiten(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    values
        .iter()
        .map(|v| if std > 1e-12 { (v - mean) / std } else { v - mean })
        .collect()
}

/// Per-step quantities frozen at collection time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub advantage: f64,
    pub ret: f64,
    pub old_logp: f64,
}

/// An episode with its transitions, ready for an update.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode: Episode,
    pub transitions: Vec<Transition>,
}

/// Turns episodes and their terminal rewards into trajectories with
/// batch-whitened advantages.
pub fn prepare_batch(episodes: Vec<Episode>, terminal_rewards: &[f64], beta: f64) -> Vec<Trajectory> {
    let returns: Vec<Vec<f64>> = episodes
        .iter()
        .zip(terminal_rewards)
        .map(|(e, &r)| compute_returns(e, r, beta))
        .collect();
    let flat: Vec<f64> = returns.iter().flatten().copied().collect();
    let mut adv = whiten(&flat).into_iter();
    episodes
        .into_iter()
        .zip(returns)
        .map(|(episode, rets)| {
            let transitions = episode
                .steps
                .iter()
                .zip(rets)
                .map(|(s, ret)| Transition {
                    advantage: adv.next().expect("one advantage per step"),
                    ret,
                    old_logp: s.logp,
                })
                .collect();
            Trajectory { episode, transitions }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateStats {
    pub loss: f64,
    pub clip_frac: f64,
    pub entropy: f64,
}

/// Clipped surrogate loss (to be minimized) and its gradient with respect
/// to the trainable head matrix.
pub fn surrogate(head: &RetrievalHead, batch: &[Trajectory], clip_eps: f64, entropy_coef: f64) -> Result<(SurrogateStats, Matrix)> {
    let mut grad = Matrix::zeros(head.num_demos(), head.dim());
    let count: usize = batch.iter().map(|t| t.transitions.len()).sum();
    if count == 0 {
        return Ok((
            SurrogateStats {
                loss: 0.0,
                clip_frac: 0.0,
                entropy: 0.0,
            },
            grad,
        ));
    }
    let inv = 1.0 / count as f64;
    let (mut objective, mut clipped, mut ent_total) = (0.0, 0usize, 0.0);
    let mut dlogits = vec![0.0; head.num_demos()];
    for traj in batch {
        for (step, tr) in traj.episode.steps.iter().zip(&traj.transitions) {
            let logp = head.log_policy(Policy::Current, &step.state, &step.allowed)?;
            let ratio = (logp[step.action] - tr.old_logp).exp();
            let a = tr.advantage;
            let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            let (unclipped_term, clipped_term) = (ratio * a, clipped_ratio * a);
            objective += unclipped_term.min(clipped_term);
            if (ratio - 1.0).abs() > clip_eps {
                clipped += 1;
            }
            let h = entropy(&logp);
            ent_total += h;

            // d(-term)/d log π(a): the min picks the unclipped branch unless
            // the clipped one is strictly smaller, which has zero slope.
            let coef = if unclipped_term <= clipped_term { -ratio * a } else { 0.0 };
            for (i, d) in dlogits.iter_mut().enumerate() {
                let l = logp[i];
                *d = if l == f64::NEG_INFINITY {
                    0.0
                } else {
                    let p = l.exp();
                    let indicator = if i == step.action { 1.0 } else { 0.0 };
                    // entropy gradient: dH/dlogit_i = -p_i (log p_i + H)
                    coef * (indicator - p) + entropy_coef * p * (l + h)
                };
            }
            grad.add_outer(inv, &dlogits, &step.state);
        }
    }
    let stats = SurrogateStats {
        loss: -(objective * inv) - entropy_coef * ent_total * inv,
        clip_frac: clipped as f64 * inv,
        entropy: ent_total * inv,
    };
    Ok((stats, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub clip_frac: f64,
    pub first_pass_clip_frac: f64,
}

/// `epochs_per_batch` Adam steps on the surrogate; touches `M` only.
pub fn ppo_update(head: &mut RetrievalHead, adam: &mut AdamState, batch: &[Trajectory], cfg: &PpoConfig, step: usize) -> Result<UpdateStats> {
    let mut clip_total = 0.0;
    let mut first_clip = 0.0;
    let mut last_loss = 0.0;
    for epoch in 0..cfg.epochs_per_batch {
        let (stats, grad) = surrogate(head, batch, cfg.clip_eps, cfg.entropy_coef)?;
        if !stats.loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite {
                step,
                diagnostics: format!(
                    "epoch {epoch}: loss={} clip_frac={} entropy={}",
                    stats.loss, stats.clip_frac, stats.entropy
                ),
            });
        }
        if epoch == 0 {
            first_clip = stats.clip_frac;
        }
        clip_total += stats.clip_frac;
        last_loss = stats.loss;
        adam.step(&mut [head.current_mut().as_mut_slice()], &[grad.as_slice()])?;
        if !head.current().is_finite() {
            return Err(Error::NonFinite {
                step,
                diagnostics: format!("head diverged in epoch {epoch}; last loss {}", stats.loss),
            });
        }
    }
    Ok(UpdateStats {
        loss: last_loss,
        clip_frac: if cfg.epochs_per_batch > 0 {
            clip_total / cfg.epochs_per_batch as f64
        } else {
            0.0
        },
        first_pass_clip_frac: first_clip,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub reward_var: f64,
    pub mean_kl: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub dev_accuracy: Option<f64>,
}

/// Where terminal rewards come from.
pub enum Rewarder<'a> {
    Head(&'a RewardHeadModel),
    RawLogprob,
}

impl Rewarder<'_> {
    fn terminal(&self, scorer: Scorer<'_>, query: &Query, ids: &[usize]) -> Result<f64> {
        match self {
            Rewarder::Head(rh) => rh.normalized(&scorer.pool(query, ids)?),
            Rewarder::RawLogprob => scorer.gold_logprob(query, ids),
        }
    }
}

/// Full stage-two loop: sample queries, roll out, reward, update.
#[allow(clippy::too_many_arguments)]
pub fn train_ppo<R: Rng>(
    head: &mut RetrievalHead,
    rewarder: Rewarder<'_>,
    scorer: Scorer<'_>,
    train: &[Query],
    dev: &[Query],
    k: usize,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if cfg.total_steps > 0 && train.is_empty() {
        return Err(Error::Config("PPO needs training queries".into()));
    }
    let mut adam = AdamState::new(cfg.lr, &[head.num_demos() * head.dim()]);
    let mut curve = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let mut episodes = Vec::with_capacity(cfg.batch_size);
        let mut rewards = Vec::with_capacity(cfg.batch_size);
        let (mut kl_sum, mut ent_sum, mut visited) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.batch_size {
            let q = &train[rng.random_range(0..train.len())];
            let ep = rollout(head, scorer, q, k, Decode::Sample(rng))?;
            for s in &ep.steps {
                kl_sum += kl_step(head, &s.state, &s.allowed)?;
                ent_sum += entropy(&head.log_policy(Policy::Current, &s.state, &s.allowed)?);
                visited += 1;
            }
            rewards.push(rewarder.terminal(scorer, q, &ep.actions())?);
            episodes.push(ep);
        }
        let n = rewards.len() as f64;
        let mean_reward = rewards.iter().sum::<f64>() / n;
        let reward_var = rewards.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / n;

        let batch = prepare_batch(episodes, &rewards, cfg.beta);
        let upd = ppo_update(head, &mut adam, &batch, cfg, step)?;

        let dev_accuracy = if (step + 1) % cfg.dev_every == 0 || step + 1 == cfg.total_steps {
            let picks = dev
                .iter()
                .map(|q| greedy_decode(head, scorer, q, k))
                .collect::<Result<Vec<_>>>()?;
            Some(metrics::accuracy(scorer, &picks, dev)?)
        } else {
            None
        };
        let visited = visited.max(1) as f64;
        curve.push(CurvePoint {
            step,
            mean_reward,
            reward_var,
            mean_kl: kl_sum / visited,
            entropy: ent_sum / visited,
            clip_frac: upd.clip_frac,
            dev_accuracy,
        });
    }
    Ok(curve)
}
