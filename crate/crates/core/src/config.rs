//! Run configuration: every knob of the two-stage pipeline in one
//! TOML-serializable struct, with a full-scale preset and a desk-scale one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::ToyConfig;
use crate::corpus::TaskSpec;
use crate::error::{Error, Result};
use crate::ppo::{PpoConfig, RewardSource};
use crate::reward::{RewardTrainConfig, DEFAULT_TIE_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSection {
    pub hidden: usize,
    /// Cap on preference pairs per query; `0` means no cap.
    pub max_pairs: usize,
    pub tie_tol: f64,
    /// Fraction of training queries held out for pair accuracy.
    pub holdout_frac: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub train: RewardTrainConfig,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            hidden: 8192,
            max_pairs: 32,
            tie_tol: DEFAULT_TIE_TOL,
            holdout_frac: 0.2,
            seed: 1,
            train: RewardTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoSection {
    pub seed: u64,
    /// Fraction of training queries used as the dev slice.
    pub dev_frac: f64,
    #[serde(flatten)]
    pub ppo: PpoConfig,
}

impl Default for PpoSection {
    fn default() -> Self {
        Self {
            seed: 2,
            dev_frac: 0.2,
            ppo: PpoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub train_queries: Option<PathBuf>,
    pub test_queries: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub k: usize,
    /// Per-step candidate-tree widths; one entry per selection step.
    pub widths: Vec<usize>,
    pub eval_seed: u64,
    pub task: TaskSpec,
    pub backend: ToyConfig,
    pub reward: RewardSection,
    pub ppo: PpoSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl RunConfig {
    /// Full-scale hyperparameters: k = 3, widths [3,2,2], β = 1e-3,
    /// batch 32, 100 reward epochs, 10k PPO steps, 8192 hidden units.
    pub fn full() -> Self {
        Self {
            k: 3,
            widths: vec![3, 2, 2],
            eval_seed: 3,
            task: TaskSpec::toy(),
            backend: ToyConfig::default(),
            reward: RewardSection::default(),
            ppo: PpoSection::default(),
            paths: Paths::default(),
        }
    }

    /// Desk scale: 64 hidden units and 2k PPO steps with a larger policy
    /// learning rate, since toy logits are O(1) rather than O(100).
    pub fn toy() -> Self {
        let mut c = Self::full();
        c.reward.hidden = 64;
        c.reward.train.lr = 1e-2;
        c.ppo.ppo.total_steps = 2000;
        c.ppo.ppo.lr = 1e-2;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected full or toy)"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c = Self::from_toml_str(&s)?;
        c.validate()?;
        Ok(c)
    }

    /// Number of candidate-tree leaves, `Π widths`.
    pub fn num_candidates(&self) -> usize {
        self.widths.iter().product()
    }

    pub fn reward_source(&self) -> RewardSource {
        self.ppo.ppo.reward_source
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.ppo.ppo.validate()?;
        if self.widths.len() != self.k {
            return Err(Error::Config(format!(
                "widths has {} entries but k = {}",
                self.widths.len(),
                self.k
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must all be >= 1".into()));
        }
        if self.k > self.task.corpus_size {
            return Err(Error::TooManyDemos {
                k: self.k,
                n: self.task.corpus_size,
            });
        }
        if self.reward.hidden == 0 {
            return Err(Error::Config("reward hidden width must be positive".into()));
        }
        for (name, f) in [("reward.holdout_frac", self.reward.holdout_frac), ("ppo.dev_frac", self.ppo.dev_frac)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {f}")));
            }
        }
        Ok(())
    }

    /// Digest of everything except file locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn max_pairs(&self) -> Option<usize> {
        (self.reward.max_pairs > 0).then_some(self.reward.max_pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_the_documented_values() {
        let p = RunConfig::full();
        assert_eq!((p.k, p.widths.clone(), p.num_candidates()), (3, vec![3, 2, 2], 12));
        assert_eq!(p.ppo.ppo.beta, 1e-3);
        assert_eq!(p.ppo.ppo.batch_size, 32);
        assert_eq!(p.ppo.ppo.total_steps, 10_000);
        assert_eq!(p.reward.train.epochs, 100);
        assert_eq!(p.reward.train.batch_size, 32);
        assert_eq!(p.reward.hidden, 8192);
        let t = RunConfig::toy();
        assert_eq!((t.task.corpus_size, t.reward.hidden, t.ppo.ppo.total_steps), (50, 64, 2000));
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = RunConfig::from_toml_str("k = 2\nwidths = [3, 2]\n[ppo]\nbeta = 0.5\n").unwrap();
        assert_eq!(partial.k, 2);
        assert_eq!(partial.ppo.ppo.beta, 0.5);
        assert_eq!(partial.ppo.ppo.clip_eps, 0.2);
        assert!(RunConfig::from_toml_str("k = \"three\"").is_err());
    }

    #[test]
    fn validation_catches_inconsistent_widths() {
        let mut c = RunConfig::toy();
        c.widths = vec![3, 2];
        assert!(c.validate().is_err());
        c.widths = vec![3, 0, 2];
        assert!(c.validate().is_err());
        assert!(RunConfig::toy().validate().is_ok());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::toy();
        let mut b = a.clone();
        b.paths.out_dir = Some("/tmp/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.k = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
