//! Sequential in-context demonstration retrieval.
//!
//! A retrieval head picks demonstrations one at a time from a fixed corpus,
//! conditioning each pick on the pooled state of the query plus what it
//! has already chosen. The head is trained in two stages against a frozen
//! scoring backend: a reward head is fitted to the backend's pairwise
//! preferences between sampled contexts, then the head itself is optimized
//! with clipped PPO under a KL penalty to its initialization.

pub mod backend;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod ppo;
pub mod retrieval;
pub mod reward;

pub use backend::{Backend, StateCache, ToyConfig, ToyLm};
pub use checkpoint::{Checkpoint, Stage};
pub use config::RunConfig;
pub use corpus::{Demonstration, Query, TaskSpec};
pub use error::{Error, Result};
pub use ppo::{PpoConfig, RewardSource};
pub use retrieval::{CandidateSet, Episode, RetrievalHead, Scorer};
pub use reward::{PreferencePair, RewardHeadModel};
