use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::retrieval::RetrievalHead;
use crate::reward::RewardHeadModel;

pub const CHECKPOINT_VERSION: &str = "demoselect-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initialized,
    RewardTrained,
    PolicyTrained,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub stage: Stage,
    pub task_fingerprint: String,
    pub head: RetrievalHead,
    /// Includes the frozen output normalization.
    pub reward_head: Option<RewardHeadModel>,
    /// Config snapshot, seeds included.
    pub config: RunConfig,
}

impl Checkpoint {
    pub fn new(head: RetrievalHead, config: RunConfig, task_fingerprint: String) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            stage: Stage::Initialized,
            task_fingerprint,
            head,
            reward_head: None,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))?;
        let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: found.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}
