//! Run directories and their manifests.
//!
//! Layout: `runs/<name>/{manifest.json, ckpt/step_<n>/, logs.csv, reports/}`.
//! Every checkpoint directory carries its own `manifest.json` describing the
//! run that produced it.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "logs.csv";
pub const CKPT_DIR: &str = "ckpt";
pub const REPORTS_DIR: &str = "reports";

/// SHA-256 over the library sources this binary was built from.
pub fn code_hash() -> &'static str {
    env!("DIFFDEC_SOURCE_HASH")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStage {
    Train,
    Finetune,
    Distill,
    Eval,
    Sample,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub extractor: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentCheckpoint {
    pub path: String,
    pub weights_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub stage: RunStage,
    pub config_hash: String,
    pub code_hash: String,
    pub seeds: Seeds,
    pub extractor: String,
    pub parent: Option<ParentCheckpoint>,
    pub distilled: bool,
    /// Step of the checkpoint this copy sits next to, if any.
    pub step: Option<u64>,
    pub weights_hash: Option<String>,
    pub created_unix: u64,
    pub finished_unix: Option<u64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl ExperimentManifest {
    pub fn new(config: &ExperimentConfig, stage: RunStage, extractor: String) -> Self {
        Self {
            name: config.name.clone(),
            stage,
            config_hash: config.hash(),
            code_hash: code_hash().to_string(),
            seeds: Seeds { train: config.train.seed, extractor: config.extractor_seed },
            extractor,
            parent: None,
            distilled: stage == RunStage::Distill,
            step: None,
            weights_hash: None,
            created_unix: unix_now(),
            finished_unix: None,
        }
    }

    /// Hash of everything except the timestamps.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        let obj = v.as_object_mut().expect("manifest is an object");
        obj.remove("created_unix");
        obj.remove("finished_unix");
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The copy stored next to a checkpoint.
    pub fn for_checkpoint(&self, step: u64, weights_hash: String) -> Self {
        Self { step: Some(step), weights_hash: Some(weights_hash), finished_unix: Some(unix_now()), ..self.clone() }
    }
}

/// Paths of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join(CKPT_DIR))?;
        std::fs::create_dir_all(root.join(REPORTS_DIR))?;
        Ok(Self { root })
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join(REPORTS_DIR)
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join(CKPT_DIR).join(format!("step_{step}"))
    }

    /// Highest-numbered checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.root.join(CKPT_DIR);
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(s, _)| step > *s) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}
