//! Checkpoint and corpus loading shared by the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::{DType, Tensor};
use diffdec_core::config::{load_config, ExperimentConfig};
use diffdec_core::data::{ingest, ImageCorpus, ResizePolicy};
use diffdec_core::features::ToyExtractor;
use diffdec_core::manifest::{ExperimentManifest, ParentCheckpoint, RunDir, CKPT_DIR, MANIFEST_FILE};
use diffdec_core::model::Model;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const EMA_FILE: &str = "ema.safetensors";
pub const CONFIG_FILE: &str = "config.json";

pub struct Checkpoint {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub extractor: ToyExtractor,
    pub model: Model,
}

impl Checkpoint {
    pub fn load(dir: &Path, ema: bool) -> Result<Self> {
        let config = load_config(dir.join(CONFIG_FILE)).with_context(|| format!("checkpoint {}", dir.display()))?;
        let extractor = ToyExtractor::new(config.extractor_seed);
        let file = dir.join(if ema { EMA_FILE } else { WEIGHTS_FILE });
        let model = Model::load(&file, &config, &extractor, DType::F32).with_context(|| format!("loading {}", file.display()))?;
        Ok(Self { dir: dir.to_path_buf(), config, extractor, model })
    }

    pub fn as_parent(&self) -> Result<ParentCheckpoint> {
        Ok(ParentCheckpoint { path: self.dir.display().to_string(), weights_hash: self.model.hash()? })
    }
}

pub fn config_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn corpus(dir: &Path, policy: ResizePolicy) -> Result<ImageCorpus> {
    let c = ingest(dir, policy).with_context(|| format!("data {}", dir.display()))?;
    if !c.skipped.is_empty() {
        log::warn!("{} undecodable files skipped in {}", c.skipped.len(), dir.display());
    }
    Ok(c)
}

pub fn corpus_tensor(dir: &Path, resolution: usize) -> Result<Tensor> {
    Ok(corpus(dir, ResizePolicy::Eval)?.tensor(resolution, DType::F32)?)
}

/// Give every checkpoint directory of the run that lacks one its own manifest.
pub fn stamp_checkpoints(run: &RunDir, manifest: &ExperimentManifest) -> Result<()> {
    let root = run.root.join(CKPT_DIR);
    for entry in std::fs::read_dir(&root)? {
        let dir = entry?.path();
        let Some(step) = dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("step_")).and_then(|n| n.parse().ok())
        else {
            continue;
        };
        if dir.join(MANIFEST_FILE).exists() {
            continue;
        }
        let state: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
        let hash = state["weights_hash"].as_str().unwrap_or_default().to_string();
        manifest.for_checkpoint(step, hash).write(&dir)?;
    }
    Ok(())
}
