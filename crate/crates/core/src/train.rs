//! Training loop: flow-matching loss plus perceptual, alignment and KL terms,
//! AdamW updates, weight EMA, CSV logging and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{image_to_tensor, multiscale_augment};
use crate::ema::EmaState;
use crate::encoder::{kl_loss, sample_latent};
use crate::error::{Error, Result};
use crate::features::{perceptual_loss, reference_features, repa_loss, scalar, ToyExtractor};
use crate::flow::{fm_loss_against, one_step_prediction, sample_timesteps, FlowPath, LossBreakdown, LossWeights};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::rng::{normal_tensor, stream};

pub const LOG_HEADER: &str = "step,fm,lpips,repa,kl,total,wallclock";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub losses: LossBreakdown,
    pub wallclock: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{},{:.3}", self.step, l.fm, l.lpips, l.repa, l.kl, l.total, self.wallclock)
    }
}

/// Differentiable loss terms of one batch, before weighting.
pub struct LossTerms {
    pub fm: Tensor,
    pub lpips: Option<Tensor>,
    pub repa: Option<Tensor>,
    pub kl: Option<Tensor>,
}

impl LossTerms {
    /// Weighted total as a graph node, and the host-side breakdown.
    pub fn combine(&self, w: LossWeights) -> Result<(Tensor, LossBreakdown)> {
        let mut total = self.fm.clone();
        let mut host = [scalar(&self.fm)?, 0.0, 0.0, 0.0];
        for (i, (term, weight)) in [(&self.lpips, w.lpips), (&self.repa, w.repa), (&self.kl, w.kl)].into_iter().enumerate() {
            if let Some(t) = term {
                host[i + 1] = scalar(t)?;
                if weight != 0.0 {
                    total = (total + (t * weight)?)?;
                }
            }
        }
        Ok((total, LossBreakdown::compose(host[0], host[1], host[2], host[3], w)))
    }
}

pub fn loss_weights(config: &ExperimentConfig) -> LossWeights {
    LossWeights { lpips: config.train.lambda_lpips, repa: config.train.lambda_repa, kl: config.train.lambda_kl }
}

/// Persisted scalar state of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub optimizer_steps: u64,
    pub rng: ChaCha8Rng,
    pub config_hash: String,
    pub extractor: String,
    pub encoder_frozen: bool,
    pub weights_hash: String,
    pub ema_hash: String,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    pub extractor: ToyExtractor,
    pub optimizer: AdamW,
    pub ema: EmaState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub images: Vec<RgbImage>,
    pub history: Vec<LogRow>,
    log_path: Option<PathBuf>,
    started: Instant,
    elapsed_before: f64,
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("ckpt").join(format!("step_{step}"))
}

impl Trainer {
    /// A fresh run: weights initialized from the training seed.
    pub fn new(config: ExperimentConfig, images: Vec<RgbImage>) -> Result<Self> {
        config.validate()?;
        let extractor = ToyExtractor::new(config.extractor_seed);
        let model = Model::new(&config, &extractor, DType::F32, config.train.seed)?;
        Self::from_model(config, model, extractor, images)
    }

    /// Continue training an existing model (fine-tuning stage, encoder freezing).
    pub fn from_model(config: ExperimentConfig, mut model: Model, extractor: ToyExtractor, images: Vec<RgbImage>) -> Result<Self> {
        config.validate()?;
        if images.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if !config.train.train_encoder {
            model.freeze_encoder();
        }
        let t = &config.train;
        let lr = if model.encoder.is_frozen() { t.learning_rate } else { t.effective_learning_rate() };
        let optimizer = AdamW::new(lr, t.weight_decay, Some(t.grad_clip));
        let ema = EmaState::new(&model.store, t.ema_decay, t.ema_start_step)?;
        let rng = stream(t.seed.wrapping_add(0x5eed));
        Ok(Self {
            config,
            model,
            extractor,
            optimizer,
            ema,
            rng,
            step: 0,
            images,
            history: Vec::new(),
            log_path: None,
            started: Instant::now(),
            elapsed_before: 0.0,
        })
    }

    /// Append every step to a CSV file, writing the header if the file is new.
    pub fn log_to(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            std::fs::write(&path, format!("{LOG_HEADER}\n"))?;
        }
        self.log_path = Some(path);
        Ok(())
    }

    /// Parameters that receive updates: everything except a frozen encoder.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let frozen = self.model.encoder.is_frozen();
        self.model
            .store
            .iter()
            .filter(|(n, _)| !(frozen && n.starts_with("encoder/")))
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect()
    }

    /// Draw and augment the next batch, (B, 3, R, R).
    pub fn next_batch(&mut self) -> Result<Tensor> {
        let t = &self.config.train;
        let mut items = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let i = self.rng.random_range(0..self.images.len());
            let crop = multiscale_augment(&self.images[i], &mut self.rng, t.stage, t)?;
            items.push(image_to_tensor(&crop, self.model.store.dtype())?);
        }
        Ok(Tensor::stack(&items, 0)?)
    }

    /// Loss terms for a batch, consuming latent, time and noise draws from `rng`.
    pub fn losses(&mut self, x: &Tensor) -> Result<LossTerms> {
        let t = self.config.train.clone();
        let b = x.dim(0)?;
        let posterior = self.model.encoder.encode(x)?;
        let z = sample_latent(&posterior, self.model.encoder.spec(), &mut self.rng)?.values;
        let times = sample_timesteps(&mut self.rng, b, t.timestep_location, t.timestep_scale)?;
        let eps = normal_tensor(&mut self.rng, x.dims(), x.dtype())?;
        let path = FlowPath { sigma_min: t.sigma_min };
        let x_t = path.interpolate(x, &eps, &times)?;
        let target = path.velocity_target(x, &eps)?;
        let out = self.model.decoder.forward(&x_t, &times, &z)?;
        let fm = fm_loss_against(&out.velocity, &target)?;
        let lpips = if t.lambda_lpips > 0.0 {
            let x0 = one_step_prediction(&x_t, &times, &out.velocity)?;
            Some(perceptual_loss(x, &x0, &self.extractor)?)
        } else {
            None
        };
        let repa = if t.lambda_repa > 0.0 {
            let r = reference_features(&self.extractor, x)?;
            Some(repa_loss(&out.hidden_tokens, &r, &self.model.head)?)
        } else {
            None
        };
        let kl = if self.model.encoder.is_frozen() { None } else { Some(kl_loss(&posterior)?) };
        Ok(LossTerms { fm, lpips, repa, kl })
    }

    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let x = self.next_batch()?;
        let terms = self.losses(&x)?;
        let (total, breakdown) = terms.combine(loss_weights(&self.config))?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite { step: self.step, detail: format!("{breakdown:?}") });
        }
        let grads = total.backward()?;
        self.optimizer.step(&self.trainable(), &grads)?;
        self.step += 1;
        self.ema.observe(self.step, &self.model.store)?;
        let row = LogRow { step: self.step, losses: breakdown, wallclock: self.wallclock() };
        if let Some(p) = &self.log_path {
            let mut f = std::fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{}", row.csv())?;
        }
        self.history.push(row);
        Ok(breakdown)
    }

    /// Train until `step == target`, checkpointing into `run_dir` if given.
    pub fn run_until(&mut self, target: u64, run_dir: Option<&Path>) -> Result<()> {
        let every = self.config.train.checkpoint_every;
        while self.step < target {
            let l = self.train_step()?;
            if self.step % 50 == 0 {
                log::info!("step {} fm {:.5} total {:.5}", self.step, l.fm, l.total);
            }
            if let Some(dir) = run_dir {
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn wallclock(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// Weights with the EMA shadow substituted.
    pub fn ema_model(&self) -> Result<Model> {
        let model = self.model.deep_clone(&self.config, &self.extractor)?;
        model.store.assign_from(&self.ema.shadow)?;
        Ok(model)
    }

    pub fn state(&self) -> Result<TrainState> {
        Ok(TrainState {
            step: self.step,
            optimizer_steps: self.optimizer.steps,
            rng: self.rng.clone(),
            config_hash: self.config.hash(),
            extractor: crate::features::FeatureExtractor::identity(&self.extractor),
            encoder_frozen: self.model.encoder.is_frozen(),
            weights_hash: self.model.hash()?,
            ema_hash: self.ema.hash()?,
        })
    }

    /// Write `ckpt/step_<n>/{weights,ema,optimizer}.safetensors` and `state.json`.
    pub fn save_checkpoint(&self, run_dir: &Path) -> Result<PathBuf> {
        let dir = checkpoint_dir(run_dir, self.step);
        std::fs::create_dir_all(&dir)?;
        self.model.save(dir.join("weights.safetensors"))?;
        self.ema.save(dir.join("ema.safetensors"))?;
        self.optimizer.save(dir.join("optimizer.safetensors"))?;
        let mut state = serde_json::to_value(self.state()?)?;
        state["wallclock"] = serde_json::json!(self.wallclock());
        std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        std::fs::write(dir.join("config.json"), self.config.to_json())?;
        Ok(dir)
    }

    /// Restore a run from a checkpoint directory written by [`Trainer::save_checkpoint`].
    pub fn resume(ckpt: &Path, images: Vec<RgbImage>) -> Result<Self> {
        let config = ExperimentConfig::from_json(&std::fs::read_to_string(ckpt.join("config.json"))?)?;
        let state_json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ckpt.join("state.json"))?)?;
        let state: TrainState = serde_json::from_value(state_json.clone())?;
        let extractor = ToyExtractor::new(config.extractor_seed);
        let model = Model::load(ckpt.join("weights.safetensors"), &config, &extractor, DType::F32)?;
        let mut trainer = Self::from_model(config, model, extractor, images)?;
        if state.encoder_frozen {
            trainer.model.freeze_encoder();
        }
        let t = &trainer.config.train;
        trainer.ema = EmaState::load(ckpt.join("ema.safetensors"), t.ema_decay, t.ema_start_step)?;
        trainer.optimizer.load_moments(ckpt.join("optimizer.safetensors"), state.optimizer_steps)?;
        trainer.rng = state.rng;
        trainer.step = state.step;
        trainer.elapsed_before = state_json["wallclock"].as_f64().unwrap_or(0.0);
        if trainer.model.hash()? != state.weights_hash {
            return Err(Error::Data(format!("weights in {} do not match the recorded hash", ckpt.display())));
        }
        Ok(trainer)
    }
}

/// Hash of a store restricted to one component prefix.
pub fn component_hash(store: &ParamStore, prefix: &str) -> Result<String> {
    store.hash_prefix(prefix)
}
