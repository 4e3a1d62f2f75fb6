//! The full autoencoder: encoder, decoder and alignment head over one parameter store.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::config::ExperimentConfig;
use crate::decoder::Decoder;
use crate::encoder::{mode, Encoder, KlEncoder};
use crate::error::Result;
use crate::features::{AlignmentHead, FeatureExtractor};
use crate::params::ParamStore;
use crate::sampler::{make_schedule, sample, single_step, SampleSchedule};

pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: AlignmentHead,
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: &ExperimentConfig, extractor: &dyn FeatureExtractor, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        Self::build(&mut store, config, extractor).map(|(encoder, decoder, head)| Self { store, encoder, decoder, head })
    }

    fn build(
        store: &mut ParamStore,
        config: &ExperimentConfig,
        extractor: &dyn FeatureExtractor,
    ) -> Result<(Encoder, Decoder, AlignmentHead)> {
        let size = config.model_size();
        let encoder = KlEncoder::new(store, &size, config.encoder)?;
        let decoder = Decoder::new(store, &size, config.encoder, config.train.target_resolution)?;
        let feature_dim = extractor.layer_channels()[extractor.reference_layer()];
        let head = AlignmentHead::new(store, "head", decoder.token_width(), feature_dim)?;
        Ok((Encoder::Trainable(encoder), decoder, head))
    }

    /// Rebuild the architecture for `config` and load weights saved by [`Model::save`].
    pub fn load(path: impl AsRef<Path>, config: &ExperimentConfig, extractor: &dyn FeatureExtractor, dtype: DType) -> Result<Self> {
        let loaded = ParamStore::load(path, dtype)?;
        let model = Self::new(config, extractor, dtype, 0)?;
        model.store.assign_from(&loaded.snapshot()?)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path)
    }

    /// Independent copy with its own parameters.
    pub fn deep_clone(&self, config: &ExperimentConfig, extractor: &dyn FeatureExtractor) -> Result<Self> {
        let mut model = Self::new(config, extractor, self.store.dtype(), 0)?;
        model.store.assign_from(&self.store.snapshot()?)?;
        if self.encoder.is_frozen() {
            model.freeze_encoder();
        }
        Ok(model)
    }

    pub fn freeze_encoder(&mut self) {
        self.encoder = self.encoder.clone().freeze();
    }

    pub fn hash(&self) -> Result<String> {
        self.store.hash()
    }

    /// Posterior means for a batch of images.
    pub fn encode_mean(&self, images: &Tensor) -> Result<Tensor> {
        Ok(mode(&self.encoder.encode(images)?.detach(), self.encoder.spec()).values.contiguous()?)
    }

    pub fn schedule(&self, config: &ExperimentConfig) -> Result<SampleSchedule> {
        make_schedule(config.sample.n_steps, config.sample.rho)
    }

    /// Decode latents from noise with the given schedule; one step uses the single-step path.
    pub fn decode(&self, epsilon: &Tensor, z: &Tensor, schedule: &SampleSchedule) -> Result<Tensor> {
        if schedule.n_steps == 1 {
            single_step(&self.decoder, epsilon, z)
        } else {
            sample(&self.decoder, epsilon, z, schedule)
        }
    }
}
