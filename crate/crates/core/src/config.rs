//! Experiment configuration: model-size presets, encoder geometry, loss
//! weights and sampler settings, loaded from a single JSON document.
//!
//! Pixel values are in [-1, 1] everywhere inside the crate; 8-bit images are
//! converted on ingestion.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// Spatial downsampling factor `f` and latent channel count `c` ("f8c4").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EncoderSpec {
    pub f: usize,
    pub c: usize,
}

impl EncoderSpec {
    pub const F8C4: EncoderSpec = EncoderSpec { f: 8, c: 4 };
    pub const F16C4: EncoderSpec = EncoderSpec { f: 16, c: 4 };
    pub const F16C16: EncoderSpec = EncoderSpec { f: 16, c: 16 };
    pub const F32C64: EncoderSpec = EncoderSpec { f: 32, c: 64 };

    pub fn new(f: usize, c: usize) -> Result<Self> {
        if f == 0 || !f.is_power_of_two() {
            return Err(invalid("encoder.f", format!("{f} is not a power of two")));
        }
        if c == 0 {
            return Err(invalid("encoder.c", "latent channel count must be positive"));
        }
        Ok(Self { f, c })
    }

    /// Number of stride-2 stages needed to reach the latent grid.
    pub fn downsamples(&self) -> usize {
        self.f.trailing_zeros() as usize
    }
}

impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}c{}", self.f, self.c)
    }
}

impl FromStr for EncoderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid("encoder", format!("`{s}` is not of the form f<N>c<M>"));
        let rest = s.strip_prefix('f').ok_or_else(bad)?;
        let (f, c) = rest.split_once('c').ok_or_else(bad)?;
        let f = f.parse().map_err(|_| bad())?;
        let c = c.parse().map_err(|_| bad())?;
        Self::new(f, c)
    }
}

impl TryFrom<String> for EncoderSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EncoderSpec> for String {
    fn from(e: EncoderSpec) -> String {
        e.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    S,
    B,
    M,
    L,
    XL,
    H,
}

impl ModelSize {
    pub const ALL: [ModelSize; 6] = [Self::S, Self::B, Self::M, Self::L, Self::XL, Self::H];

    pub fn name(&self) -> &'static str {
        match self {
            Self::S => "S",
            Self::B => "B",
            Self::M => "M",
            Self::L => "L",
            Self::XL => "XL",
            Self::H => "H",
        }
    }

    pub fn spec(&self) -> ModelSizeSpec {
        let (base_channels, depth_multipliers, num_transformer_blocks) = match self {
            Self::S => (48, [1, 2, 3, 3], 8),
            Self::B => (64, [1, 2, 3, 3], 10),
            Self::M => (96, [1, 2, 3, 3], 12),
            Self::L => (96, [1, 2, 4, 4], 16),
            Self::XL => (128, [1, 2, 4, 4], 16),
            Self::H => (192, [1, 2, 4, 4], 16),
        };
        ModelSizeSpec { name: *self, base_channels, depth_multipliers, num_transformer_blocks }
    }
}

impl FromStr for ModelSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of the decoder scaling table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSizeSpec {
    pub name: ModelSize,
    pub base_channels: usize,
    pub depth_multipliers: [usize; 4],
    pub num_transformer_blocks: usize,
}

impl ModelSizeSpec {
    /// Channel width of each of the four U-Net levels.
    pub fn level_widths(&self) -> [usize; 4] {
        self.depth_multipliers.map(|m| m * self.base_channels)
    }

    /// The transformer runs at the width of the deepest level.
    pub fn transformer_width(&self) -> usize {
        self.base_channels * self.depth_multipliers[3]
    }
}

pub fn resolve_model_size(name: &str) -> Result<ModelSizeSpec> {
    Ok(name.parse::<ModelSize>()?.spec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Random resize within `[resize_min, resize_max]`, then a fixed-size crop.
    PretrainMultiscale,
    /// Resize to the target resolution, then crop.
    FinetuneFixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub lambda_lpips: f64,
    pub lambda_repa: f64,
    pub lambda_kl: f64,
    pub ema_decay: f64,
    pub ema_start_step: u64,
    /// Learning rate when only the decoder trains.
    pub learning_rate: f64,
    /// Learning rate for every parameter while the encoder trains jointly.
    pub joint_learning_rate: f64,
    pub weight_decay: f64,
    pub stage: Stage,
    pub target_resolution: usize,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub train_encoder: bool,
    pub grad_clip: f64,
    pub resize_min: usize,
    pub resize_max: usize,
    pub hflip: bool,
    pub timestep_location: f64,
    pub timestep_scale: f64,
    /// Noise floor of the interpolation path; 0 gives the exact linear interpolant.
    pub sigma_min: f64,
    /// 0 disables periodic checkpoints (a final one is always written).
    pub checkpoint_every: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lambda_lpips: 0.5,
            lambda_repa: 0.25,
            lambda_kl: 1e-6,
            ema_decay: 0.999,
            ema_start_step: 1000,
            learning_rate: 3e-4,
            joint_learning_rate: 1e-4,
            weight_decay: 0.001,
            stage: Stage::PretrainMultiscale,
            target_resolution: 32,
            seed: 0,
            steps: 500,
            batch_size: 8,
            train_encoder: true,
            grad_clip: 1.0,
            resize_min: 32,
            resize_max: 64,
            hflip: true,
            timestep_location: 0.0,
            timestep_scale: 1.0,
            sigma_min: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainSpec {
    /// The rate actually applied: the joint rate whenever the encoder trains.
    pub fn effective_learning_rate(&self) -> f64 {
        if self.train_encoder {
            self.joint_learning_rate
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub n_steps: usize,
    pub rho: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { n_steps: 8, rho: 2.0 }
    }
}

/// Which image the perceptual term of the distillation loss compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpipsTarget {
    Original,
    Teacher,
}

impl FromStr for LpipsTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "teacher" => Ok(Self::Teacher),
            _ => Err(invalid("distill.lpips_target", format!("`{s}` is not `original` or `teacher`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSpec {
    pub teacher_steps: usize,
    pub teacher_rho: f64,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lpips_target: LpipsTarget,
    pub seed: u64,
    /// Held-out (ε, z) pairs used to measure student/teacher agreement.
    pub heldout_draws: usize,
    /// Precomputed (ε, z, x̂_ref) triples the student cycles through; 0 runs the teacher every step.
    pub teacher_pool: usize,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            teacher_steps: 7,
            teacher_rho: 2.0,
            steps: 2000,
            learning_rate: 1e-4,
            batch_size: 1,
            lpips_target: LpipsTarget::Original,
            seed: 0,
            heldout_draws: 16,
            teacher_pool: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSize,
    pub encoder: EncoderSpec,
    pub extractor_seed: u64,
    pub train: TrainSpec,
    pub sample: SampleSpec,
    pub distill: DistillSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".to_string(),
            model: ModelSize::S,
            encoder: EncoderSpec::F8C4,
            extractor_seed: 0,
            train: TrainSpec::default(),
            sample: SampleSpec::default(),
            distill: DistillSpec::default(),
        }
    }
}

fn check_weight(field: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(invalid(field, format!("{v} must be finite and non-negative")));
    }
    Ok(())
}

fn check_positive(field: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(invalid(field, format!("{v} must be finite and positive")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn model_size(&self) -> ModelSizeSpec {
        self.model.spec()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        check_weight("train.lambda_lpips", t.lambda_lpips)?;
        check_weight("train.lambda_repa", t.lambda_repa)?;
        check_weight("train.lambda_kl", t.lambda_kl)?;
        check_weight("train.weight_decay", t.weight_decay)?;
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return Err(invalid("train.ema_decay", format!("{} is outside [0, 1]", t.ema_decay)));
        }
        check_positive("train.learning_rate", t.learning_rate)?;
        check_positive("train.joint_learning_rate", t.joint_learning_rate)?;
        check_positive("train.grad_clip", t.grad_clip)?;
        check_positive("train.timestep_scale", t.timestep_scale)?;
        if !t.timestep_location.is_finite() {
            return Err(invalid("train.timestep_location", "must be finite"));
        }
        if !(0.0..1.0).contains(&t.sigma_min) {
            return Err(invalid("train.sigma_min", format!("{} is outside [0, 1)", t.sigma_min)));
        }
        let res = t.target_resolution;
        if res == 0 || res % 8 != 0 || res % self.encoder.f != 0 {
            return Err(invalid(
                "train.target_resolution",
                format!("{res} must be a positive multiple of 8 and of f={}", self.encoder.f),
            ));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if t.resize_min < res || t.resize_max < t.resize_min {
            return Err(invalid(
                "train.resize_min",
                format!("need target_resolution <= resize_min <= resize_max, got {res} / {} / {}", t.resize_min, t.resize_max),
            ));
        }
        if self.sample.n_steps == 0 {
            return Err(invalid("sample.n_steps", "must be at least 1"));
        }
        if !(self.sample.rho >= 1.0) || !self.sample.rho.is_finite() {
            return Err(invalid("sample.rho", format!("{} must be >= 1", self.sample.rho)));
        }
        let d = &self.distill;
        if d.teacher_steps == 0 {
            return Err(invalid("distill.teacher_steps", "must be at least 1"));
        }
        if !(d.teacher_rho >= 1.0) || !d.teacher_rho.is_finite() {
            return Err(invalid("distill.teacher_rho", format!("{} must be >= 1", d.teacher_rho)));
        }
        check_positive("distill.learning_rate", d.learning_rate)?;
        if d.batch_size == 0 {
            return Err(invalid("distill.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_scaling_table() {
        let s = resolve_model_size("S").unwrap();
        assert_eq!((s.base_channels, s.depth_multipliers, s.num_transformer_blocks), (48, [1, 2, 3, 3], 8));
        let h = resolve_model_size("H").unwrap();
        assert_eq!((h.base_channels, h.depth_multipliers, h.num_transformer_blocks), (192, [1, 2, 4, 4], 16));
        let rows: Vec<_> = ModelSize::ALL
            .iter()
            .map(|m| {
                let s = m.spec();
                (s.base_channels, s.depth_multipliers, s.num_transformer_blocks)
            })
            .collect();
        assert_eq!(
            rows,
            vec![
                (48, [1, 2, 3, 3], 8),
                (64, [1, 2, 3, 3], 10),
                (96, [1, 2, 3, 3], 12),
                (96, [1, 2, 4, 4], 16),
                (128, [1, 2, 4, 4], 16),
                (192, [1, 2, 4, 4], 16),
            ]
        );
        assert!(matches!(resolve_model_size("Z"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn encoder_presets_parse() {
        for (name, f, c) in [("f8c4", 8, 4), ("f16c4", 16, 4), ("f16c16", 16, 16), ("f32c64", 32, 64)] {
            let e: EncoderSpec = name.parse().unwrap();
            assert_eq!((e.f, e.c), (f, c));
            assert_eq!(e.to_string(), name);
        }
        assert!("f6c4".parse::<EncoderSpec>().is_err());
        assert!("g8c4".parse::<EncoderSpec>().is_err());
        assert!("f8c0".parse::<EncoderSpec>().is_err());
    }

    #[test]
    fn minimal_config_resolves_presets_and_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"model": "M", "encoder": "f8c4"}"#).unwrap();
        let m = cfg.model_size();
        assert_eq!((m.base_channels, m.depth_multipliers, m.num_transformer_blocks), (96, [1, 2, 3, 3], 12));
        assert_eq!(cfg.encoder, EncoderSpec { f: 8, c: 4 });
        assert_eq!((cfg.train.lambda_lpips, cfg.train.lambda_repa, cfg.train.lambda_kl), (0.5, 0.25, 1e-6));
        assert_eq!(cfg.train.ema_decay, 0.999);
        assert_eq!(cfg.train.weight_decay, 0.001);
        assert_eq!((cfg.sample.n_steps, cfg.sample.rho), (8, 2.0));
        assert_eq!((cfg.distill.teacher_steps, cfg.distill.teacher_rho), (7, 2.0));
    }

    #[test]
    fn negative_weight_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"train": {"lambda_lpips": -1}}"#).unwrap_err();
        match err {
            Error::InvalidField { field, .. } => assert_eq!(field, "train.lambda_lpips"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"modle": "S"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": "Z"}"#).is_err());
    }

    #[test]
    fn bad_resolution_rejected() {
        let err = ExperimentConfig::from_json(r#"{"train": {"target_resolution": 20}}"#).unwrap_err();
        assert!(err.to_string().contains("target_resolution"));
    }

    #[test]
    fn round_trip_through_json() {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelSize::XL;
        cfg.encoder = EncoderSpec::F16C16;
        cfg.train.target_resolution = 64;
        cfg.train.resize_min = 64;
        cfg.train.resize_max = 96;
        cfg.distill.lpips_target = LpipsTarget::Teacher;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"name": "x", "model": "S"}"#).unwrap();
        assert_eq!(load_config(&p).unwrap().name, "x");
        std::fs::write(&p, "{ not json").unwrap();
        assert!(load_config(&p).is_err());
    }
}
