//! KL-regularized convolutional encoder: image → diagonal Gaussian posterior
//! over a `(c, H/f, W/f)` latent grid.

use candle_core::Tensor;
use rand::Rng;

use crate::config::{EncoderSpec, ModelSizeSpec};
use crate::error::{Error, Result};
use crate::nn::{group_norm, num_groups, silu, Conv2d};
use crate::params::ParamStore;
use crate::rng::normal_tensor;

pub const LOG_VARIANCE_MIN: f64 = -30.0;
pub const LOG_VARIANCE_MAX: f64 = 20.0;

/// Batched posterior; both tensors are (B, c, H/f, W/f).
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, log_variance: Tensor) -> Result<Self> {
        if mean.dims() != log_variance.dims() {
            return Err(Error::Shape(format!("mean {:?} vs log-variance {:?}", mean.dims(), log_variance.dims())));
        }
        let log_variance = log_variance.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)?;
        Ok(Self { mean, log_variance })
    }

    pub fn detach(&self) -> Self {
        Self { mean: self.mean.detach(), log_variance: self.log_variance.detach() }
    }
}

/// A latent sample `z` together with the encoder geometry it came from.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub values: Tensor,
    pub spec: EncoderSpec,
}

/// Reparameterized draw `z = μ + exp(logσ²/2)·n`, `n ~ N(0, I)` from `rng`.
pub fn sample_latent(posterior: &GaussianPosterior, spec: EncoderSpec, rng: &mut impl Rng) -> Result<LatentGrid> {
    let n = normal_tensor(rng, posterior.mean.shape().clone(), posterior.mean.dtype())?;
    let std = (&posterior.log_variance * 0.5)?.exp()?;
    let values = (&posterior.mean + (std * n)?)?;
    Ok(LatentGrid { values, spec })
}

/// Mean over elements of KL(N(μ, σ²) ‖ N(0, 1)) = ½(μ² + σ² − 1 − log σ²).
pub fn kl_loss(posterior: &GaussianPosterior) -> Result<Tensor> {
    let lv = &posterior.log_variance;
    let per = ((posterior.mean.sqr()? + lv.exp()?)? - 1.0)?.sub(lv)?;
    Ok((per * 0.5)?.mean_all()?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    groups_in: usize,
    groups_out: usize,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::same(store, &format!("{name}/conv1"), in_ch, out_ch)?,
            conv2: Conv2d::same(store, &format!("{name}/conv2"), out_ch, out_ch)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::pointwise(store, &format!("{name}/skip"), in_ch, out_ch)?)
            } else {
                None
            },
            groups_in: num_groups(in_ch),
            groups_out: num_groups(out_ch),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&group_norm(x, self.groups_in, 1e-6)?)?)?;
        let h = self.conv2.forward(&silu(&group_norm(&h, self.groups_out, 1e-6)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Downsampling conv stack with one residual block per level. Level widths
/// follow the decoder's depth multipliers; levels past the fourth reuse the
/// last multiplier.
#[derive(Debug, Clone)]
pub struct KlEncoder {
    spec: EncoderSpec,
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    mid: ResBlock,
    conv_out: Conv2d,
    groups_out: usize,
}

impl KlEncoder {
    pub fn new(store: &mut ParamStore, model: &ModelSizeSpec, spec: EncoderSpec) -> Result<Self> {
        let n_down = spec.downsamples();
        let width = |level: usize| model.base_channels * model.depth_multipliers[level.min(3)];
        let conv_in = Conv2d::same(store, "encoder/conv_in", 3, width(0))?;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut ch = width(0);
        for level in 0..=n_down {
            let w = width(level);
            blocks.push(ResBlock::new(store, &format!("encoder/level{level}/block0"), ch, w)?);
            ch = w;
            if level < n_down {
                downs.push(Conv2d::new(store, &format!("encoder/level{level}/down"), ch, ch, 3, 2, 1, false)?);
            }
        }
        let mid = ResBlock::new(store, "encoder/mid", ch, ch)?;
        let conv_out = Conv2d::same(store, "encoder/conv_out", ch, 2 * spec.c)?;
        Ok(Self { spec, conv_in, blocks, downs, mid, conv_out, groups_out: num_groups(ch) })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    /// Encode a (B, 3, H, W) batch; H and W must be divisible by f.
    pub fn encode(&self, image: &Tensor) -> Result<GaussianPosterior> {
        let (_, c, h, w) = image.dims4()?;
        let f = self.spec.f;
        if c != 3 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image {:?} is not (B, 3, H, W) with H, W divisible by f={f}", image.dims())));
        }
        let mut x = self.conv_in.forward(image)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if let Some(down) = self.downs.get(i) {
                x = down.forward(&x)?;
            }
        }
        x = self.mid.forward(&x)?;
        let out = self.conv_out.forward(&silu(&group_norm(&x, self.groups_out, 1e-6)?)?)?;
        let mean = out.narrow(1, 0, self.spec.c)?;
        let log_variance = out.narrow(1, self.spec.c, self.spec.c)?;
        GaussianPosterior::new(mean, log_variance)
    }

    pub fn freeze(self) -> FrozenEncoder {
        FrozenEncoder { inner: self }
    }
}

/// An encoder whose outputs carry no gradient. Trainers holding one exclude
/// the `encoder/` parameters from optimization, so its weights stay
/// bit-identical across any number of decoder updates.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    inner: KlEncoder,
}

impl FrozenEncoder {
    pub fn encode(&self, image: &Tensor) -> Result<GaussianPosterior> {
        Ok(self.inner.encode(image)?.detach())
    }

    pub fn spec(&self) -> EncoderSpec {
        self.inner.spec
    }

    pub fn freeze(self) -> FrozenEncoder {
        self
    }
}

/// Trainable or frozen, as selected by the training recipe.
#[derive(Debug, Clone)]
pub enum Encoder {
    Trainable(KlEncoder),
    Frozen(FrozenEncoder),
}

impl Encoder {
    pub fn encode(&self, image: &Tensor) -> Result<GaussianPosterior> {
        match self {
            Self::Trainable(e) => e.encode(image),
            Self::Frozen(e) => e.encode(image),
        }
    }

    pub fn spec(&self) -> EncoderSpec {
        match self {
            Self::Trainable(e) => e.spec(),
            Self::Frozen(e) => e.spec(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, Self::Frozen(_))
    }

    pub fn freeze(self) -> Self {
        match self {
            Self::Trainable(e) => Self::Frozen(e.freeze()),
            frozen => frozen,
        }
    }
}

/// Posterior mean as the deterministic latent used at evaluation time.
pub fn mode(posterior: &GaussianPosterior, spec: EncoderSpec) -> LatentGrid {
    LatentGrid { values: posterior.mean.clone(), spec }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSize;
    use crate::rng::stream;
    use candle_core::{DType, Device};

    fn tiny_model() -> ModelSizeSpec {
        ModelSizeSpec { name: ModelSize::S, base_channels: 8, depth_multipliers: [1, 2, 2, 2], num_transformer_blocks: 1 }
    }

    #[test]
    fn output_shape_scales_by_f() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = KlEncoder::new(&mut store, &tiny_model(), EncoderSpec::F8C4).unwrap();
        let x = Tensor::zeros((2, 3, 32, 16), DType::F32, &Device::Cpu).unwrap();
        let p = enc.encode(&x).unwrap();
        assert_eq!(p.mean.dims(), &[2, 4, 4, 2]);
        assert_eq!(p.log_variance.dims(), &[2, 4, 4, 2]);

        let mut store = ParamStore::new(DType::F32, 0);
        let enc = KlEncoder::new(&mut store, &tiny_model(), EncoderSpec::F32C64).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.encode(&x).unwrap().mean.dims(), &[1, 64, 2, 2]);
    }

    #[test]
    fn non_divisible_input_rejected() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = KlEncoder::new(&mut store, &tiny_model(), EncoderSpec::F8C4).unwrap();
        let x = Tensor::zeros((1, 3, 30, 30), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_closed_form_cases() {
        let dev = Device::Cpu;
        let zeros = Tensor::zeros((1, 4, 2, 2), DType::F64, &dev).unwrap();
        let ones = Tensor::ones((1, 4, 2, 2), DType::F64, &dev).unwrap();
        let p = GaussianPosterior::new(zeros.clone(), zeros.clone()).unwrap();
        assert_eq!(kl_loss(&p).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let p = GaussianPosterior::new(ones, zeros).unwrap();
        assert_eq!(kl_loss(&p).unwrap().to_scalar::<f64>().unwrap(), 0.5);
    }

    #[test]
    fn floor_variance_collapses_to_mean() {
        let dev = Device::Cpu;
        let mean = Tensor::new(&[0.3f64, -1.2, 2.0], &dev).unwrap();
        let lv = Tensor::new(&[-1e9f64, -1e9, -1e9], &dev).unwrap();
        let p = GaussianPosterior::new(mean.clone(), lv).unwrap();
        let z = sample_latent(&p, EncoderSpec::F8C4, &mut stream(1)).unwrap();
        let d = (z.values - mean).unwrap().abs().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        // exp(-30 / 2) is the clamped standard deviation
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn latent_sampling_is_seeded() {
        let dev = Device::Cpu;
        let p = GaussianPosterior::new(
            Tensor::zeros(8, DType::F64, &dev).unwrap(),
            Tensor::zeros(8, DType::F64, &dev).unwrap(),
        )
        .unwrap();
        let a = sample_latent(&p, EncoderSpec::F8C4, &mut stream(5)).unwrap().values.to_vec1::<f64>().unwrap();
        let b = sample_latent(&p, EncoderSpec::F8C4, &mut stream(5)).unwrap().values.to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn freeze_is_idempotent_and_detaches() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = Encoder::Trainable(KlEncoder::new(&mut store, &tiny_model(), EncoderSpec::F8C4).unwrap());
        let frozen = enc.freeze().freeze();
        assert!(frozen.is_frozen());
        let x = Tensor::ones((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let loss = frozen.encode(&x).unwrap().mean.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for (_, v) in store.iter() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }
}
