//! Feature extractors and the perceptual and representation-alignment losses built on them.

use candle_core::{DType, Device, Tensor, D};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::conv::conv2d;
use crate::nn::{avg_pool, silu, Linear};
use crate::params::{hash_tensors, ParamStore};
use crate::rng::stream;

/// A frozen network that maps images to a pyramid of feature maps.
pub trait FeatureExtractor {
    /// Name plus a hash of the weights, recorded alongside every report.
    fn identity(&self) -> String;
    /// Channel count of each tapped layer.
    fn layer_channels(&self) -> Vec<usize>;
    /// (C, H, W) of every tap for a square input of side `resolution`.
    fn output_shapes(&self, resolution: usize) -> Result<Vec<(usize, usize, usize)>>;
    /// Per-layer features of a (B, 3, H, W) batch.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    /// Index of the tap used as the alignment reference.
    fn reference_layer(&self) -> usize {
        self.layer_channels().len() - 1
    }
}

const TOY_CHANNELS: [usize; 3] = [16, 32, 64];
const TOY_STRIDES: [usize; 3] = [1, 2, 2];

/// Three 3×3 conv + SiLU layers with random frozen weights.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    seed: u64,
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
    weight_hash: String,
}

pub fn toy_extractor(seed: u64) -> ToyExtractor {
    ToyExtractor::new(seed)
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed);
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for &cout in &TOY_CHANNELS {
            let fan_in = (cin * 9) as f64;
            let w = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let kv: Vec<f64> = (0..cout * cin * 9).map(|_| w.sample(&mut rng)).collect();
            let bv: Vec<f64> = (0..cout).map(|_| 0.1 * w.sample(&mut rng)).collect();
            kernels.push(Tensor::from_vec(kv, (cout, cin, 3, 3), &Device::Cpu).expect("shape"));
            biases.push(Tensor::from_vec(bv, (1, cout, 1, 1), &Device::Cpu).expect("shape"));
            cin = cout;
        }
        let names: Vec<String> = (0..kernels.len()).flat_map(|i| [format!("k{i}"), format!("b{i}")]).collect();
        let tensors: Vec<&Tensor> = kernels.iter().zip(&biases).flat_map(|(k, b)| [k, b]).collect();
        let weight_hash = hash_tensors(names.iter().map(|s| s.as_str()).zip(tensors)).expect("f64 tensors hash");
        Self { seed, kernels, biases, weight_hash }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl FeatureExtractor for ToyExtractor {
    fn identity(&self) -> String {
        format!("toy-conv-pyramid-v1:seed={}:{}", self.seed, &self.weight_hash[..16])
    }

    fn layer_channels(&self) -> Vec<usize> {
        TOY_CHANNELS.to_vec()
    }

    fn output_shapes(&self, resolution: usize) -> Result<Vec<(usize, usize, usize)>> {
        if resolution == 0 || resolution % 8 != 0 {
            return Err(Error::UnsupportedResolution { extractor: self.identity(), resolution });
        }
        let mut side = resolution;
        Ok(TOY_CHANNELS
            .iter()
            .zip(TOY_STRIDES)
            .map(|(&c, s)| {
                side /= s;
                (c, side, side)
            })
            .collect())
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != w {
            return Err(Error::Shape(format!("extractor expects (B, 3, S, S), got {:?}", x.dims())));
        }
        self.output_shapes(h)?;
        let mut out = Vec::with_capacity(self.kernels.len());
        let mut h = x.clone();
        for ((k, b), s) in self.kernels.iter().zip(&self.biases).zip(TOY_STRIDES) {
            let k = k.to_dtype(x.dtype())?;
            let b = b.to_dtype(x.dtype())?;
            h = silu(&conv2d(&h, &k, s, 1)?.broadcast_add(&b)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + 1e-20)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Uniformly weighted mean over layers of the spatially averaged squared
/// distance between channel-normalized features.
pub fn perceptual_loss(x: &Tensor, x_hat: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!("perceptual loss inputs differ: {:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    let fa = extractor.features(x)?;
    let fb = extractor.features(x_hat)?;
    let weight = 1.0 / fa.len() as f64;
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let d = (unit_normalize(a)? - unit_normalize(b)?)?.sqr()?.sum(1)?.mean_all()?;
        let term = (d * weight)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has at least one tap"))
}

/// Two-layer perceptron from decoder token width to reference feature width.
#[derive(Debug, Clone)]
pub struct AlignmentHead {
    fc1: Linear,
    fc2: Linear,
}

impl AlignmentHead {
    pub fn new(store: &mut ParamStore, name: &str, token_width: usize, feature_dim: usize) -> Result<Self> {
        let hidden = token_width.max(feature_dim) * 2;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}/fc1"), token_width, hidden)?,
            fc2: Linear::new(store, &format!("{name}/fc2"), hidden, feature_dim)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&silu(&self.fc1.forward(tokens)?)?)
    }
}

/// Average-pool (B, C, H, W) reference features to (B, N, C) tokens on a `grid × grid` layout.
pub fn pool_to_tokens(reference: &Tensor, grid: usize) -> Result<Tensor> {
    let (_, _, h, w) = reference.dims4()?;
    if grid == 0 || h != w || h % grid != 0 {
        return Err(Error::Shape(format!("reference grid {h}x{w} cannot pool to {grid}x{grid} tokens")));
    }
    let pooled = avg_pool(reference, h / grid)?;
    Ok(pooled.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// Mean over tokens of `1 − cos(prediction, reference)`; both (B, N, C).
pub fn cosine_alignment_loss(prediction: &Tensor, reference: &Tensor) -> Result<Tensor> {
    if prediction.dims() != reference.dims() {
        return Err(Error::Shape(format!("alignment shapes differ: {:?} vs {:?}", prediction.dims(), reference.dims())));
    }
    let dot = (prediction * reference)?.sum(D::Minus1)?;
    let na = prediction.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = reference.sqr()?.sum(D::Minus1)?.sqrt()?;
    let cos = dot.div(&((na * nb)? + 1e-30)?)?;
    Ok((cos.neg()? + 1.0)?.mean_all()?)
}

pub fn repa_loss(hidden_tokens: &Tensor, reference_features: &Tensor, head: &AlignmentHead) -> Result<Tensor> {
    let (_, n, _) = hidden_tokens.dims3()?;
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::Shape(format!("{n} hidden tokens do not form a square grid")));
    }
    let reference = pool_to_tokens(reference_features, grid)?;
    cosine_alignment_loss(&head.forward(hidden_tokens)?, &reference)
}

/// Detached reference features for the alignment loss, computed on clean images.
pub fn reference_features(extractor: &dyn FeatureExtractor, x: &Tensor) -> Result<Tensor> {
    let feats = extractor.features(&x.detach())?;
    Ok(feats[extractor.reference_layer()].detach())
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
