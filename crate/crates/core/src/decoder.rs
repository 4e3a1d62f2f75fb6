//! Hybrid U-Net / transformer velocity network `D(x_t | t, z)`.
//!
//! Four resolution levels of two ResNet blocks on each side, three strided
//! downsampling convs and three nearest+conv upsamplers. The deepest level
//! (one token per 8×8 pixel patch) is processed by a stack of transformer
//! blocks with windowed self-attention and a learned 17×17 relative-position
//! bias per layer.
//!
//! Conditioning enters twice: the latent grid is nearest-upsampled to pixel
//! resolution and concatenated with `x_t`, and an adaptive vector
//! (time embedding + pooled-latent embedding) drives the first GroupNorm of
//! every ResNet block and the first LayerNorm of every transformer block. The
//! second GroupNorm of each ResNet block is modulated by the time embedding
//! alone.

use candle_core::{DType, Device, Tensor, D};

use crate::config::{EncoderSpec, ModelSizeSpec};
use crate::error::{Error, Result};
use crate::nn::{group_norm, layer_norm, num_groups, silu, upsample_nearest, Conv2d, Linear};
use crate::params::ParamStore;

/// Transformer tokens cover 8×8 pixel patches.
pub const PATCH: usize = 8;
/// Tokens attend to neighbours at most this far away along each axis.
pub const WINDOW_RADIUS: usize = 8;
/// Transformer block whose output is returned for representation alignment (0-based).
pub const REPA_TAP: usize = 3;
const HEAD_DIM: usize = 64;

/// Nearest-neighbour replication of a (B, c, h, w) latent grid to (B, c, H, W).
pub fn upsample_latent(z: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = z.dims4()?;
    let (th, tw) = target;
    if h == 0 || w == 0 || th % h != 0 || tw % w != 0 || th / h != tw / w {
        return Err(Error::Shape(format!("cannot upsample latent {h}x{w} to {th}x{tw} by a uniform integer factor")));
    }
    upsample_nearest(z, th / h)
}

/// Which token pairs may attend to each other on a `grid_h × grid_w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionWindowMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_distance: usize,
    allowed: Vec<bool>,
}

impl AttentionWindowMask {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn allows(&self, p: usize, q: usize) -> bool {
        self.allowed[p * self.tokens() + q]
    }

    /// Side length of the relative-position table, `2·max_distance + 1`.
    pub fn table_side(&self) -> usize {
        2 * self.max_distance + 1
    }

    /// Row-major index of the (Δrow, Δcol) offset from `p` to `q`, if allowed.
    pub fn relative_index(&self, p: usize, q: usize) -> Option<usize> {
        if !self.allows(p, q) {
            return None;
        }
        let d = self.max_distance as isize;
        let dr = (q / self.grid_w) as isize - (p / self.grid_w) as isize + d;
        let dc = (q % self.grid_w) as isize - (p % self.grid_w) as isize + d;
        Some(dr as usize * self.table_side() + dc as usize)
    }

    /// Additive logit mask: 0 where allowed, −∞ elsewhere.
    pub fn additive(&self, dtype: DType) -> Result<Tensor> {
        let v: Vec<f64> = self.allowed.iter().map(|&a| if a { 0.0 } else { f64::NEG_INFINITY }).collect();
        Ok(Tensor::from_vec(v, (self.tokens(), self.tokens()), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub fn window_mask(grid_h: usize, grid_w: usize, max_distance: usize) -> AttentionWindowMask {
    let n = grid_h * grid_w;
    let mut allowed = vec![false; n * n];
    for p in 0..n {
        for q in 0..n {
            let dr = (p / grid_w).abs_diff(q / grid_w);
            let dc = (p % grid_w).abs_diff(q % grid_w);
            allowed[p * n + q] = dr <= max_distance && dc <= max_distance;
        }
    }
    AttentionWindowMask { grid_h, grid_w, max_distance, allowed }
}

/// Sinusoidal embedding of diffusion times, (B,) → (B, dim).
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let scaled = ti * 1000.0;
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((scaled * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((scaled * freq).sin());
        }
        if dim % 2 == 1 {
            v.push(0.0);
        }
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `normalized · (1 + γ) + β` with per-sample, per-channel γ, β of shape (B, C).
pub fn modulate(normalized: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let extra = normalized.rank() - 2;
    let mut shape = gamma.dims().to_vec();
    if normalized.rank() == 3 {
        // tokens: (B, N, C)
        shape.insert(1, 1);
    } else {
        shape.extend(std::iter::repeat_n(1, extra));
    }
    let g = (gamma.reshape(shape.as_slice())? + 1.0)?;
    let b = beta.reshape(shape.as_slice())?;
    Ok(normalized.broadcast_mul(&g)?.broadcast_add(&b)?)
}

/// GroupNorm (or LayerNorm for token inputs) whose scale and shift are
/// projected from a conditioning vector.
#[derive(Debug, Clone)]
pub struct AdaptiveNorm {
    proj: Linear,
    channels: usize,
    groups: usize,
}

impl AdaptiveNorm {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::zeros(store, &format!("{name}/proj"), cond_dim, 2 * channels)?,
            channels,
            groups: num_groups(channels),
        })
    }

    pub fn scale_shift(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = self.proj.forward(&silu(cond)?)?;
        Ok((gb.narrow(1, 0, self.channels)?, gb.narrow(1, self.channels, self.channels)?))
    }

    /// AdaGN on (B, C, H, W) feature maps.
    pub fn forward_map(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (g, b) = self.scale_shift(cond)?;
        modulate(&group_norm(x, self.groups, 1e-6)?, &g, &b)
    }

    /// AdaLN on (B, N, C) tokens.
    pub fn forward_tokens(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (g, b) = self.scale_shift(cond)?;
        modulate(&layer_norm(x, 1e-6)?, &g, &b)
    }
}

/// Time embedding, latent-map upsampling and fused adaptive vector for one forward pass.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub time_embedding: Tensor,
    pub latent_pixel_map: Tensor,
    pub adaptive_vector: Tensor,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: AdaptiveNorm,
    conv1: Conv2d,
    norm2: AdaptiveNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, emb: usize) -> Result<Self> {
        Ok(Self {
            norm1: AdaptiveNorm::new(store, &format!("{name}/norm1"), emb, in_ch)?,
            conv1: Conv2d::same(store, &format!("{name}/conv1"), in_ch, out_ch)?,
            norm2: AdaptiveNorm::new(store, &format!("{name}/norm2"), emb, out_ch)?,
            conv2: Conv2d::new(store, &format!("{name}/conv2"), out_ch, out_ch, 3, 1, 1, true)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::pointwise(store, &format!("{name}/skip"), in_ch, out_ch)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, cond: &ConditioningBundle) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward_map(x, &cond.adaptive_vector)?)?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward_map(&h, &cond.time_embedding)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Multi-head self-attention restricted to a window, with a learned
/// relative-position bias table of shape (heads, 17·17).
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    rel_bias: Tensor,
    heads: usize,
    head_dim: usize,
}

pub fn head_layout(width: usize) -> (usize, usize) {
    let heads = (width / HEAD_DIM).max(1);
    let heads = (1..=heads).rev().find(|h| width % h == 0).unwrap_or(1);
    (heads, width / heads)
}

impl WindowAttention {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let (heads, head_dim) = head_layout(width);
        let side = 2 * WINDOW_RADIUS + 1;
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}/qkv"), width, 3 * width)?,
            proj: Linear::zeros(store, &format!("{name}/proj"), width, width)?,
            rel_bias: store.get_or_init(&format!("{name}/rel_bias"), &[heads, side * side], crate::params::Init::Zeros)?,
            heads,
            head_dim,
        })
    }

    fn bias(&self, mask: &AttentionWindowMask) -> Result<Tensor> {
        let n = mask.tokens();
        let idx: Vec<u32> = (0..n * n)
            .map(|i| mask.relative_index(i / n, i % n).unwrap_or(0) as u32)
            .collect();
        let idx = Tensor::from_vec(idx, n * n, &Device::Cpu)?;
        let b = self.rel_bias.index_select(&idx, 1)?.reshape((self.heads, n, n))?;
        Ok(b.broadcast_add(&mask.additive(self.rel_bias.dtype())?)?)
    }

    /// Post-softmax attention weights, (B, heads, N, N).
    pub fn attention_weights(&self, x: &Tensor, mask: &AttentionWindowMask) -> Result<(Tensor, Tensor)> {
        let (b, n, _) = x.dims3()?;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, self.head_dim))?;
        let q = qkv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = qkv.narrow(2, 2, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let logits = (q.matmul(&k.t()?)? * scale)?.broadcast_add(&self.bias(mask)?.unsqueeze(0)?)?;
        let w = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok((w, v))
    }

    fn forward(&self, x: &Tensor, mask: &AttentionWindowMask) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let (w, v) = self.attention_weights(x, mask)?;
        let out = w.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    norm1: AdaptiveNorm,
    attn: WindowAttention,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl TransformerBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, emb: usize) -> Result<Self> {
        // GEGLU: a 4× projection split into value and gate halves.
        let hidden = 4 * width;
        Ok(Self {
            norm1: AdaptiveNorm::new(store, &format!("{name}/norm1"), emb, width)?,
            attn: WindowAttention::new(store, &format!("{name}/attn"), width)?,
            mlp_in: Linear::new(store, &format!("{name}/mlp_in"), width, hidden)?,
            mlp_out: Linear::zeros(store, &format!("{name}/mlp_out"), hidden / 2, width)?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor, mask: &AttentionWindowMask) -> Result<Tensor> {
        let h = self.norm1.forward_tokens(x, cond)?;
        let x = (x + self.attn.forward(&h, mask)?)?;
        let h = self.mlp_in.forward(&layer_norm(&x, 1e-6)?)?;
        let half = h.dim(D::Minus1)? / 2;
        let gated = (h.narrow(D::Minus1, 0, half)? * h.narrow(D::Minus1, half, half)?.gelu()?)?;
        Ok((&x + self.mlp_out.forward(&gated)?)?)
    }
}

/// Output of one decoder evaluation.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Predicted velocity `ν̂`, same shape as `x_t`.
    pub velocity: Tensor,
    /// (B, N, width) tokens after the alignment-tap transformer block.
    pub hidden_tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    model: ModelSizeSpec,
    encoder: EncoderSpec,
    resolution: usize,
    emb_dim: usize,
    time_in: Linear,
    time_out: Linear,
    latent_in: Linear,
    latent_out: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<[ResBlock; 2]>,
    downsample: Vec<Conv2d>,
    transformer: Vec<TransformerBlock>,
    up_blocks: Vec<[ResBlock; 2]>,
    upsample: Vec<Conv2d>,
    conv_out: Conv2d,
    out_groups: usize,
}

pub fn build_decoder(store: &mut ParamStore, model: &ModelSizeSpec, enc: EncoderSpec, resolution: usize) -> Result<Decoder> {
    Decoder::new(store, model, enc, resolution)
}

impl Decoder {
    pub fn new(store: &mut ParamStore, model: &ModelSizeSpec, enc: EncoderSpec, resolution: usize) -> Result<Self> {
        if resolution == 0 || resolution % PATCH != 0 {
            return Err(Error::InvalidArgument(format!("decoder resolution {resolution} is not a positive multiple of {PATCH}")));
        }
        let widths = model.level_widths();
        let base = model.base_channels;
        let emb_dim = 4 * base;
        let time_in = Linear::new(store, "decoder/time/fc1", base, emb_dim)?;
        let time_out = Linear::new(store, "decoder/time/fc2", emb_dim, emb_dim)?;
        let latent_in = Linear::new(store, "decoder/latent/fc1", enc.c, emb_dim)?;
        let latent_out = Linear::new(store, "decoder/latent/fc2", emb_dim, emb_dim)?;
        let conv_in = Conv2d::same(store, "decoder/conv_in", 3 + enc.c, widths[0])?;

        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = widths[0];
        for (level, &w) in widths.iter().enumerate() {
            let b0 = ResBlock::new(store, &format!("decoder/down{level}/block0"), ch, w, emb_dim)?;
            let b1 = ResBlock::new(store, &format!("decoder/down{level}/block1"), w, w, emb_dim)?;
            down_blocks.push([b0, b1]);
            ch = w;
            if level < 3 {
                downsample.push(Conv2d::new(store, &format!("decoder/down{level}/downsample"), w, w, 3, 2, 1, false)?);
            }
        }
        let width = model.transformer_width();
        let transformer = (0..model.num_transformer_blocks)
            .map(|i| TransformerBlock::new(store, &format!("decoder/transformer/block{i}"), width, emb_dim))
            .collect::<Result<Vec<_>>>()?;

        let mut up_blocks = vec![];
        let mut upsample = vec![];
        for level in (0..4).rev() {
            let w = widths[level];
            let b0 = ResBlock::new(store, &format!("decoder/up{level}/block0"), ch + w, w, emb_dim)?;
            let b1 = ResBlock::new(store, &format!("decoder/up{level}/block1"), w, w, emb_dim)?;
            up_blocks.push([b0, b1]);
            ch = w;
            if level > 0 {
                upsample.push(Conv2d::same(store, &format!("decoder/up{level}/upsample"), w, widths[level - 1])?);
                ch = widths[level - 1];
            }
        }
        let conv_out = Conv2d::new(store, "decoder/conv_out", widths[0], 3, 3, 1, 1, true)?;
        Ok(Self {
            model: *model,
            encoder: enc,
            resolution,
            emb_dim,
            time_in,
            time_out,
            latent_in,
            latent_out,
            conv_in,
            down_blocks,
            downsample,
            transformer,
            up_blocks,
            upsample,
            conv_out,
            out_groups: num_groups(widths[0]),
        })
    }

    pub fn model(&self) -> &ModelSizeSpec {
        &self.model
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        self.encoder
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.resolution / PATCH, self.resolution / PATCH)
    }

    pub fn level_widths(&self) -> [usize; 4] {
        self.model.level_widths()
    }

    pub fn num_transformer_blocks(&self) -> usize {
        self.transformer.len()
    }

    pub fn token_width(&self) -> usize {
        self.model.transformer_width()
    }

    pub fn conditioning(&self, x_t: &Tensor, t: &[f64], z: &Tensor) -> Result<ConditioningBundle> {
        let (b, _, h, w) = x_t.dims4()?;
        let t: Vec<f64> = match t.len() {
            1 => vec![t[0]; b],
            n if n == b => t.to_vec(),
            n => return Err(Error::Shape(format!("{n} timesteps for a batch of {b}"))),
        };
        let (zb, zc, _, _) = z.dims4()?;
        if zb != b || zc != self.encoder.c {
            return Err(Error::Shape(format!("latent {:?} does not match batch {b} with c={}", z.dims(), self.encoder.c)));
        }
        let latent_pixel_map = upsample_latent(z, (h, w))?;
        let temb = timestep_embedding(&t, self.model.base_channels, x_t.dtype())?;
        let time_embedding = self.time_out.forward(&silu(&self.time_in.forward(&temb)?)?)?;
        let pooled = z.mean(3)?.mean(2)?;
        let zemb = self.latent_out.forward(&silu(&self.latent_in.forward(&pooled)?)?)?;
        let adaptive_vector = (&time_embedding + zemb)?;
        Ok(ConditioningBundle { time_embedding, latent_pixel_map, adaptive_vector })
    }

    /// Predict the velocity at `(x_t, t)` given latents `z`. `t` has one entry
    /// per batch element or a single shared entry.
    pub fn forward(&self, x_t: &Tensor, t: &[f64], z: &Tensor) -> Result<DecoderOutput> {
        let (_, c, h, w) = x_t.dims4()?;
        if c != 3 || h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::Shape(format!("x_t {:?} must be (B, 3, H, W) with H, W multiples of {PATCH}", x_t.dims())));
        }
        let cond = self.conditioning(x_t, t, z)?;
        let mut x = self.conv_in.forward(&Tensor::cat(&[x_t, &cond.latent_pixel_map], 1)?)?;
        let mut skips = Vec::with_capacity(4);
        for (level, [b0, b1]) in self.down_blocks.iter().enumerate() {
            x = b1.forward(&b0.forward(&x, &cond)?, &cond)?;
            skips.push(x.clone());
            if let Some(down) = self.downsample.get(level) {
                x = down.forward(&x)?;
            }
        }

        let (b, ch, gh, gw) = x.dims4()?;
        let mask = window_mask(gh, gw, WINDOW_RADIUS);
        let mut tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let mut hidden = None;
        for (i, block) in self.transformer.iter().enumerate() {
            tokens = block.forward(&tokens, &cond.adaptive_vector, &mask)?;
            if i == REPA_TAP.min(self.transformer.len() - 1) {
                hidden = Some(tokens.clone());
            }
        }
        x = tokens.transpose(1, 2)?.reshape((b, ch, gh, gw))?;

        for (i, [b0, b1]) in self.up_blocks.iter().enumerate() {
            let skip = &skips[3 - i];
            x = Tensor::cat(&[&x, skip], 1)?;
            x = b1.forward(&b0.forward(&x, &cond)?, &cond)?;
            if let Some(up) = self.upsample.get(i) {
                x = up.forward(&upsample_nearest(&x, 2)?)?;
            }
        }
        let velocity = self.conv_out.forward(&silu(&group_norm(&x, self.out_groups, 1e-6)?)?)?;
        Ok(DecoderOutput { velocity, hidden_tokens: hidden.expect("at least one transformer block") })
    }

    /// Access for tests that inspect masked attention.
    pub fn attention(&self, block: usize) -> Option<&WindowAttention> {
        self.transformer.get(block).map(|b| &b.attn)
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }
}

/// Parameter counts per top-level decoder component, for auditing against the scaling table.
pub fn describe(store: &ParamStore) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, v) in store.iter() {
        let Some(rest) = name.strip_prefix("decoder/") else { continue };
        let key = rest.split('/').next().unwrap_or(rest).to_string();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, n)) => *n += v.elem_count(),
            None => groups.push((key, v.elem_count())),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSize;
    use crate::rng::{normal_tensor, stream};

    fn tiny() -> ModelSizeSpec {
        ModelSizeSpec { name: ModelSize::S, base_channels: 8, depth_multipliers: [1, 2, 2, 2], num_transformer_blocks: 2 }
    }

    #[test]
    fn window_mask_cases() {
        let m = window_mask(4, 4, 8);
        assert!((0..16).all(|p| (0..16).all(|q| m.allows(p, q))));
        let m = window_mask(10, 1, 8);
        assert!(!m.allows(0, 9));
        assert!(m.allows(0, 8));
        let m = window_mask(20, 20, 8);
        assert_eq!(m.table_side() * m.table_side(), 289);
        let mut seen = std::collections::BTreeSet::new();
        for p in 0..400 {
            for q in 0..400 {
                if let Some(i) = m.relative_index(p, q) {
                    seen.insert(i);
                }
            }
        }
        assert_eq!(seen.len(), 289);
    }

    #[test]
    fn upsample_latent_replicates_blocks() {
        let z = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 4, 2, 2)).unwrap();
        let up = upsample_latent(&z, (16, 16)).unwrap();
        assert_eq!(up.dims(), &[1, 4, 16, 16]);
        let v: Vec<Vec<Vec<f32>>> = up.squeeze(0).unwrap().to_vec3().unwrap();
        for c in 0..4 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(v[c][y][x], (c * 4 + (y / 8) * 2 + x / 8) as f32);
                }
            }
        }
        let back = crate::nn::avg_pool(&up, 8).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), z.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let z3 = Tensor::zeros((1, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(upsample_latent(&z3, (16, 16)).is_err());
    }

    #[test]
    fn level_widths_and_token_grid() {
        let mut store = ParamStore::new(DType::F32, 0);
        let d = build_decoder(&mut store, &ModelSize::M.spec(), EncoderSpec::F8C4, 32).unwrap();
        assert_eq!(d.token_grid(), (4, 4));
        assert_eq!(d.level_widths(), [96, 192, 288, 288]);
        let mut store = ParamStore::new(DType::F32, 0);
        let d = build_decoder(&mut store, &ModelSize::S.spec(), EncoderSpec::F8C4, 64).unwrap();
        assert_eq!(d.num_transformer_blocks(), 8);
        assert_eq!(d.token_grid(), (8, 8));
        let mut store = ParamStore::new(DType::F32, 0);
        assert!(build_decoder(&mut store, &ModelSize::S.spec(), EncoderSpec::F8C4, 20).is_err());
    }

    #[test]
    fn zero_init_output_and_shape_law() {
        let mut store = ParamStore::new(DType::F32, 0);
        let d = build_decoder(&mut store, &tiny(), EncoderSpec::F8C4, 16).unwrap();
        let mut rng = stream(0);
        let x = normal_tensor(&mut rng, (3, 3, 16, 16), DType::F32).unwrap();
        let z = normal_tensor(&mut rng, (3, 4, 2, 2), DType::F32).unwrap();
        let out = d.forward(&x, &[0.3, 0.5, 0.9], &z).unwrap();
        assert_eq!(out.velocity.dims(), x.dims());
        assert_eq!(out.hidden_tokens.dims(), &[3, 4, 16]);
        assert_eq!(out.velocity.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let bad_z = normal_tensor(&mut rng, (3, 4, 3, 3), DType::F32).unwrap();
        assert!(d.forward(&x, &[0.5], &bad_z).is_err());
    }

    #[test]
    fn adaptive_norm_identity_and_constant_cases() {
        let dev = Device::Cpu;
        let mut rng = stream(1);
        let x = normal_tensor(&mut rng, (2, 8, 4, 4), DType::F64).unwrap();
        let zeros = Tensor::zeros((2, 8), DType::F64, &dev).unwrap();
        let out = modulate(&group_norm(&x, 8, 1e-6).unwrap(), &zeros, &zeros).unwrap();
        let plain = group_norm(&x, 8, 1e-6).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), plain.flatten_all().unwrap().to_vec1::<f64>().unwrap());

        let constant = Tensor::full(3.5f64, (2, 8, 4, 4), &dev).unwrap();
        let beta = normal_tensor(&mut rng, (2, 8), DType::F64).unwrap();
        let gamma = normal_tensor(&mut rng, (2, 8), DType::F64).unwrap();
        let out = modulate(&group_norm(&constant, 8, 1e-6).unwrap(), &gamma, &beta).unwrap();
        let expect = beta.reshape((2, 8, 1, 1)).unwrap().broadcast_as((2, 8, 4, 4)).unwrap();
        let d = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn adaptive_norm_depends_on_condition() {
        let mut store = ParamStore::new(DType::F64, 11);
        let norm = AdaptiveNorm::new(&mut store, "n", 6, 8).unwrap();
        let mut rng = stream(2);
        let w = store.get("n/proj/weight").unwrap();
        w.set(&normal_tensor(&mut rng, w.dims(), DType::F64).unwrap()).unwrap();
        let x = normal_tensor(&mut rng, (1, 8, 4, 4), DType::F64).unwrap();
        let c1 = normal_tensor(&mut rng, (1, 6), DType::F64).unwrap();
        let c2 = normal_tensor(&mut rng, (1, 6), DType::F64).unwrap();
        let d = (norm.forward_map(&x, &c1).unwrap() - norm.forward_map(&x, &c2).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn time_embedding_distinct() {
        let ts = [0.0, 0.25, 0.5, 0.75, 1.0];
        let e = timestep_embedding(&ts, 48, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(e[i], e[j]);
            }
        }
    }

    #[test]
    fn head_layout_divides_width() {
        assert_eq!(head_layout(144), (2, 72));
        assert_eq!(head_layout(288), (4, 72));
        assert_eq!(head_layout(512), (8, 64));
        assert_eq!(head_layout(16), (1, 16));
    }
}
