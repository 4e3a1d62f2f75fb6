use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

use super::conv::conv2d;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let std = (1.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let init = if zero_init { Init::Zeros } else { Init::Normal(std) };
        let weight = store.get_or_init(&format!("{name}/weight"), &[out_ch, in_ch, kernel, kernel], init)?;
        let bias = store.get_or_init(&format!("{name}/bias"), &[out_ch], Init::Zeros)?;
        Ok(Self { weight, bias, stride, pad })
    }

    /// 3×3, stride 1, same padding.
    pub fn same(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 3, 1, 1, false)
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 1, 1, 0, false)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::Normal((1.0 / in_dim as f64).sqrt()))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::Zeros)
    }

    fn with_init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = store.get_or_init(&format!("{name}/weight"), &[out_dim, in_dim], init)?;
        let bias = store.get_or_init(&format!("{name}/bias"), &[out_dim], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[0];
        Ok(y.reshape(out_dims)?)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Group normalization without affine parameters; x is (B, C, H, W).
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Layer normalization over the last dimension without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Groups used for a given channel count: min(32, channels), reduced until it divides.
pub fn num_groups(channels: usize) -> usize {
    let mut g = channels.min(32);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

/// Nearest-neighbour upsampling by an integer factor via broadcast, which keeps
/// the backward pass a plain reduction.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Non-overlapping average pooling by an integer factor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)?)
}
