//! Image corpora, PNG conversion, synthetic data and training augmentation.
//!
//! Images enter the model as (3, H, W) tensors with values in [−1, 1].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Stage, TrainSpec};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Which resize filter a consumer needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Lanczos, for training inputs.
    Train,
    /// Bilinear, for evaluation inputs.
    Eval,
}

impl ResizePolicy {
    pub fn filter(self) -> FilterType {
        match self {
            ResizePolicy::Train => FilterType::Lanczos3,
            ResizePolicy::Eval => FilterType::Triangle,
        }
    }
}

/// A sorted directory of decodable PNG files.
#[derive(Debug, Clone)]
pub struct ImageCorpus {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub policy: ResizePolicy,
}

pub fn ingest(root: impl AsRef<Path>, policy: ResizePolicy) -> Result<ImageCorpus> {
    let root = root.as_ref().to_path_buf();
    let mut candidates: Vec<PathBuf> = std::fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    candidates.sort();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for p in candidates {
        match image::open(&p) {
            Ok(_) => files.push(p),
            Err(e) => {
                log::warn!("skipping undecodable image {}: {e}", p.display());
                skipped.push(p);
            }
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!("no decodable PNG images in {}", root.display())));
    }
    Ok(ImageCorpus { root, files, skipped, policy })
}

impl ImageCorpus {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Hash of the ordered file names and contents.
    pub fn index_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for p in &self.files {
            h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            h.update(std::fs::read(p)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        Ok(image::open(&self.files[i])?.to_rgb8())
    }

    pub fn images(&self) -> Result<Vec<RgbImage>> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    /// All images resized to `resolution²` with the corpus filter, as a (N, 3, R, R) tensor.
    pub fn tensor(&self, resolution: usize, dtype: DType) -> Result<Tensor> {
        let imgs: Vec<Tensor> = self
            .images()?
            .iter()
            .map(|im| image_to_tensor(&resize_square(im, resolution, self.policy), dtype))
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&imgs, 0)?)
    }

    /// Split off the last `n_eval` images as a disjoint evaluation corpus.
    pub fn split(&self, n_eval: usize) -> Result<(ImageCorpus, ImageCorpus)> {
        if n_eval == 0 || n_eval >= self.len() {
            return Err(Error::InvalidArgument(format!("cannot hold out {n_eval} of {} images", self.len())));
        }
        let cut = self.len() - n_eval;
        let train = ImageCorpus { files: self.files[..cut].to_vec(), policy: ResizePolicy::Train, ..self.clone() };
        let eval = ImageCorpus { files: self.files[cut..].to_vec(), policy: ResizePolicy::Eval, ..self.clone() };
        Ok((train, eval))
    }
}

pub fn resize_square(img: &RgbImage, side: usize, policy: ResizePolicy) -> RgbImage {
    if img.width() as usize == side && img.height() as usize == side {
        return img.clone();
    }
    imageops::resize(img, side as u32, side as u32, policy.filter())
}

/// (3, H, W) tensor in [−1, 1].
pub fn image_to_tensor(img: &RgbImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut v = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            v[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`image_to_tensor`], clamping to the valid range.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| (((v[ch * h * w + y * w + x] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(img)
}

pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    tensor_to_image(t)?.save(path)?;
    Ok(())
}

/// Write each image of a (B, 3, H, W) batch as `<prefix><index>.png`.
pub fn save_batch(batch: &Tensor, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.as_ref())?;
    (0..batch.dim(0)?)
        .map(|i| {
            let p = dir.as_ref().join(format!("{prefix}{i:04}.png"));
            save_png(&batch.get(i)?, &p)?;
            Ok(p)
        })
        .collect()
}

/// Latent grids on disk: a safetensors archive holding a single tensor `z`.
pub fn save_latents(z: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut m = BTreeMap::new();
    m.insert("z".to_string(), z.clone());
    crate::params::save_tensors(&m, path)
}

pub fn load_latents(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut m = candle_core::safetensors::load(path.as_ref(), &Device::Cpu)?;
    m.remove("z").ok_or_else(|| Error::Data(format!("{} has no tensor named z", path.as_ref().display())))
}

/// Smooth images built from a colour gradient plus a few soft blobs.
pub fn synthetic_image(rng: &mut impl Rng, side: usize) -> RgbImage {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let grad: [[f32; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
    let blobs: Vec<([f32; 2], f32, [f32; 3])> = (0..rng.random_range(2..=4))
        .map(|_| {
            let centre = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
            let radius = rng.random_range(0.12..0.3);
            let colour = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            (centre, radius, colour)
        })
        .collect();
    let s = side as f32;
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let (u, v) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
        let px = |c: usize| {
            let mut val = base[c] + grad[c][0] * (u - 0.5) + grad[c][1] * (v - 0.5);
            for (centre, r, col) in &blobs {
                let d2 = (u - centre[0]).powi(2) + (v - centre[1]).powi(2);
                val += col[c] * (-d2 / (r * r)).exp();
            }
            (val.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn synthetic_corpus(n: usize, side: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = stream(seed);
    (0..n).map(|_| synthetic_image(&mut rng, side)).collect()
}

/// Write `n` synthetic PNGs named `img_<index>.png` into `dir`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, n: usize, side: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.as_ref())?;
    synthetic_corpus(n, side, seed)
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.as_ref().join(format!("img_{i:04}.png"));
            img.save(&p)?;
            Ok(p)
        })
        .collect()
}

/// The random choices behind one augmented crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    /// Short side after resizing.
    pub resize: usize,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

pub fn draw_augment(rng: &mut impl Rng, stage: Stage, width: usize, height: usize, spec: &TrainSpec) -> Result<AugmentDraw> {
    let crop = spec.target_resolution;
    let resize = match stage {
        Stage::PretrainMultiscale => rng.random_range(spec.resize_min..=spec.resize_max),
        Stage::FinetuneFixed => crop,
    };
    if resize < crop {
        return Err(Error::InvalidArgument(format!("resize target {resize} is smaller than crop {crop}")));
    }
    let short = width.min(height);
    if short < crop {
        return Err(Error::InvalidArgument(format!("image {width}x{height} is smaller than crop {crop}")));
    }
    let (rw, rh) = scaled_dims(width, height, resize);
    let top = rng.random_range(0..=rh - crop);
    let left = rng.random_range(0..=rw - crop);
    let flip = spec.hflip && rng.random_bool(0.5);
    Ok(AugmentDraw { resize, top, left, flip })
}

fn scaled_dims(width: usize, height: usize, short: usize) -> (usize, usize) {
    if width <= height {
        (short, (height * short).div_ceil(width).max(short))
    } else {
        ((width * short).div_ceil(height).max(short), short)
    }
}

pub fn apply_augment(img: &RgbImage, draw: &AugmentDraw, crop: usize) -> RgbImage {
    let (rw, rh) = scaled_dims(img.width() as usize, img.height() as usize, draw.resize);
    let resized = if (rw, rh) == (img.width() as usize, img.height() as usize) {
        img.clone()
    } else {
        imageops::resize(img, rw as u32, rh as u32, FilterType::Lanczos3)
    };
    let out = imageops::crop_imm(&resized, draw.left as u32, draw.top as u32, crop as u32, crop as u32).to_image();
    if draw.flip {
        imageops::flip_horizontal(&out)
    } else {
        out
    }
}

/// Random resize (stage 1) or fixed resize (stage 2), then crop and optional flip.
pub fn multiscale_augment(img: &RgbImage, rng: &mut impl Rng, stage: Stage, spec: &TrainSpec) -> Result<RgbImage> {
    let draw = draw_augment(rng, stage, img.width() as usize, img.height() as usize, spec)?;
    Ok(apply_augment(img, &draw, spec.target_resolution))
}
