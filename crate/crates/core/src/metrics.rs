//! Distortion and distribution metrics over image sets.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{perceptual_loss, FeatureExtractor};
use crate::rng::normal_tensor;
use crate::sampler::{sample, SampleSchedule, VelocityField};

/// Peak-to-peak range of images stored in [−1, 1].
pub const UNIT_PEAK: f64 = 2.0;
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;

fn host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(peak²/MSE)`, capped at 100 dB.
pub fn psnr(x: &Tensor, x_hat: &Tensor, peak: f64) -> Result<f64> {
    same_dims(x, x_hat)?;
    let (a, b) = (host(x)?, host(x_hat)?);
    let mse = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < peak * peak * 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

/// Summed-area table with a zero row and column prepended.
fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// Mean local SSIM over all valid 7×7 windows of every channel of every image.
pub fn ssim(x: &Tensor, x_hat: &Tensor, peak: f64) -> Result<f64> {
    same_dims(x, x_hat)?;
    let (b, c, h, w) = x.dims4()?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::InvalidArgument(format!("SSIM needs images of at least {k}x{k}, got {h}x{w}")));
    }
    let (a, bb) = (host(x)?, host(x_hat)?);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (k * k) as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..b * c {
        let pa = &a[p * plane..(p + 1) * plane];
        let pb = &bb[p * plane..(p + 1) * plane];
        let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
        let cross: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let (sa, sb, saa, sbb, sab) =
            (integral(pa, h, w), integral(pb, h, w), integral(&sq(pa), h, w), integral(&sq(pb), h, w), integral(&cross, h, w));
        for y in 0..=h - k {
            for x in 0..=w - k {
                let mu_a = box_sum(&sa, w, y, x, k) / n;
                let mu_b = box_sum(&sb, w, y, x, k) / n;
                let var_a = box_sum(&saa, w, y, x, k) / n - mu_a * mu_a;
                let var_b = box_sum(&sbb, w, y, x, k) / n - mu_b * mu_b;
                let cov = box_sum(&sab, w, y, x, k) / n - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Gaussian summary of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major d×d population covariance.
    pub covariance: Vec<f64>,
    pub count: usize,
    pub extractor: String,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Two-pass mean and population covariance of row vectors.
    pub fn from_rows(rows: &[Vec<f64>], extractor: impl Into<String>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidArgument(format!("feature statistics need at least 2 samples, got {}", rows.len())));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows have differing lengths".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= n;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        Ok(Self { mean, covariance: cov, count: rows.len(), extractor: extractor.into() })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Spatially averaged reference-layer features, one row per image.
pub fn pooled_features(images: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let feats = extractor.features(images)?;
    let f = feats[extractor.reference_layer()].mean(3)?.mean(2)?;
    Ok(f.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn feature_stats(images: &Tensor, extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    FeatureStats::from_rows(&pooled_features(images, extractor)?, extractor.identity())
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::MatrixRoot("non-finite eigenvalues".into()));
    }
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(ΣaΣb)^{1/2})`, with the cross term evaluated as
/// `tr((√Σa Σb √Σa)^{1/2})` so only symmetric roots are needed.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(p, q)| (p - q) * (p - q)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa)?;
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::MatrixRoot("non-finite eigenvalues in covariance product".into()));
    }
    let cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if d < -1e-6 {
        return Err(Error::MatrixRoot(format!("Fréchet distance came out negative ({d})")));
    }
    Ok(d.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// k-NN manifold density and coverage of `fake` relative to `real`.
pub fn density_coverage(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 || real.len() < k + 1 || fake.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "density/coverage with k={k} needs more than k points in each set (real {}, fake {})",
            real.len(),
            fake.len()
        )));
    }
    let radii: Vec<f64> = real
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut d: Vec<f64> = real.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| sq_dist(r, q)).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            *kth
        })
        .collect();
    let mut inside = 0usize;
    let mut covered = vec![false; real.len()];
    for f in fake {
        for (i, r) in real.iter().enumerate() {
            if sq_dist(f, r) <= radii[i] {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = inside as f64 / (k * fake.len()) as f64;
    let coverage = covered.iter().filter(|c| **c).count() as f64 / real.len() as f64;
    Ok((density, coverage))
}

/// Maps noise and latents to an image.
pub trait Decode {
    fn decode(&self, epsilon: &Tensor, z: &Tensor) -> Result<Tensor>;
}

/// Multi-step sampling from a velocity field, viewed as a stochastic decoder.
pub struct SamplingDecoder<'a> {
    pub field: &'a dyn VelocityField,
    pub schedule: SampleSchedule,
}

impl Decode for SamplingDecoder<'_> {
    fn decode(&self, epsilon: &Tensor, z: &Tensor) -> Result<Tensor> {
        sample(self.field, epsilon, z, &self.schedule)
    }
}

/// Per-pixel population standard deviation over `n_draws` decodes with
/// independent noise and shared latents. `shape` is the (B, 3, H, W) output shape.
pub fn diversity_map(decoder: &dyn Decode, z: &Tensor, shape: &[usize], n_draws: usize, seed: u64) -> Result<Tensor> {
    if n_draws < 2 {
        return Err(Error::InvalidArgument(format!("diversity map needs at least 2 draws, got {n_draws}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let mut sum = vec![0.0; numel];
    let mut outputs = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let eps = normal_tensor(&mut rng, shape, z.dtype())?;
        let out = host(&decoder.decode(&eps, z)?)?;
        if out.len() != numel {
            return Err(Error::Shape(format!("decoder produced {} values, expected {numel}", out.len())));
        }
        sum.iter_mut().zip(&out).for_each(|(s, v)| *s += v);
        outputs.push(out);
    }
    let n = n_draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut var = vec![0.0; numel];
    for out in &outputs {
        for ((v, o), m) in var.iter_mut().zip(out).zip(&mean) {
            *v += (o - m) * (o - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok(Tensor::from_vec(std, shape, z.device())?)
}

/// Evaluation summary of a reconstruction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub frechet: f64,
    pub density: f64,
    pub coverage: f64,
    pub n_images: usize,
    pub extractor: String,
    pub config_hash: String,
}

/// Compare reconstructions with originals, both (B, 3, H, W) in [−1, 1].
pub fn evaluate(originals: &Tensor, recons: &Tensor, extractor: &dyn FeatureExtractor, config_hash: &str) -> Result<MetricReport> {
    same_dims(originals, recons)?;
    let n = originals.dim(0)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("evaluation needs at least 2 images, got {n}")));
    }
    let mut psnr_sum = 0.0;
    for i in 0..n {
        psnr_sum += psnr(&originals.narrow(0, i, 1)?, &recons.narrow(0, i, 1)?, UNIT_PEAK)?;
    }
    let perceptual = perceptual_loss(originals, recons, extractor)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let real = pooled_features(originals, extractor)?;
    let fake = pooled_features(recons, extractor)?;
    let frechet = frechet_distance(
        &FeatureStats::from_rows(&real, extractor.identity())?,
        &FeatureStats::from_rows(&fake, extractor.identity())?,
    )?;
    let k = 5.min(n - 1);
    let (density, coverage) = density_coverage(&real, &fake, k)?;
    Ok(MetricReport {
        psnr: psnr_sum / n as f64,
        ssim: ssim(originals, recons, UNIT_PEAK)?,
        perceptual,
        frechet,
        density,
        coverage,
        n_images: n,
        extractor: extractor.identity(),
        config_hash: config_hash.to_string(),
    })
}
