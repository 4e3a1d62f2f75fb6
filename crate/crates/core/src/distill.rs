//! Single-step distillation: a frozen multi-step teacher supervises a student evaluated at t = 1.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DistillSpec, ExperimentConfig, LpipsTarget};
use crate::encoder::sample_latent;
use crate::error::{Error, Result};
use crate::features::{perceptual_loss, reference_features, repa_loss, scalar, FeatureExtractor, ToyExtractor};
use crate::flow::{fm_loss_against, one_step_prediction, LossBreakdown, LossWeights};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::tensor_bytes;
use crate::rng::{normal_tensor, stream};
use crate::sampler::{make_schedule, sample, single_step, SampleSchedule, VelocityField};
use crate::train::{loss_weights, LogRow};

/// Frozen teacher and trainable student, initially identical.
pub struct DistillPair {
    pub teacher: Model,
    pub student: Model,
    pub teacher_steps: usize,
    pub teacher_rho: f64,
    teacher_hash: String,
}

impl DistillPair {
    pub fn new(teacher: Model, config: &ExperimentConfig, extractor: &dyn FeatureExtractor) -> Result<Self> {
        let mut teacher = teacher;
        teacher.freeze_encoder();
        let student = teacher.deep_clone(config, extractor)?;
        let teacher_hash = teacher.hash()?;
        Ok(Self {
            teacher,
            student,
            teacher_steps: config.distill.teacher_steps,
            teacher_rho: config.distill.teacher_rho,
            teacher_hash,
        })
    }

    pub fn teacher_schedule(&self) -> Result<SampleSchedule> {
        make_schedule(self.teacher_steps, self.teacher_rho)
    }

    pub fn teacher_hash(&self) -> &str {
        &self.teacher_hash
    }

    /// Fails if the teacher weights changed since the pair was built.
    pub fn check_teacher(&self) -> Result<()> {
        if self.teacher.hash()? != self.teacher_hash {
            return Err(Error::FrozenMutated(format!("teacher hash changed from {}", self.teacher_hash)));
        }
        Ok(())
    }
}

/// `x̂_ref`: the teacher's multi-step sample from exactly `epsilon`.
pub fn teacher_reconstruct(pair: &DistillPair, epsilon: &Tensor, z: &Tensor) -> Result<Tensor> {
    teacher_reconstruct_with(&pair.teacher.decoder, &pair.teacher_schedule()?, epsilon, z)
}

/// [`teacher_reconstruct`] for an arbitrary velocity field.
pub fn teacher_reconstruct_with(
    field: &dyn VelocityField,
    schedule: &SampleSchedule,
    epsilon: &Tensor,
    z: &Tensor,
) -> Result<Tensor> {
    Ok(sample(field, &epsilon.detach(), &z.detach(), schedule)?.detach())
}

/// Distillation losses at `t = 1`, where the student input is `ε` itself.
pub struct DistillInputs<'a> {
    pub student_velocity: &'a Tensor,
    pub x_ref: &'a Tensor,
    pub x: &'a Tensor,
    pub epsilon: &'a Tensor,
}

pub fn distill_losses(
    inputs: &DistillInputs,
    extractor: &dyn FeatureExtractor,
    weights: LossWeights,
    lpips_target: LpipsTarget,
    repa: Option<Tensor>,
) -> Result<(Tensor, LossBreakdown)> {
    let target = (inputs.x_ref - inputs.epsilon)?;
    let fm = fm_loss_against(inputs.student_velocity, &target)?;
    let mut total = fm.clone();
    let mut lpips_v = 0.0;
    if weights.lpips > 0.0 {
        let x0 = one_step_prediction(inputs.epsilon, &[1.0], inputs.student_velocity)?;
        let reference = match lpips_target {
            LpipsTarget::Original => inputs.x,
            LpipsTarget::Teacher => inputs.x_ref,
        };
        let l = perceptual_loss(reference, &x0, extractor)?;
        lpips_v = scalar(&l)?;
        total = (total + (l * weights.lpips)?)?;
    }
    let mut repa_v = 0.0;
    if let Some(r) = repa {
        repa_v = scalar(&r)?;
        if weights.repa > 0.0 {
            total = (total + (r * weights.repa)?)?;
        }
    }
    Ok((total, LossBreakdown::compose(scalar(&fm)?, lpips_v, repa_v, 0.0, weights)))
}

/// Fixed (ε, z) draws on the training latents with the teacher's outputs.
pub struct HeldOut {
    pub epsilon: Tensor,
    pub z: Tensor,
    pub teacher: Tensor,
}

pub fn held_out(pair: &DistillPair, images: &Tensor, draws: usize, seed: u64) -> Result<HeldOut> {
    let n = images.dim(0)?;
    let z_all = pair.teacher.encode_mean(images)?;
    let mut rng = stream(seed ^ 0x00de_1d0u64);
    let idx: Vec<u32> = (0..draws).map(|i| (i % n) as u32).collect();
    let idx = Tensor::from_vec(idx, draws, images.device())?;
    let z = z_all.index_select(&idx, 0)?;
    let epsilon = normal_tensor(&mut rng, (draws, 3, images.dim(2)?, images.dim(3)?), images.dtype())?;
    let teacher = teacher_reconstruct(pair, &epsilon, &z)?;
    Ok(HeldOut { epsilon, z, teacher })
}

/// Mean squared distance between student single-step and teacher multi-step outputs.
pub fn held_out_mse(student: &Model, h: &HeldOut) -> Result<f64> {
    let s = single_step(&student.decoder, &h.epsilon, &h.z)?;
    scalar(&(s - &h.teacher)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    pub steps: u64,
    pub heldout_mse_before: f64,
    pub heldout_mse_after: f64,
    pub teacher_hash: String,
    pub student_hash: String,
    pub noise_sync_checks: u64,
    pub history: Vec<LogRow>,
}

/// SHA-256 of each batch row's bytes, used to prove teacher and student saw the same noise.
pub fn noise_digests(epsilon: &Tensor) -> Result<Vec<String>> {
    let b = epsilon.dim(0)?;
    (0..b).map(|i| Ok(hex::encode(Sha256::digest(tensor_bytes(&epsilon.get(i)?)?)))).collect()
}

/// One batch of teacher supervision with the noise it was generated from.
pub struct TeacherBatch {
    pub x: Tensor,
    pub z: Tensor,
    pub epsilon: Tensor,
    pub x_ref: Tensor,
    pub digests: Vec<String>,
}

fn teacher_batch(pair: &DistillPair, x: Tensor, z: Tensor, epsilon: Tensor) -> Result<TeacherBatch> {
    let x_ref = teacher_reconstruct(pair, &epsilon, &z)?;
    let digests = noise_digests(&epsilon)?;
    Ok(TeacherBatch { x, z, epsilon, x_ref, digests })
}

/// Draw `count` (x, z, ε) triples and run the teacher on them in chunks.
fn draw_teacher_batch(pair: &DistillPair, images: &Tensor, count: usize, rng: &mut ChaCha8Rng) -> Result<TeacherBatch> {
    let n = images.dim(0)?;
    let idx: Vec<u32> = (0..count).map(|_| rng.random_range(0..n) as u32).collect();
    let x = images.index_select(&Tensor::from_vec(idx, count, images.device())?, 0)?;
    let posterior = pair.teacher.encoder.encode(&x)?;
    let z = sample_latent(&posterior, pair.teacher.encoder.spec(), rng)?.values.detach();
    let epsilon = normal_tensor(rng, x.dims(), x.dtype())?;
    teacher_batch(pair, x, z, epsilon)
}

fn build_pool(pair: &DistillPair, images: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Result<TeacherBatch> {
    const CHUNK: usize = 8;
    let mut parts = Vec::new();
    let mut left = size;
    while left > 0 {
        let c = left.min(CHUNK);
        parts.push(draw_teacher_batch(pair, images, c, rng)?);
        left -= c;
    }
    let cat = |f: fn(&TeacherBatch) -> &Tensor| -> Result<Tensor> {
        Ok(Tensor::cat(&parts.iter().map(f).collect::<Vec<_>>(), 0)?)
    };
    Ok(TeacherBatch {
        x: cat(|b| &b.x)?,
        z: cat(|b| &b.z)?,
        epsilon: cat(|b| &b.epsilon)?,
        x_ref: cat(|b| &b.x_ref)?,
        digests: parts.iter().flat_map(|b| b.digests.clone()).collect(),
    })
}

fn pool_batch(pool: &TeacherBatch, count: usize, rng: &mut ChaCha8Rng) -> Result<TeacherBatch> {
    let n = pool.x.dim(0)?;
    let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..n)).collect();
    let t = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), count, pool.x.device())?;
    Ok(TeacherBatch {
        x: pool.x.index_select(&t, 0)?,
        z: pool.z.index_select(&t, 0)?,
        epsilon: pool.epsilon.index_select(&t, 0)?,
        x_ref: pool.x_ref.index_select(&t, 0)?,
        digests: idx.iter().map(|&i| pool.digests[i].clone()).collect(),
    })
}

/// Fine-tune the student for `spec.steps` iterations on `images` (N, 3, R, R).
pub fn distill_run(
    pair: &mut DistillPair,
    images: &Tensor,
    config: &ExperimentConfig,
    extractor: &ToyExtractor,
    mut on_step: impl FnMut(&LogRow),
) -> Result<DistillReport> {
    let spec: &DistillSpec = &config.distill;
    pair.check_teacher()?;
    let held = held_out(pair, images, spec.heldout_draws, spec.seed)?;
    let before = held_out_mse(&pair.student, &held)?;
    let weights = loss_weights(config);
    let mut optimizer = AdamW::new(spec.learning_rate, config.train.weight_decay, Some(config.train.grad_clip));
    let mut rng: ChaCha8Rng = stream(spec.seed);
    let pool = if spec.teacher_pool > 0 { Some(build_pool(pair, images, spec.teacher_pool, &mut rng)?) } else { None };
    let started = std::time::Instant::now();
    let mut history = Vec::with_capacity(spec.steps as usize);
    let mut checks = 0;
    let trainable: Vec<_> = pair
        .student
        .store
        .iter()
        .filter(|(name, _)| !name.starts_with("encoder/"))
        .map(|(name, v)| (name.to_string(), v.clone()))
        .collect();
    for step in 1..=spec.steps {
        let batch = match &pool {
            Some(p) => pool_batch(p, spec.batch_size, &mut rng)?,
            None => draw_teacher_batch(pair, images, spec.batch_size, &mut rng)?,
        };
        let student_input = batch.epsilon.detach();
        if noise_digests(&student_input)? != batch.digests {
            return Err(Error::InvalidArgument(format!("teacher and student noise diverged at step {step}")));
        }
        checks += 1;
        let out = pair.student.decoder.forward(&student_input, &[1.0], &batch.z)?;
        let repa = if weights.repa > 0.0 {
            Some(repa_loss(&out.hidden_tokens, &reference_features(extractor, &batch.x)?, &pair.student.head)?)
        } else {
            None
        };
        let inputs = DistillInputs { student_velocity: &out.velocity, x_ref: &batch.x_ref, x: &batch.x, epsilon: &student_input };
        let (total, breakdown) = distill_losses(&inputs, extractor, weights, spec.lpips_target, repa)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("{breakdown:?}") });
        }
        optimizer.step(&trainable, &total.backward()?)?;
        let row = LogRow { step, losses: breakdown, wallclock: started.elapsed().as_secs_f64() };
        on_step(&row);
        history.push(row);
    }
    pair.check_teacher()?;
    let after = held_out_mse(&pair.student, &held)?;
    Ok(DistillReport {
        steps: spec.steps,
        heldout_mse_before: before,
        heldout_mse_after: after,
        teacher_hash: pair.teacher_hash.clone(),
        student_hash: pair.student.hash()?,
        noise_sync_checks: checks,
        history,
    })
}
