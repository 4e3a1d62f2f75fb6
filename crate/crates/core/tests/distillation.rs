mod common;

use candle_core::{DType, Tensor};
use common::*;
use diffdec_core::config::{ExperimentConfig, LpipsTarget};
use diffdec_core::data::{image_to_tensor, synthetic_corpus};
use diffdec_core::distill::*;
use diffdec_core::features::ToyExtractor;
use diffdec_core::flow::LossWeights;
use diffdec_core::model::Model;
use diffdec_core::params::ParamStore;
use diffdec_core::rng::{normal_tensor, stream};
use diffdec_core::sampler::{make_schedule, single_step, AnalyticField};

fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    let mut rng = stream(seed);
    for (_, v) in store.iter() {
        v.set(&(normal_tensor(&mut rng, v.dims(), v.dtype()).unwrap() * scale).unwrap()).unwrap();
    }
}

fn images_as(n: usize, dtype: DType) -> Tensor {
    let imgs = synthetic_corpus(n, 32, 3);
    Tensor::stack(&imgs.iter().map(|i| image_to_tensor(i, dtype).unwrap()).collect::<Vec<_>>(), 0).unwrap()
}

fn images(n: usize) -> Tensor {
    images_as(n, DType::F32)
}

fn pair(teacher_steps: usize) -> (DistillPair, ExperimentConfig, ToyExtractor) {
    pair_as(teacher_steps, DType::F32)
}

fn pair_as(teacher_steps: usize, dtype: DType) -> (DistillPair, ExperimentConfig, ToyExtractor) {
    let mut cfg = ExperimentConfig::default();
    cfg.distill.teacher_steps = teacher_steps;
    let ex = ToyExtractor::new(cfg.extractor_seed);
    let teacher = Model::new(&cfg, &ex, dtype, 1).unwrap();
    randomize(&teacher.store, 2, 0.05);
    let p = DistillPair::new(teacher, &cfg, &ex).unwrap();
    (p, cfg, ex)
}

#[test]
fn one_step_teacher_is_an_exact_fixed_point() {
    let (p, _, ex) = pair_as(1, DType::F64);
    let x = images_as(2, DType::F64);
    let z = p.teacher.encode_mean(&x).unwrap();
    let eps = normal_tensor(&mut stream(4), x.dims(), DType::F64).unwrap();
    let x_ref = teacher_reconstruct(&p, &eps, &z).unwrap();
    assert_eq!(max_abs_diff(&x_ref, &single_step(&p.teacher.decoder, &eps, &z).unwrap()), 0.0);

    let out = p.student.decoder.forward(&eps, &[1.0], &z).unwrap();
    let inputs = DistillInputs { student_velocity: &out.velocity, x_ref: &x_ref, x: &x, epsilon: &eps };
    let w = LossWeights { lpips: 0.0, repa: 0.0, kl: 0.0 };
    let (total, breakdown) = distill_losses(&inputs, &ex, w, LpipsTarget::Original, None).unwrap();
    assert!(breakdown.fm <= 1e-20);
    let grads = total.backward().unwrap();
    let mut checked = 0;
    for (name, v) in p.student.store.iter().filter(|(n, _)| n.starts_with("decoder/")) {
        if let Some(g) = grads.get(v.as_tensor()) {
            let m = host(g).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(m <= 1e-10, "{name}: {m}");
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn teacher_reconstruction_is_deterministic_and_exact_for_oracle() {
    let (p, _, _) = pair(3);
    let x = images(2);
    let z = p.teacher.encode_mean(&x).unwrap();
    let eps = normal_tensor(&mut stream(5), x.dims(), DType::F32).unwrap();
    let a = teacher_reconstruct(&p, &eps, &z).unwrap();
    let b = teacher_reconstruct(&p, &eps, &z).unwrap();
    assert_eq!(max_abs_diff(&a, &b), 0.0);

    let x64 = x.to_dtype(DType::F64).unwrap();
    let e64 = eps.to_dtype(DType::F64).unwrap();
    let oracle = AnalyticField { target: x64.clone(), epsilon: e64.clone() };
    let out = teacher_reconstruct_with(&oracle, &make_schedule(7, 2.0).unwrap(), &e64, &z).unwrap();
    assert!(max_abs_diff(&out, &x64) < 1e-12);
}

#[test]
fn distill_fm_term_matches_scalar_loop() {
    let (_, _, ex) = pair(1);
    let mut rng = stream(6);
    let shape = [2, 3, 8, 8];
    let n = 2 * 3 * 64;
    let (v, r, x, e) = (normal_vec(&mut rng, n), normal_vec(&mut rng, n), normal_vec(&mut rng, n), normal_vec(&mut rng, n));
    let mut s = 0.0;
    for i in 0..n {
        s += (v[i] - (r[i] - e[i])).powi(2);
    }
    let (tv, tr, tx, te) = (f64_tensor(v, &shape), f64_tensor(r, &shape), f64_tensor(x, &shape), f64_tensor(e, &shape));
    let inputs = DistillInputs { student_velocity: &tv, x_ref: &tr, x: &tx, epsilon: &te };
    let w = LossWeights { lpips: 0.0, repa: 0.0, kl: 0.0 };
    let (_, b) = distill_losses(&inputs, &ex, w, LpipsTarget::Original, None).unwrap();
    assert!((b.fm - s / n as f64).abs() < 1e-12);
    assert_eq!(b.total, b.fm);

    let exact = (&tr - &te).unwrap();
    let inputs = DistillInputs { student_velocity: &exact, x_ref: &tr, x: &tx, epsilon: &te };
    assert_eq!(distill_losses(&inputs, &ex, w, LpipsTarget::Original, None).unwrap().1.fm, 0.0);
}

#[test]
fn zero_steps_leave_student_equal_to_teacher() {
    let (mut p, mut cfg, ex) = pair(2);
    cfg.distill.steps = 0;
    cfg.distill.heldout_draws = 2;
    let report = distill_run(&mut p, &images(2), &cfg, &ex, |_| {}).unwrap();
    assert_eq!(report.student_hash, report.teacher_hash);
    assert_eq!(report.heldout_mse_before, report.heldout_mse_after);
}

#[test]
fn short_runs_are_deterministic_and_keep_teacher_frozen() {
    let run = |pool: usize| {
        let (mut p, mut cfg, ex) = pair(2);
        cfg.distill.steps = 2;
        cfg.distill.batch_size = 1;
        cfg.distill.heldout_draws = 2;
        cfg.distill.teacher_pool = pool;
        let before = p.teacher.hash().unwrap();
        let r = distill_run(&mut p, &images(2), &cfg, &ex, |_| {}).unwrap();
        assert_eq!(r.teacher_hash, before);
        assert_eq!(p.teacher.hash().unwrap(), before);
        assert_eq!(r.noise_sync_checks, 2);
        assert_ne!(r.student_hash, before);
        r.student_hash
    };
    assert_eq!(run(0), run(0));
    assert_eq!(run(3), run(3));
}

#[test]
fn noise_digests_identify_rows() {
    let eps = normal_tensor(&mut stream(7), (3, 3, 8, 8), DType::F32).unwrap();
    let d = noise_digests(&eps).unwrap();
    assert_eq!(d.len(), 3);
    assert_ne!(d[0], d[1]);
    assert_eq!(noise_digests(&eps.narrow(0, 1, 1).unwrap()).unwrap()[0], d[1]);
}
