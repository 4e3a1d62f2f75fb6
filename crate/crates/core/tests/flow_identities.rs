mod common;

use common::*;
use diffdec_core::flow::{interpolate, one_step_prediction, sample_timesteps, shifted_target, velocity_target};
use diffdec_core::rng::stream;

#[test]
fn shifted_target_gradient_identity() {
    let mut rng = stream(11);
    for lambda in [0.0, 0.5, 2.0] {
        for t in [0.1, 0.5, 1.0] {
            for _ in 0..20 {
                let err = shifted_identity_error(&mut rng, lambda, t);
                assert!(err < 1e-6, "λ={lambda} t={t}: relative error {err}");
            }
        }
    }
}

#[test]
fn shifted_target_limits() {
    let mut rng = stream(12);
    let nu = f64_tensor(normal_vec(&mut rng, 8), &[2, 1, 2, 2]);
    let g = f64_tensor(normal_vec(&mut rng, 8), &[2, 1, 2, 2]);
    assert_eq!(max_abs_diff(&shifted_target(&nu, &[0.7], 0.0, &g).unwrap(), &nu), 0.0);
    assert_eq!(max_abs_diff(&shifted_target(&nu, &[0.0], 3.0, &g).unwrap(), &nu), 0.0);
}

#[test]
fn exact_velocity_recovers_clean_image() {
    let mut rng = stream(13);
    for _ in 0..1000 {
        let t = uniform(&mut rng, 1e-3, 1.0);
        let x = f64_tensor(normal_vec(&mut rng, 6), &[1, 3, 1, 2]);
        let e = f64_tensor(normal_vec(&mut rng, 6), &[1, 3, 1, 2]);
        let x_t = interpolate(&x, &e, &[t]).unwrap();
        let nu = velocity_target(&x, &e).unwrap();
        let x0 = one_step_prediction(&x_t, &[t], &nu).unwrap();
        assert!(max_abs_diff(&x0, &x) < 1e-12);
    }
}

#[test]
fn timestep_median_is_half() {
    let mut rng = stream(14);
    let mut t = sample_timesteps(&mut rng, 100_000, 0.0, 1.0).unwrap();
    assert!(t.iter().all(|v| *v > 0.0 && *v < 1.0));
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!((t[50_000] - 0.5).abs() < 0.01);
    assert!(sample_timesteps(&mut rng, 1, 0.0, 0.0).is_err());
}
