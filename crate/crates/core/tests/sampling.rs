mod common;

use common::*;
use diffdec_core::rng::stream;
use diffdec_core::sampler::{euler_step, make_schedule, sample, single_step, AnalyticField};

#[test]
fn schedule_matches_rational_formula() {
    let s = make_schedule(8, 2.0).unwrap();
    let expect = [1.0, 0.765625, 0.5625, 0.390625, 0.25, 0.140625, 0.0625, 0.015625];
    for (a, b) in s.timesteps.iter().zip(expect) {
        assert!((a - b).abs() <= 1e-15);
    }
    for n in 1..=16 {
        for rho in [1.0, 1.5, 2.0, 3.0, 4.0] {
            let s = make_schedule(n, rho).unwrap();
            assert_eq!(s.timesteps[0], 1.0);
            for (a, b) in s.timesteps.iter().zip(schedule_oracle(n, rho)) {
                assert!((a - b).abs() <= 1e-15);
            }
            let pairs = s.pairs();
            assert!(pairs.iter().all(|(t, u)| u < t));
            assert_eq!(pairs.last().unwrap().1, 0.0);
        }
    }
    assert!(make_schedule(0, 2.0).is_err());
}

#[test]
fn analytic_field_is_reconstructed_exactly() {
    let mut rng = stream(21);
    let x = f64_tensor(normal_vec(&mut rng, 2 * 3 * 8 * 8), &[2, 3, 8, 8]);
    let eps = f64_tensor(normal_vec(&mut rng, 2 * 3 * 8 * 8), &[2, 3, 8, 8]);
    let z = f64_tensor(vec![0.0; 2 * 4], &[2, 4, 1, 1]);
    let field = AnalyticField { target: x.clone(), epsilon: eps.clone() };
    for n in [1, 2, 4, 8] {
        for rho in [1.0, 2.0, 4.0] {
            let out = sample(&field, &eps, &z, &make_schedule(n, rho).unwrap()).unwrap();
            assert!(max_abs_diff(&out, &x) <= 1e-6);
        }
    }
    let one = sample(&field, &eps, &z, &make_schedule(1, 2.0).unwrap()).unwrap();
    assert_eq!(max_abs_diff(&one, &single_step(&field, &eps, &z).unwrap()), 0.0);
}

#[test]
fn euler_properties() {
    let mut rng = stream(22);
    let x = f64_tensor(normal_vec(&mut rng, 12), &[1, 3, 2, 2]);
    let nu = f64_tensor(normal_vec(&mut rng, 12), &[1, 3, 2, 2]);
    let full = euler_step(&x, 0.8, 0.2, &nu).unwrap();
    let half = euler_step(&euler_step(&x, 0.8, 0.5, &nu).unwrap(), 0.5, 0.2, &nu).unwrap();
    assert!(max_abs_diff(&full, &half) < 1e-15);
    let zero = nu.zeros_like().unwrap();
    assert_eq!(max_abs_diff(&euler_step(&x, 0.8, 0.2, &zero).unwrap(), &x), 0.0);
    assert!(euler_step(&x, 0.2, 0.8, &nu).is_err());
    assert!(euler_step(&x, 0.5, 0.5, &nu).is_err());
}
