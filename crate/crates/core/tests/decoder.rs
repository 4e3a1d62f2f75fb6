mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use diffdec_core::config::{EncoderSpec, ModelSize, ModelSizeSpec};
use diffdec_core::decoder::{window_mask, Decoder, REPA_TAP};
use diffdec_core::params::ParamStore;
use diffdec_core::rng::{normal_tensor, stream};

fn tiny() -> ModelSizeSpec {
    ModelSizeSpec { name: ModelSize::S, base_channels: 8, depth_multipliers: [1, 2, 2, 2], num_transformer_blocks: 4 }
}

/// Replace every parameter with small random values so no path is zero at init.
fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    let mut rng = stream(seed);
    for (_, v) in store.iter() {
        let r = (normal_tensor(&mut rng, v.dims(), v.dtype()).unwrap() * scale).unwrap();
        v.set(&r).unwrap();
    }
}

fn inputs(b: usize, res: usize, c: usize, dtype: DType, seed: u64) -> (Tensor, Tensor) {
    let mut rng = stream(seed);
    let x = normal_tensor(&mut rng, (b, 3, res, res), dtype).unwrap();
    let z = normal_tensor(&mut rng, (b, c, res / 8, res / 8), dtype).unwrap();
    (x, z)
}

#[test]
fn preset_shapes_and_widths() {
    for size in [ModelSize::S, ModelSize::M] {
        for res in [32, 64] {
            let spec = size.spec();
            let mut store = ParamStore::new(DType::F32, 0);
            let dec = Decoder::new(&mut store, &spec, EncoderSpec::F8C4, res).unwrap();
            assert_eq!(dec.token_grid(), (res / 8, res / 8));
            assert_eq!(dec.num_transformer_blocks(), spec.num_transformer_blocks);
            let base = spec.base_channels;
            assert_eq!(dec.level_widths(), [base, 2 * base, 3 * base, 3 * base]);
            let (x, z) = inputs(1, res, 4, DType::F32, 1);
            let out = dec.forward(&x, &[0.3], &z).unwrap();
            assert_eq!(out.velocity.dims(), x.dims());
            assert_eq!(out.hidden_tokens.dims(), &[1, (res / 8) * (res / 8), dec.token_width()]);
            assert_eq!(max_abs_diff(&out.velocity, &out.velocity.zeros_like().unwrap()), 0.0);
        }
    }
    let mut store = ParamStore::new(DType::F32, 0);
    assert!(Decoder::new(&mut store, &ModelSize::S.spec(), EncoderSpec::F8C4, 20).is_err());
}

#[test]
fn attention_outside_window_is_exactly_zero() {
    let mut store = ParamStore::new(DType::F64, 3);
    let dec = Decoder::new(&mut store, &tiny(), EncoderSpec::F8C4, 32).unwrap();
    randomize(&store, 4, 0.5);
    let attn = dec.attention(0).unwrap();
    let mut rng = stream(5);
    for (gh, gw) in [(12, 12), (20, 3), (4, 4)] {
        let mask = window_mask(gh, gw, 8);
        let tokens = normal_tensor(&mut rng, (2, gh * gw, dec.token_width()), DType::F64).unwrap();
        let (w, _) = attn.attention_weights(&tokens, &mask).unwrap();
        let w: Vec<Vec<Vec<Vec<f64>>>> = (0..2).map(|b| w.get(b).unwrap().to_vec3().unwrap()).collect();
        let n = gh * gw;
        for b in &w {
            for head in b {
                for p in 0..n {
                    for q in 0..n {
                        if !mask.allows(p, q) {
                            assert_eq!(head[p][q], 0.0);
                        } else {
                            assert!(head[p][q] > 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn batch_permutation_equivariance_and_conditioning() {
    let mut store = ParamStore::new(DType::F64, 6);
    let dec = Decoder::new(&mut store, &tiny(), EncoderSpec::F8C4, 32).unwrap();
    randomize(&store, 7, 0.3);
    let (x, z) = inputs(3, 32, 4, DType::F64, 8);
    let t = [0.2, 0.5, 0.9];
    let out = dec.forward(&x, &t, &z).unwrap().velocity;
    let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
    let out_p = dec
        .forward(&x.index_select(&perm, 0).unwrap(), &[0.9, 0.2, 0.5], &z.index_select(&perm, 0).unwrap())
        .unwrap()
        .velocity;
    assert!(max_abs_diff(&out.index_select(&perm, 0).unwrap(), &out_p) < 1e-12);

    let mut rng = stream(9);
    for _ in 0..3 {
        let dz = (normal_tensor(&mut rng, z.dims(), DType::F64).unwrap() * 0.1).unwrap();
        let moved = dec.forward(&x, &t, &(&z + dz).unwrap()).unwrap().velocity;
        assert!(max_abs_diff(&moved, &out) > 0.0);
    }
}

#[test]
fn finite_difference_gradients() {
    let mut store = ParamStore::new(DType::F64, 10);
    let dec = Decoder::new(&mut store, &tiny(), EncoderSpec::F8C4, 16).unwrap();
    randomize(&store, 11, 0.2);
    let (x, z) = inputs(2, 16, 4, DType::F64, 12);
    let probe = normal_tensor(&mut stream(13), x.dims(), DType::F64).unwrap();
    let t = [0.3, 0.7];
    let loss = |d: &Decoder| -> Tensor {
        let out = d.forward(&x, &t, &z).unwrap();
        let tok = out.hidden_tokens.sqr().unwrap().mean_all().unwrap();
        ((out.velocity * &probe).unwrap().sum_all().unwrap() + tok).unwrap()
    };
    let grads = loss(&dec).backward().unwrap();
    let families = [
        "decoder/conv_in/weight",
        "decoder/time/fc1/weight",
        "decoder/latent/fc1/weight",
        "decoder/down0/block0/conv1/weight",
        "decoder/down0/block0/norm1/proj/weight",
        "decoder/down1/block0/skip/weight",
        "decoder/down0/downsample/weight",
        &format!("decoder/transformer/block{}/attn/qkv/weight", REPA_TAP - 1),
        "decoder/transformer/block0/attn/rel_bias",
        "decoder/transformer/block0/mlp_in/weight",
        "decoder/up1/upsample/weight",
        "decoder/conv_out/weight",
    ];
    let h = 1e-5;
    for name in families {
        let var = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let i = g.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            loss(&dec).to_scalar::<f64>().unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        var.set(&Tensor::from_vec(base, var.dims(), &Device::Cpu).unwrap()).unwrap();
        let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
        assert!(rel < 1e-3, "{name}: autograd {} vs finite difference {fd}", g[i]);
    }
}

#[test]
fn parameter_count_scales_with_presets() {
    let count = |size: ModelSize| {
        let mut store = ParamStore::new(DType::F32, 0);
        Decoder::new(&mut store, &size.spec(), EncoderSpec::F8C4, 32).unwrap();
        store.param_count("decoder/")
    };
    let (s, m) = (count(ModelSize::S), count(ModelSize::M));
    assert!(m > 3 * s && m < 5 * s, "S {s} M {m}");
}
