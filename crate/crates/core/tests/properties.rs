use caracal_core::attention::attention_core;
use caracal_core::checkpoint::{decode, encode, AnyModel};
use caracal_core::mhf::mhf_graph;
use caracal_core::spectral::{
    causal_mix_fft, direct_causal_conv, direct_causal_corr, irfft, matvec, rfft, toeplitz_materialize,
};
use caracal_core::tensor::{layer_norm, linear, softmax};
use caracal_core::train::lr_at;
use caracal_core::verify::max_rel_diff;
use caracal_core::{
    build_model, mhf_forward, Graph, MhfOptions, MhfParams, MixOptions, MixPath, ModelConfig, Rng, Tensor,
    TrainConfig,
};
use proptest::prelude::*;

fn randn(dims: Vec<usize>, seed: u64, std: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, Rng::new(seed).normal_vec(n, std)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn direct_opts() -> MhfOptions {
    MhfOptions {
        mix: MixOptions::with_path(MixPath::Direct),
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..40, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let p = softmax(&randn(vec![rows, cols], seed, scale)).unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, d in 2usize..64, seed in any::<u64>()) {
        let x = randn(vec![rows, d], seed, 3.0);
        let y = layer_norm(&x, &Tensor::full(vec![d], 1.0), &Tensor::zeros(vec![d]), 1e-12).unwrap();
        for row in y.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_matches_naive_product(m in 1usize..7, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let x = randn(vec![m, k], seed, 1.0);
        let w = randn(vec![k, n], seed ^ 1, 1.0);
        let b = randn(vec![n], seed ^ 2, 1.0);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| x.data()[i * k + p] * w.data()[p * n + j]).sum::<f64>() + b.data()[j];
                prop_assert!((y.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_round_trips(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let x = randn(vec![a, b, c], seed, 1.0);
        let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn real_transform_round_trips(len in 1usize..300, seed in any::<u64>()) {
        let x: Vec<f64> = Rng::new(seed).normal_vec(len, 1.0);
        let back = irfft(&rfft(&x, len).unwrap(), len).unwrap();
        prop_assert!(max_rel_diff(&back, &x) < 1e-12);
    }

    #[test]
    fn fft_mix_matches_direct(len in 1usize..300, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let v: Vec<f64> = rng.normal_vec(len, 1.0);
        let g: Vec<f64> = rng.normal_vec(len, 1.0);
        let err = max_rel_diff(&causal_mix_fft(&v, &g).unwrap(), &direct_causal_conv(&v, &g).unwrap());
        prop_assert!(err < 1e-9, "L={} err={}", len, err);
    }

    #[test]
    fn causal_mix_is_bilinear(len in 1usize..40, seed in any::<u64>(), a in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let (v, w, g): (Vec<f64>, Vec<f64>, Vec<f64>) = (rng.normal_vec(len, 1.0), rng.normal_vec(len, 1.0), rng.normal_vec(len, 1.0));
        let combo: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + y).collect();
        let lhs = causal_mix_fft(&combo, &g).unwrap();
        let rv = causal_mix_fft(&v, &g).unwrap();
        let rw = causal_mix_fft(&w, &g).unwrap();
        let rhs: Vec<f64> = rv.iter().zip(&rw).map(|(x, y)| a * x + y).collect();
        prop_assert!(max_rel_diff(&lhs, &rhs) < 1e-9);
    }

    #[test]
    fn correlation_is_the_adjoint(len in 1usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (v, g, r): (Vec<f64>, Vec<f64>, Vec<f64>) = (rng.normal_vec(len, 1.0), rng.normal_vec(len, 1.0), rng.normal_vec(len, 1.0));
        let lhs = dot(&direct_causal_conv(&v, &g).unwrap(), &r);
        let rhs = dot(&v, &direct_causal_corr(&r, &g).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn toeplitz_matvec_is_bitwise_direct(len in 1usize..=8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let v: Vec<f64> = rng.normal_vec(len, 1.0);
        let g: Vec<f64> = rng.normal_vec(len, 1.0);
        let dense = matvec(&toeplitz_materialize(&g), &v).unwrap();
        prop_assert_eq!(dense, direct_causal_conv(&v, &g).unwrap());
    }

    #[test]
    fn lr_schedule_shape(total in 30usize..3000, step_frac in 0.0f64..1.0) {
        let cfg = TrainConfig { total_steps: total, ..TrainConfig::default() };
        let s = ((total - 1) as f64 * step_frac) as usize;
        let (w, lr, next) = (cfg.warmup_steps(), lr_at(s, &cfg), lr_at(s + 1, &cfg));
        prop_assert!(lr > 0.0 && lr <= cfg.lr_peak * (1.0 + 1e-12));
        if s + 1 < w {
            prop_assert!(next > lr);
        } else if s >= w {
            prop_assert!(next <= lr);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    /// 50 random layer configurations, FFT path against direct summation.
    #[test]
    fn mhf_fft_path_matches_direct(
        heads in 1usize..4,
        d_head in 1usize..5,
        batch in 1usize..3,
        len in prop::sample::select(vec![1usize, 2, 3, 5, 8, 33]),
        std in prop::sample::select(vec![0.02f64, 0.5]),
        seed in any::<u64>(),
    ) {
        let d = heads * d_head;
        let mut rng = Rng::new(seed);
        let p = MhfParams::<Tensor<f64>>::init(d, heads, &mut rng, std, std).unwrap();
        let x = Tensor::new(vec![batch, len, d], rng.normal_vec(batch * len * d, 1.0)).unwrap();
        let a = mhf_forward(&x, &p, MhfOptions::default()).unwrap();
        let b = mhf_forward(&x, &p, direct_opts()).unwrap();
        prop_assert!(max_rel_diff(a.data(), b.data()) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mhf_layer_is_causal(len in 2usize..20, pos_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let (d, heads) = (6, 2);
        let mut rng = Rng::new(seed);
        let p = MhfParams::<Tensor<f64>>::init(d, heads, &mut rng, 0.5, 0.5).unwrap();
        let x = Tensor::new(vec![1, len, d], rng.normal_vec(len * d, 1.0)).unwrap();
        let pos = ((len - 1) as f64 * pos_frac) as usize;
        let mut xp = x.clone();
        xp.data_mut()[pos * d] += 1.0;
        let a = mhf_forward(&x, &p, MhfOptions::default()).unwrap();
        let b = mhf_forward(&xp, &p, MhfOptions::default()).unwrap();
        prop_assert!(max_rel_diff(&a.data()[..pos * d], &b.data()[..pos * d]) < 1e-12);
    }

    #[test]
    fn attention_respects_window(len in 2usize..40, window in 1usize..10, pos_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let (dm, heads) = (4, 2);
        let qkv = randn(vec![1, len, 3 * dm], seed, 1.0);
        let pos = ((len - 1) as f64 * pos_frac) as usize;
        let mut bumped = qkv.clone();
        for v in &mut bumped.data_mut()[pos * 3 * dm..(pos + 1) * 3 * dm] {
            *v += 0.7;
        }
        let (a, _) = attention_core(&qkv, heads, window, false).unwrap();
        let (b, _) = attention_core(&bumped, heads, window, false).unwrap();
        for t in 0..len {
            let same = a.data()[t * dm..(t + 1) * dm] == b.data()[t * dm..(t + 1) * dm];
            if t < pos || t >= pos + window {
                prop_assert!(same, "t={} pos={} window={}", t, pos, window);
            }
        }
    }

    #[test]
    fn attention_scales_with_values(len in 1usize..20, c in 0.1f64..10.0, seed in any::<u64>()) {
        let (dm, heads) = (4, 2);
        let qkv = randn(vec![1, len, 3 * dm], seed, 1.0);
        let mut scaled = qkv.clone();
        let d = dm / heads;
        for t in 0..len {
            for h in 0..heads {
                let off = t * 3 * dm + h * 3 * d + 2 * d;
                for v in &mut scaled.data_mut()[off..off + d] {
                    *v *= c;
                }
            }
        }
        let (a, _) = attention_core(&qkv, heads, 5, false).unwrap();
        let (b, _) = attention_core(&scaled, heads, 5, false).unwrap();
        prop_assert!(max_rel_diff(b.data(), &a.scale(c).into_data()) < 1e-12);
    }

    #[test]
    fn fft_and_direct_gradients_agree(len in 1usize..12, heads in 1usize..3, seed in any::<u64>()) {
        let d = 2 * heads;
        let mut rng = Rng::new(seed);
        let p = MhfParams::<Tensor<f64>>::init(d, heads, &mut rng, 0.5, 0.5).unwrap();
        let x = Tensor::new(vec![2, len, d], rng.normal_vec(2 * len * d, 1.0)).unwrap();
        let weights = Tensor::new(vec![2, len, d], rng.normal_vec(2 * len * d, 1.0)).unwrap();
        let grads = |opts: MhfOptions| {
            let mut g = Graph::new();
            let xi = g.param(x.clone());
            let bound = p.map(&mut |t| g.param(t.clone()));
            let y = mhf_graph(&mut g, xi, &bound, opts).unwrap();
            let w = g.constant(weights.clone());
            let yw = g.mul(y, w).unwrap();
            let loss = g.sum(yw);
            let mut gr = g.backward(loss).unwrap();
            let mut all = gr.take(xi).into_data();
            for (_, _, id) in bound.slots() {
                all.extend(gr.take(*id).into_data());
            }
            all
        };
        let fast = grads(MhfOptions::default());
        let slow = grads(direct_opts());
        prop_assert!(max_rel_diff(&fast, &slow) < 1e-8);
    }

    #[test]
    fn checkpoints_round_trip(heads in 1usize..3, d_head in 1usize..5, layers in 1usize..4, seed in any::<u64>()) {
        let cfg = ModelConfig::with_dims(heads * d_head, layers, heads);
        let m = build_model::<f64>(&cfg, seed).unwrap();
        match decode(&encode(&m).unwrap()).unwrap() {
            AnyModel::F64(back) => prop_assert_eq!(back, m),
            AnyModel::F32(_) => prop_assert!(false, "precision changed"),
        }
    }
}

/// Materialized Jacobian of an MHF layer: `d out_t / d in_s` vanishes for
/// `s > t`. Exactly zero on the direct path; FFT round-off only on the FFT
/// path.
#[test]
fn mhf_jacobian_is_lower_triangular() {
    for len in 1..=6 {
        let (d, heads) = (4, 2);
        let mut rng = Rng::new(len as u64);
        let p = MhfParams::<Tensor<f64>>::init(d, heads, &mut rng, 0.5, 0.5).unwrap();
        let x = Tensor::new(vec![1, len, d], rng.normal_vec(len * d, 1.0)).unwrap();
        for (opts, tol) in [(direct_opts(), 0.0), (MhfOptions::default(), 1e-12)] {
            for t in 0..len {
                for c in 0..d {
                    let mut g = Graph::new();
                    let xi = g.param(x.clone());
                    let bound = p.map(&mut |t| g.constant(t.clone()));
                    let y = mhf_graph(&mut g, xi, &bound, opts).unwrap();
                    let mut mask = Tensor::zeros(vec![1, len, d]);
                    mask.data_mut()[t * d + c] = 1.0;
                    let m = g.constant(mask);
                    let picked = g.mul(y, m).unwrap();
                    let loss = g.sum(picked);
                    let row = g.backward(loss).unwrap().take(xi);
                    let future = &row.data()[(t + 1) * d..];
                    assert!(future.iter().all(|v| v.abs() <= tol), "L={len} t={t} c={c}: {future:?}");
                }
            }
        }
    }
}
