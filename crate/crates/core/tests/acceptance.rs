//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Criteria run one after another so the timing-based
//! checks do not compete with each other for the CPU.

use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use caracal_core::bench::{bench_mixer, BenchConfig, MixerKind};
use caracal_core::checkpoint::{self, AnyModel};
use caracal_core::mix::{MixOptions, MixPath};
use caracal_core::model::layout;
use caracal_core::spectral::{causal_mix_fft, circular_conv, direct_causal_conv, matvec, toeplitz_materialize};
use caracal_core::train::{train_loop, Corpus, TrainConfig};
use caracal_core::verify::{max_rel_diff, micro_gradient_check};
use caracal_core::{build_model, mhf_forward, MhfOptions, MhfParams, ModelConfig, Rng, Tensor};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ok_if(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spectral_causal_equivalence() -> Outcome {
    let mut rng = Rng::new(1);
    let mut worst = (0.0f64, 0);
    for l in (1..=9).chain([16, 64, 257, 1000]) {
        for _ in 0..100 {
            let v: Vec<f64> = rng.normal_vec(l, 1.0);
            let g: Vec<f64> = rng.normal_vec(l, 1.0);
            let err = max_rel_diff(&causal_mix_fft(&v, &g).unwrap(), &direct_causal_conv(&v, &g).unwrap());
            if err > worst.0 {
                worst = (err, l);
            }
        }
    }
    ok_if(worst.0 < 1e-9, format!("1300 trials, max rel err {:.2e} (L={}) vs 1e-9", worst.0, worst.1))
}

fn full_layer_oracle() -> Outcome {
    let mut rng = Rng::new(2);
    let fft = MhfOptions::default();
    let direct = MhfOptions {
        mix: MixOptions::with_path(MixPath::Direct),
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let heads = 1 + rng.below(4);
        let d = heads * (1 + rng.below(8));
        let b = 1 + rng.below(2);
        let l = [1, 2, 3, 5, 8, 33, 64, 100][rng.below(8)];
        let std = [0.02, 0.5][rng.below(2)];
        let p = MhfParams::<Tensor<f64>>::init(d, heads, &mut rng, std, std).unwrap();
        let x = Tensor::new(vec![b, l, d], rng.normal_vec(b * l * d, 1.0)).unwrap();
        let a = mhf_forward(&x, &p, fft).unwrap();
        let r = mhf_forward(&x, &p, direct).unwrap();
        worst = worst.max(max_rel_diff(a.data(), r.data()));
    }
    ok_if(worst < 1e-9, format!("50 configs, max rel err {worst:.2e} vs 1e-9"))
}

fn end_to_end_causality() -> Outcome {
    let cfg = ModelConfig::micro();
    let (l, v) = (16, cfg.vocab_size);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let model = build_model::<f64>(&cfg, seed).unwrap();
        let mut rng = Rng::derive(seed, 3);
        let ids: Vec<usize> = (0..l).map(|_| rng.below(v)).collect();
        let base = model.forward(&ids, 1, l).unwrap();
        for t in 0..l {
            let mut alt = ids.clone();
            alt[t] = (alt[t] + 1 + rng.below(v - 1)) % v;
            let y = model.forward(&alt, 1, l).unwrap();
            let before = t * v;
            let leak = y.data()[..before]
                .iter()
                .zip(&base.data()[..before])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(leak);
        }
    }
    let kinds = format!("{:?}", cfg.layer_kinds());
    ok_if(worst <= 1e-9, format!("layers {kinds}, 10 models x 16 positions, max earlier-logit change {worst:.2e} vs 1e-9"))
}

fn padding_counterexample() -> Outcome {
    let circ = circular_conv(&[1.0f64, 2.0], &[3.0, 4.0]).unwrap();
    let bumped = circular_conv(&[1.0f64, 3.0], &[3.0, 4.0]).unwrap();
    let padded = causal_mix_fft(&[1.0f64, 2.0], &[3.0, 4.0]).unwrap();
    let moved = (bumped[0] - circ[0]).abs();
    let padded_err = max_rel_diff(&padded, &[3.0, 10.0]);
    ok_if(
        circ == [11.0, 10.0] && moved > 1e-3 && padded_err < 1e-12,
        format!("circular {circ:?}, v1 bump moves output 0 by {moved}, padded {padded:?}"),
    )
}

fn toeplitz_and_shift() -> Outcome {
    let mut rng = Rng::new(5);
    let mut mismatches = 0;
    for trial in 0..100 {
        let l = 1 + trial % 8;
        let v: Vec<f64> = rng.normal_vec(l, 1.0);
        let g: Vec<f64> = rng.normal_vec(l, 1.0);
        let dense = matvec(&toeplitz_materialize(&g), &v).unwrap();
        let direct = direct_causal_conv(&v, &g).unwrap();
        if dense.iter().zip(&direct).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    let mut shift_exact = true;
    let mut fft_shift_err = 0.0f64;
    for l in 2..=64 {
        let v: Vec<f64> = rng.normal_vec(l, 1.0);
        let mut delta = vec![0.0; l];
        delta[1] = 1.0;
        let mut want = vec![0.0; l];
        want[1..].copy_from_slice(&v[..l - 1]);
        shift_exact &= direct_causal_conv(&v, &delta).unwrap() == want;
        fft_shift_err = fft_shift_err.max(max_rel_diff(&causal_mix_fft(&v, &delta).unwrap(), &want));
    }
    ok_if(
        mismatches == 0 && shift_exact && fft_shift_err < 1e-12,
        format!(
            "{mismatches}/100 Toeplitz mismatches (bitwise), delta-at-1 shift exact: {shift_exact}, FFT-path shift err {fft_shift_err:.1e}"
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let res = micro_gradient_check(0, 400, MixOptions::default()).map_err(|e| e.to_string())?;
    let r = &res.report;
    ok_if(
        r.checked >= 200 && r.max_rel_err < 1e-4 && res.path_agreement < 1e-8,
        format!(
            "{} sampled coordinates, max rel err {:.2e} vs 1e-4; FFT vs direct gradients {:.2e} vs 1e-8",
            r.checked, r.max_rel_err, res.path_agreement
        ),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Median over interleaved rounds of `T(long) / T(short)`, so slow drifts in
/// machine load hit both lengths alike.
fn time_ratio(kind: MixerKind, short: usize, long: usize, cfg: &BenchConfig) -> Result<f64, String> {
    let mut ratios = Vec::new();
    for _ in 0..5 {
        let a = bench_mixer::<f32>(kind, short, cfg).map_err(|e| e.to_string())?;
        let b = bench_mixer::<f32>(kind, long, cfg).map_err(|e| e.to_string())?;
        ratios.push(b.wall_ms / a.wall_ms);
    }
    Ok(median(ratios))
}

fn scaling_shape() -> Outcome {
    let cfg = BenchConfig {
        reps: 3,
        warmup: 1,
        ..BenchConfig::default()
    };
    let mhf_ratio = time_ratio(MixerKind::Mhf, 512, 4096, &cfg)?;
    let full_ratio = time_ratio(MixerKind::FullAttention, 512, 4096, &cfg)?;
    let at = |kind| bench_mixer::<f32>(kind, 8192, &BenchConfig::default()).map(|r| r.wall_ms).map_err(|e| e.to_string());
    let (mhf_long, full_long) = (at(MixerKind::Mhf)?, at(MixerKind::FullAttention)?);
    ok_if(
        mhf_ratio < 16.0 && full_ratio > 32.0 && mhf_long < full_long,
        format!(
            "D=256 H=4: MHF T(4096)/T(512) = {mhf_ratio:.1} (< 16), full attention = {full_ratio:.1} (> 32), \
             at 8192 MHF {mhf_long:.0} ms vs full {full_long:.0} ms"
        ),
    )
}

/// 64 distinct bytes, so every byte determines its successor.
fn pattern() -> Vec<u8> {
    (0u8..64).map(|i| b'0' + i).collect()
}

fn training_sanity() -> Outcome {
    let corpus = Corpus::new(pattern().repeat(64));
    let cfg = TrainConfig::default();
    let mut model = build_model::<f32>(&ModelConfig::micro(), 0).map_err(|e| e.to_string())?;
    let trace = train_loop(&mut model, &corpus, &cfg, |row| {
        if row.loss < 0.1 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .map_err(|e| e.to_string())?;
    let first = trace[0].loss;
    let last = trace.last().unwrap();
    let start_ok = (first - 256f64.ln()).abs() <= 0.2;
    ok_if(
        start_ok && last.loss < 0.1,
        format!(
            "step-0 loss {first:.4} (ln 256 = {:.4}), loss {:.4} at step {} of a {}-step schedule (lr {:.2e})",
            256f64.ln(),
            last.loss,
            last.step,
            cfg.total_steps,
            last.lr
        ),
    )
}

fn position_sensitivity() -> Outcome {
    let cfg = ModelConfig::micro();
    let ids = [72, 101, 108, 112, 33, 10, 77, 90];
    let mut swapped = ids;
    swapped.swap(1, 4);
    let mut diffs = Vec::new();
    for seed in 0..5 {
        let m = build_model::<f64>(&cfg, seed).unwrap();
        let a = m.forward(&ids, 1, ids.len()).unwrap();
        let b = m.forward(&swapped, 1, ids.len()).unwrap();
        let last = (ids.len() - 1) * cfg.vocab_size;
        let d = a.data()[last..]
            .iter()
            .zip(&b.data()[last..])
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        diffs.push(d);
    }
    let summary: Vec<String> = diffs.iter().map(|d| format!("{d:.1e}")).collect();
    ok_if(
        diffs.iter().any(|&d| d > 1e-3),
        format!("swap of positions 1 and 4, last-position logit change per seed [{}] vs 1e-3", summary.join(", ")),
    )
}

fn parameter_accounting() -> Outcome {
    let mut cfg = ModelConfig::tiny();
    cfg.vocab_size = 50257;
    let analytic = cfg.param_count().map_err(|e| e.to_string())?;
    let laid_out: usize = layout(&cfg)
        .map_err(|e| e.to_string())?
        .slots()
        .iter()
        .map(|(_, _, dims)| dims.iter().product::<usize>())
        .sum();
    // Reported size is 63-64M; require 5% against both ends.
    let rel = [63e6, 64e6].map(|r: f64| (analytic as f64 - r).abs() / r);
    let worst = rel[0].max(rel[1]);
    ok_if(
        analytic == laid_out && worst < 0.05,
        format!(
            "tiny, V=50257: {analytic} parameters ({:.1}% from 63M, {:.1}% from 64M), layout agrees: {}",
            rel[0] * 100.0,
            rel[1] * 100.0,
            analytic == laid_out
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ids: Vec<usize> = (0..2 * 24).map(|i| (i * 37 + 11) % 256).collect();
    let m32 = build_model::<f32>(&ModelConfig::micro(), 11).map_err(|e| e.to_string())?;
    let m64 = build_model::<f64>(&ModelConfig::micro(), 12).map_err(|e| e.to_string())?;
    let p32 = dir.path().join("m32.crcl");
    let p64 = dir.path().join("m64.crcl");
    checkpoint::save(&m32, &p32).map_err(|e| e.to_string())?;
    checkpoint::save(&m64, &p64).map_err(|e| e.to_string())?;
    let same32 = match checkpoint::load(&p32).map_err(|e| e.to_string())? {
        AnyModel::F32(m) => {
            let (a, b) = (m32.forward(&ids, 2, 24).unwrap(), m.forward(&ids, 2, 24).unwrap());
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        AnyModel::F64(_) => false,
    };
    let same64 = match checkpoint::load(&p64).map_err(|e| e.to_string())? {
        AnyModel::F64(m) => {
            let (a, b) = (m64.forward(&ids, 2, 24).unwrap(), m.forward(&ids, 2, 24).unwrap());
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        AnyModel::F32(_) => false,
    };
    ok_if(same32 && same64, format!("bit-identical logits on a 2x24 batch: f32 {same32}, f64 {same64}"))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, title: "spectral-causal equivalence", budget: secs(30), run: spectral_causal_equivalence },
        Criterion { id: 2, title: "full-layer oracle equivalence", budget: secs(60), run: full_layer_oracle },
        Criterion { id: 3, title: "end-to-end causality", budget: secs(60), run: end_to_end_causality },
        Criterion { id: 4, title: "padding counterexample", budget: secs(1), run: padding_counterexample },
        Criterion { id: 5, title: "Toeplitz identity and shift", budget: secs(5), run: toeplitz_and_shift },
        Criterion { id: 6, title: "gradient correctness", budget: secs(300), run: gradient_correctness },
        Criterion { id: 7, title: "scaling shape", budget: secs(600), run: scaling_shape },
        Criterion { id: 8, title: "training sanity", budget: secs(300), run: training_sanity },
        Criterion { id: 9, title: "position sensitivity", budget: secs(10), run: position_sensitivity },
        Criterion { id: 10, title: "parameter accounting", budget: secs(1), run: parameter_accounting },
        Criterion { id: 11, title: "checkpoint round trip", budget: secs(10), run: checkpoint_round_trip },
    ];
    let mut passed = 0;
    for c in &criteria {
        let t0 = Instant::now();
        let outcome = (c.run)();
        let took = t0.elapsed();
        let in_time = took <= c.budget;
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        passed += ok as usize;
        println!(
            "criterion {:>2} {} {}: {} [{:.2} s of {} s{}]",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.title,
            detail,
            took.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed == criteria.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
