//! Self-check suites run by `caracal verify`.
//!
//! Each suite compares a fast path against a brute-force oracle or checks a
//! structural property, and reports the worst error it saw. With
//! `fault_inject` set, every mixing call is routed through the unpadded
//! circular transform so the causality-sensitive suites must fail.

use std::fmt::Write as _;
use std::time::Instant;

use crate::autograd::{grad_check, GradCheckOptions, GradCheckReport, Graph, NodeId};
use crate::error::Result;
use crate::mhf::{mhf_forward, MhfOptions, MhfParams};
use crate::mix::{mix_channels, MixOptions, MixPath};
use crate::model::{build_model, loss_graph, ForwardOptions, ModelConfig};
use crate::real::{Precision, Real};
use crate::rng::Rng;
use crate::spectral::{self, Cplx, Direction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub precision: Precision,
    pub seed: u64,
    pub fault_inject: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            seed: 0,
            fault_inject: false,
        }
    }
}

impl VerifyOptions {
    fn mix(&self, normal: MixPath) -> MixOptions {
        MixOptions::with_path(if self.fault_inject { MixPath::Circular } else { normal })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest error observed, in the suite's own metric.
    pub worst: f64,
    pub tol: f64,
    /// First failing case with its inputs.
    pub failure: Option<String>,
    pub elapsed_ms: f64,
}

/// Running record for one suite.
struct Tally {
    cases: usize,
    worst: f64,
    tol: f64,
    failure: Option<String>,
}

impl Tally {
    fn new(tol: f64) -> Self {
        Self {
            cases: 0,
            worst: 0.0,
            tol,
            failure: None,
        }
    }

    /// Record an error that must stay at or below the tolerance.
    fn check(&mut self, err: f64, case: impl FnOnce() -> String) {
        self.cases += 1;
        if !(err <= self.worst) {
            self.worst = err;
        }
        if !(err <= self.tol) && self.failure.is_none() {
            self.failure = Some(format!("{} (error {err:.3e})", case()));
        }
    }

    /// Record a boolean property.
    fn require(&mut self, ok: bool, case: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok && self.failure.is_none() {
            self.failure = Some(case());
        }
    }
}

/// `max|a - b| / max|b|`, with an absolute fallback when the reference is 0.
pub fn max_rel_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()));
    if a.len() != b.len() {
        f64::INFINITY
    } else if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn oracle_tol<T: Real>() -> f64 {
    match T::PRECISION {
        Precision::F64 => 1e-9,
        Precision::F32 => 1e-4,
    }
}

fn fft_vs_naive<T: Real>(opts: &VerifyOptions) -> Result<Tally> {
    let mut t = Tally::new(oracle_tol::<T>());
    let mut rng = Rng::derive(opts.seed, 1);
    for n in (0..=9).map(|k| 1usize << k) {
        let x: Vec<Cplx<T>> = (0..n).map(|_| Cplx::new(T::of(rng.normal()), T::of(rng.normal()))).collect();
        let fast = spectral::fft_complex(&x, Direction::Forward)?;
        let slow = spectral::naive_dft(&x);
        let flat = |v: &[Cplx<T>]| v.iter().flat_map(|c| [c.re, c.im]).collect::<Vec<T>>();
        t.check(max_rel_diff(&flat(&fast), &flat(&slow)), || format!("complex fft n={n}"));

        let r: Vec<T> = rng.normal_vec(n, 1.0);
        let spec = spectral::rfft(&r, n.max(2))?;
        let naive = spectral::naive_dft_real(&spectral::irfft(&spec, spec.nfft)?);
        let half = &naive[..spec.bins.len()];
        t.check(max_rel_diff(&flat(&spec.bins), &flat(half)), || format!("rfft n={n}"));
        let back = spectral::irfft(&spec, n)?;
        t.check(max_rel_diff(&back, &r), || format!("rfft/irfft round trip n={n}"));
    }
    Ok(t)
}

fn mix_oracle<T: Real>(opts: &VerifyOptions) -> Result<Tally> {
    let mut t = Tally::new(oracle_tol::<T>());
    let mut rng = Rng::derive(opts.seed, 2);
    let mix = opts.mix(MixPath::Fft);
    for l in (1..=9).chain([16, 64, 257]) {
        for trial in 0..20 {
            let v: Vec<T> = rng.normal_vec(l, 1.0);
            let g: Vec<T> = rng.normal_vec(l, 1.0);
            let vt = Tensor::new(vec![1, l, 1], v.clone())?;
            let gt = Tensor::new(vec![1, l, 1], g.clone())?;
            let (fast, _) = mix_channels(&vt, &gt, mix, false)?;
            let slow = spectral::direct_causal_conv(&v, &g)?;
            t.check(max_rel_diff(fast.data(), &slow), || format!("L={l} trial={trial} v={v:?} g={g:?}"));
        }
    }
    Ok(t)
}

fn layer_oracle<T: Real>(opts: &VerifyOptions) -> Result<Tally> {
    let mut t = Tally::new(oracle_tol::<T>());
    let mut rng = Rng::derive(opts.seed, 3);
    let fast_opts = MhfOptions {
        mix: opts.mix(MixPath::Fft),
        ..Default::default()
    };
    let slow_opts = MhfOptions {
        mix: MixOptions::with_path(MixPath::Direct),
        ..Default::default()
    };
    for case in 0..12 {
        let heads = 1 + rng.below(3);
        let d = heads * (1 + rng.below(4));
        let b = 1 + rng.below(2);
        let l = [1, 2, 3, 5, 8, 33][rng.below(6)];
        let p = MhfParams::<Tensor<T>>::init(d, heads, &mut rng, 0.5, 0.5)?;
        let x = Tensor::new(vec![b, l, d], rng.normal_vec(b * l * d, 1.0))?;
        let fast = mhf_forward(&x, &p, fast_opts)?;
        let slow = mhf_forward(&x, &p, slow_opts)?;
        t.check(max_rel_diff(fast.data(), slow.data()), || {
            format!("case {case}: B={b} L={l} D={d} H={heads}")
        });
    }
    Ok(t)
}

fn causality<T: Real>(opts: &VerifyOptions) -> Result<Tally> {
    let mut t = Tally::new(oracle_tol::<T>());
    let mut rng = Rng::derive(opts.seed, 4);
    let l = 16;
    // Layer level, with weights large enough that any leak is visible.
    let mhf_opts = MhfOptions {
        mix: opts.mix(MixPath::Fft),
        ..Default::default()
    };
    let (d, heads) = (8, 2);
    let p = MhfParams::<Tensor<T>>::init(d, heads, &mut rng, 0.5, 0.5)?;
    let x = Tensor::new(vec![1, l, d], rng.normal_vec(l * d, 1.0))?;
    let base = mhf_forward(&x, &p, mhf_opts)?;
    for pos in 0..l {
        let mut xp = x.clone();
        for v in &mut xp.data_mut()[pos * d..(pos + 1) * d] {
            *v += T::one();
        }
        let y = mhf_forward(&xp, &p, mhf_opts)?;
        let leak = max_rel_diff(&y.data()[..pos * d], &base.data()[..pos * d]);
        t.check(leak, || format!("mhf layer: perturbing token {pos} moved earlier outputs"));
    }
    // Hybrid model (MHF, MHF, SWA), token substitutions.
    let cfg = ModelConfig::micro();
    let fwd = ForwardOptions {
        mix: opts.mix(MixPath::Fft),
    };
    for m in 0..2 {
        let model = build_model::<T>(&cfg, opts.seed.wrapping_add(m))?;
        let ids: Vec<usize> = (0..l).map(|_| rng.below(cfg.vocab_size)).collect();
        let base = model.forward_with(&ids, 1, l, fwd)?;
        let v = cfg.vocab_size;
        for pos in 0..l {
            let mut alt = ids.clone();
            alt[pos] = (alt[pos] + 1 + rng.below(v - 1)) % v;
            let y = model.forward_with(&alt, 1, l, fwd)?;
            let leak = max_rel_diff(&y.data()[..pos * v], &base.data()[..pos * v]);
            t.check(leak, || format!("model seed {}: ids {ids:?}, token {pos} -> {}", opts.seed.wrapping_add(m), alt[pos]));
        }
    }
    Ok(t)
}

fn toeplitz<T: Real>(opts: &VerifyOptions) -> Result<Tally> {
    let mut t = Tally::new(0.0);
    let mut rng = Rng::derive(opts.seed, 5);
    for trial in 0..100 {
        let l = 1 + trial % 8;
        let v: Vec<T> = rng.normal_vec(l, 1.0);
        let g: Vec<T> = rng.normal_vec(l, 1.0);
        let dense = spectral::matvec(&spectral::toeplitz_materialize(&g), &v)?;
        let direct = spectral::direct_causal_conv(&v, &g)?;
        let same = dense.iter().zip(&direct).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
        t.require(same, || format!("Toeplitz matvec differs: v={v:?} g={g:?}"));
    }
    // A delta at lag 1 shifts the content right by one with a leading zero.
    let mix = opts.mix(MixPath::Fft);
    for l in [2, 5, 8, 16] {
        let v: Vec<T> = (0..l).map(|i| T::of(i as f64 + 1.0)).collect();
        let mut g = vec![T::zero(); l];
        g[1] = T::one();
        let (y, _) = mix_channels(&Tensor::new(vec![1, l, 1], v.clone())?, &Tensor::new(vec![1, l, 1], g)?, mix, false)?;
        let mut want = vec![T::zero(); l];
        want[1..].copy_from_slice(&v[..l - 1]);
        let err = max_rel_diff(y.data(), &want);
        t.require(err <= oracle_tol::<T>(), || format!("shift by one failed at L={l}: got {:?}", y.data()));
    }
    Ok(t)
}

fn padding_counterexample<T: Real>(opts: &VerifyOptions) -> Result<Tally> {
    let mut t = Tally::new(oracle_tol::<T>());
    let f = |xs: &[f64]| xs.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    let circ = spectral::circular_conv(&f(&[1., 2.]), &f(&[3., 4.]))?;
    t.check(max_rel_diff(&circ, &f(&[11., 10.])), || format!("circular_conv([1,2],[3,4]) = {circ:?}"));
    let bumped = spectral::circular_conv(&f(&[1., 3.]), &f(&[3., 4.]))?;
    let moved = (bumped[0].as_f64() - circ[0].as_f64()).abs();
    t.require(moved > 1e-3, || format!("unpadded path did not leak: {moved:.3e}"));

    let mix = opts.mix(MixPath::Fft);
    let run = |v: &[f64]| -> Result<Vec<T>> {
        let (y, _) = mix_channels(&Tensor::new(vec![1, 2, 1], f(v))?, &Tensor::new(vec![1, 2, 1], f(&[3., 4.]))?, mix, false)?;
        Ok(y.into_data())
    };
    let padded = run(&[1., 2.])?;
    t.check(max_rel_diff(&padded, &f(&[3., 10.])), || format!("padded mix of [1,2],[3,4] = {padded:?}"));
    let padded_bumped = run(&[1., 3.])?;
    t.check((padded_bumped[0].as_f64() - padded[0].as_f64()).abs(), || {
        "padded mix: perturbing v1 moved output 0".to_string()
    });
    Ok(t)
}

/// Weight scale applied on top of the default init before checking
/// gradients. At std 0.02 many coordinates have gradients near 1e-8, where
/// central differences are dominated by rounding in the loss itself.
pub const GRAD_CHECK_WEIGHT_SCALE: f64 = 3.0;

/// Outcome of [`micro_gradient_check`].
#[derive(Debug, Clone)]
pub struct MicroGradCheck {
    pub report: GradCheckReport,
    /// `max_rel_diff` between FFT-path and direct-path gradients.
    pub path_agreement: f64,
}

/// Finite-difference check of the micro model's cross-entropy (64-bit) on a
/// random `2 × 16` batch, plus FFT-path vs direct-path gradient agreement.
pub fn micro_gradient_check(seed: u64, samples: usize, mix: MixOptions) -> Result<MicroGradCheck> {
    let cfg = ModelConfig::micro();
    let mut model = build_model::<f64>(&cfg, seed)?;
    for (_, kind, p) in model.params.slots_mut() {
        if kind.decays() {
            *p = p.scale(GRAD_CHECK_WEIGHT_SCALE);
        }
    }
    let (b, l) = (2, 16);
    let mut rng = Rng::derive(seed, 7);
    let ids: Vec<usize> = (0..b * l).map(|_| rng.below(cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..b * l).map(|_| rng.below(cfg.vocab_size)).collect();
    let params: Vec<Tensor<f64>> = model.params.slots().into_iter().map(|(_, _, p)| p.clone()).collect();
    let layout = model.params.map(&mut |_| ());
    let loss_with = |mix: MixOptions| {
        let (layout, cfg, ids, targets) = (&layout, &cfg, &ids, &targets);
        move |g: &mut Graph<f64>, leaves: &[NodeId]| {
            let bound = layout.rebuild(leaves.iter().copied())?;
            loss_graph(g, cfg, &bound, ids, targets, b, l, ForwardOptions { mix })
        }
    };
    let check = GradCheckOptions {
        samples,
        tol: 1e-4,
        seed,
        ..Default::default()
    };
    let report = grad_check(&params, loss_with(mix), &check)?;
    let grads = |mix: MixOptions| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = loss_with(mix)(&mut g, &leaves)?;
        let mut gr = g.backward(loss)?;
        Ok(leaves.iter().flat_map(|&id| gr.take(id).into_data()).collect())
    };
    let fast = grads(mix)?;
    let slow = grads(MixOptions::with_path(MixPath::Direct))?;
    Ok(MicroGradCheck {
        report,
        path_agreement: max_rel_diff(&fast, &slow),
    })
}

/// Always 64-bit: finite differences need the headroom.
fn gradient(opts: &VerifyOptions) -> Result<Tally> {
    let mut t = Tally::new(1e-4);
    let res = micro_gradient_check(opts.seed, 200, opts.mix(MixPath::Fft))?;
    t.check(res.report.max_rel_err, || match &res.report.worst {
        Some(w) => format!("finite differences disagree at {w:?}"),
        None => "finite differences disagree".to_string(),
    });
    let agree = res.path_agreement;
    t.require(agree <= 1e-8, || format!("FFT and direct gradients differ by {agree:.3e}"));
    Ok(t)
}

type Suite = (&'static str, fn(&VerifyOptions) -> Result<Tally>);

fn suites<T: Real>() -> [Suite; 7] {
    [
        ("fft_vs_naive_dft", fft_vs_naive::<T>),
        ("causal_mix_vs_direct", mix_oracle::<T>),
        ("mhf_layer_vs_direct", layer_oracle::<T>),
        ("causality", causality::<T>),
        ("toeplitz_and_shift", toeplitz::<T>),
        ("padding_counterexample", padding_counterexample::<T>),
        ("gradient_f64", gradient),
    ]
}

/// Run every suite, reporting each result as it finishes.
pub fn run_suites(opts: &VerifyOptions, mut on_result: impl FnMut(&SuiteResult)) -> Result<Vec<SuiteResult>> {
    let list = match opts.precision {
        Precision::F32 => suites::<f32>(),
        Precision::F64 => suites::<f64>(),
    };
    let mut out = Vec::with_capacity(list.len());
    for (name, suite) in list {
        let t0 = Instant::now();
        let tally = suite(opts)?;
        let res = SuiteResult {
            name,
            passed: tally.failure.is_none(),
            cases: tally.cases,
            worst: tally.worst,
            tol: tally.tol,
            failure: tally.failure,
            elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_result(&res);
        out.push(res);
    }
    Ok(out)
}

impl SuiteResult {
    /// One table row: `PASS  name  cases  worst  tol  time`.
    pub fn row(&self) -> String {
        let mut s = format!(
            "{:<4}  {:<24} {:>5} cases  worst {:>9.2e}  tol {:>7.1e}  {:>8.1} ms",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tol,
            self.elapsed_ms
        );
        if let Some(f) = &self.failure {
            let _ = write!(s, "\n      failing case: {f}");
        }
        s
    }
}
