use std::hint::black_box;

use caracal_core::bench::{BenchConfig, MixerKind};
use caracal_core::mix::{mix_channels, MixOptions, MixPath};
use caracal_core::model::INIT_STD;
use caracal_core::{mhf_forward, swa_forward, MhfOptions, MhfParams, Rng, SwaParams, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

const D: usize = 256;
const HEADS: usize = 4;

fn input(l: usize, rng: &mut Rng) -> Tensor<f32> {
    Tensor::new(vec![1, l, D], rng.normal_vec(l * D, 1.0)).unwrap()
}

/// Single mixer layer forward, one group per mixer kind.
fn layers(c: &mut Criterion) {
    let window = BenchConfig::default().window;
    for kind in MixerKind::ALL {
        let mut group = c.benchmark_group(format!("layer/{kind}"));
        group.sample_size(10);
        let lens: &[usize] = match kind {
            MixerKind::DirectConvOracle | MixerKind::FullAttention => &[256, 512, 1024, 2048],
            _ => &[256, 512, 1024, 2048, 4096],
        };
        for &l in lens {
            let mut rng = Rng::new(l as u64);
            let x = input(l, &mut rng);
            group.throughput(Throughput::Elements(l as u64));
            match kind {
                MixerKind::Mhf | MixerKind::DirectConvOracle => {
                    let p = MhfParams::init(D, HEADS, &mut rng, INIT_STD, INIT_STD).unwrap();
                    let path = if kind == MixerKind::Mhf { MixPath::Fft } else { MixPath::Direct };
                    let opts = MhfOptions { mix: MixOptions::with_path(path), ..Default::default() };
                    group.bench_function(BenchmarkId::from_parameter(l), |b| b.iter(|| mhf_forward(black_box(&x), &p, opts).unwrap()));
                }
                MixerKind::Swa | MixerKind::FullAttention => {
                    let w = if kind == MixerKind::Swa { window } else { l };
                    let p = SwaParams::init(D, HEADS, w, &mut rng, INIT_STD, INIT_STD).unwrap();
                    group.bench_function(BenchmarkId::from_parameter(l), |b| b.iter(|| swa_forward(black_box(&x), &p).unwrap()));
                }
            }
        }
        group.finish();
    }
}

/// The mixing step alone: batched plan, per-channel plans, direct sum.
fn mixing(c: &mut Criterion) {
    let mut group = c.benchmark_group("mix_channels");
    group.sample_size(10);
    for l in [256usize, 1024, 4096] {
        let mut rng = Rng::new(7);
        let (v, g) = (input(l, &mut rng), input(l, &mut rng));
        group.throughput(Throughput::Elements(l as u64));
        for path in [MixPath::Fft, MixPath::FftPerChannel, MixPath::Direct] {
            if path == MixPath::Direct && l > 1024 {
                continue;
            }
            let opts = MixOptions::with_path(path);
            group.bench_with_input(BenchmarkId::new(format!("{path:?}"), l), &l, |b, _| {
                b.iter(|| mix_channels(black_box(&v), black_box(&g), opts, false).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, layers, mixing);
criterion_main!(benches);
