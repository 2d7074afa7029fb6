use std::hint::black_box;

use caracal_core::spectral::{causal_mix_fft, direct_causal_conv, fft_complex, rfft, Cplx, Direction};
use caracal_core::Rng;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn transforms(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft");
    for n in [256usize, 1024, 4096, 16384] {
        let mut rng = Rng::new(n as u64);
        let x: Vec<f64> = rng.normal_vec(n, 1.0);
        let z: Vec<Cplx<f64>> = x.iter().map(|&r| Cplx::new(r, 0.0)).collect();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("complex", n), &z, |b, z| b.iter(|| fft_complex(black_box(z), Direction::Forward).unwrap()));
        group.bench_with_input(BenchmarkId::new("real", n), &x, |b, x| b.iter(|| rfft(black_box(x), n).unwrap()));
    }
    group.finish();
}

/// One channel: padded transform against direct summation.
fn causal_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("causal_conv");
    for l in [64usize, 256, 1024, 4096] {
        let mut rng = Rng::new(l as u64);
        let v: Vec<f64> = rng.normal_vec(l, 1.0);
        let g: Vec<f64> = rng.normal_vec(l, 1.0);
        group.throughput(Throughput::Elements(l as u64));
        group.bench_function(BenchmarkId::new("fft", l), |b| b.iter(|| causal_mix_fft(black_box(&v), black_box(&g)).unwrap()));
        group.bench_function(BenchmarkId::new("direct", l), |b| b.iter(|| direct_causal_conv(black_box(&v), black_box(&g)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, transforms, causal_conv);
criterion_main!(benches);
