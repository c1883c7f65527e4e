use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use transpose_core::index::gray_encode;
use transpose_core::kernels::{conv2d_forward, deconv2d_forward, ConvGeom};
use transpose_core::metrics::ssim;
use transpose_core::{Graph, Tensor};

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256, 512] {
        let a = Tensor::new(vec![n, n], ramp(n * n)).unwrap();
        let b = Tensor::new(vec![n, n], ramp(n * n)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::frozen();
                let x = g.input(a.clone());
                let y = g.input(b.clone());
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let geom = ConvGeom::forward(16, 32, 28, 28, 3, 1, 1).unwrap();
    let batch = 16;
    let x = ramp(batch * geom.in_len());
    let f = ramp(geom.filter_len());
    let y = ramp(batch * geom.out_len());
    c.bench_function("conv2d 16x28x28 -> 32, batch 16", |b| {
        b.iter(|| black_box(conv2d_forward(&x, &f, &geom, batch)))
    });
    c.bench_function("deconv2d 32x28x28 -> 16, batch 16", |b| {
        b.iter(|| black_box(deconv2d_forward(&y, &f, &geom, batch)))
    });
}

fn gray(c: &mut Criterion) {
    c.bench_function("gray codes base 3 length 10, first 4096", |b| {
        b.iter(|| {
            for i in 0..4096 {
                black_box(gray_encode(i, 3, 10).unwrap());
            }
        })
    });
}

fn ssim_bench(c: &mut Criterion) {
    let a = ramp(28 * 28);
    let b: Vec<f32> = a.iter().rev().copied().collect();
    c.bench_function("ssim 28x28", |bench| bench.iter(|| black_box(ssim(&a, &b, &[1, 28, 28]).unwrap())));
}

criterion_group!(benches, matmul, conv, gray, ssim_bench);
criterion_main!(benches);
