use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cmpese::attention::AttentionUnit;
use cmpese::tensor::kernels::{conv2d_forward, gemm_nn, ConvGeometry};
use cmpese::{param_count, AttentionConfig, AttentionMode, Graph, NetworkSpec, ParamStore};
use cmpese_bench::{random_tensor, rng, synthetic_batch, tiny_wrn};

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64usize, 128, 256] {
        let a = random_tensor(&[n, n], 1).into_data();
        let b = random_tensor(&[n, n], 2).into_data();
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.iter_mut().for_each(|v| *v = 0.0);
                gemm_nn(n, n, n, black_box(&a), black_box(&b), &mut out);
            })
        });
    }
    group.finish();
}

fn conv3x3(c: &mut Criterion) {
    let geometry = ConvGeometry::new(&[8, 16, 16, 32], &[3, 3, 32, 32], 1, 1).unwrap();
    let x = random_tensor(&[8, 16, 16, 32], 3).into_data();
    let k = random_tensor(&[3, 3, 32, 32], 4).into_data();
    c.bench_function("conv3x3 8x16x16x32", |b| {
        b.iter(|| conv2d_forward(&geometry, black_box(&x), &k))
    });
}

fn attention_units(c: &mut Criterion) {
    let mut group = c.benchmark_group("excitation C=64");
    let x = random_tensor(&[16, 8, 8, 64], 5);
    let u = random_tensor(&[16, 8, 8, 64], 6);
    for mode in AttentionMode::ALL
        .into_iter()
        .filter(|m| *m != AttentionMode::None)
    {
        let mut store = ParamStore::<f32>::new();
        let shape = AttentionConfig::new(mode).resolve(64).unwrap();
        let unit = AttentionUnit::new(&mut store, "attn", shape, &mut rng(7));
        group.bench_function(mode.name(), |b| {
            b.iter(|| {
                let mut g = Graph::new(&mut store, false);
                let (xv, uv) = (g.input(x.clone()), g.input(u.clone()));
                black_box(unit.apply(&mut g, xv, uv).unwrap());
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("WRN-10-1 forward+backward, batch 16");
    group.sample_size(10);
    let (x, labels) = synthetic_batch(16, 16);
    let targets: Vec<(usize, usize)> = labels.iter().map(|&y| (y, y)).collect();
    for mode in [
        AttentionMode::None,
        AttentionMode::Se,
        AttentionMode::Folded3x3,
    ] {
        let mut net = tiny_wrn(mode, 16);
        group.bench_function(mode.name(), |b| {
            b.iter(|| {
                let (arch, store) = net.parts_mut();
                let mut g = Graph::new(store, true);
                let input = g.input(x.clone());
                let logits = arch.forward(&mut g, input).unwrap();
                let loss = g.tape.cross_entropy(logits, &targets, 1.0).unwrap();
                g.backward(loss).unwrap();
            })
        });
    }
    group.finish();
}

fn counting(c: &mut Criterion) {
    let spec = NetworkSpec::wrn(28, 10, AttentionMode::Folded3x3);
    c.bench_function("param_count WRN-28-10", |b| {
        b.iter(|| param_count(black_box(&spec)).unwrap())
    });
}

criterion_group!(
    benches,
    gemm,
    conv3x3,
    attention_units,
    train_step,
    counting
);
criterion_main!(benches);
