use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use kanrec_bench::{model, ranking_case, users};
use kanrec_core::metrics::rank_topk;
use kanrec_core::model::ModelKind;
use kanrec_core::spline::SplineGrid;

fn spline(c: &mut Criterion) {
    let mut group = c.benchmark_group("spline");
    let xs: Vec<f64> = (0..1024).map(|i| -1.2 + 2.4 * i as f64 / 1023.0).collect();
    group.throughput(Throughput::Elements(xs.len() as u64));
    for (g, k) in [(2, 3), (5, 3), (5, 1)] {
        let grid = SplineGrid::new(-1.0, 1.0, g, k).unwrap();
        let coeffs: Vec<f64> = (0..grid.basis_count()).map(|i| (i as f64).sin()).collect();
        group.bench_with_input(BenchmarkId::new("eval", format!("G{g}k{k}")), &grid, |b, grid| {
            b.iter(|| xs.iter().map(|x| grid.eval(&coeffs, *x).unwrap()).sum::<f64>())
        });
        group.bench_with_input(BenchmarkId::new("basis_values", format!("G{g}k{k}")), &grid, |b, grid| {
            b.iter(|| xs.iter().map(|x| grid.basis_values(*x).unwrap()[0]).sum::<f64>())
        });
    }
    group.finish();
}

fn autoencoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("autoencoder");
    group.sample_size(20);
    let items = 1000;
    let batch = users(64, items, 0.05, 3);
    for (kind, lambda) in [(ModelKind::Kan, 0.0), (ModelKind::Kan, 0.01), (ModelKind::Mlp, 0.0)] {
        let m = model(kind, items, 64, lambda);
        let id = format!("{kind}-lambda{lambda}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| b.iter(|| m.scores(black_box(batch.view())).unwrap()));
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| m.gradients(black_box(batch.view())).unwrap())
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("rank_topk");
    for items in [1_000, 10_000] {
        let (scores, mask) = ranking_case(items, 5);
        group.throughput(Throughput::Elements(items as u64));
        group.bench_with_input(BenchmarkId::from_parameter(items), &items, |b, _| {
            b.iter(|| rank_topk(black_box(&scores), black_box(&mask), 20))
        });
    }
    group.finish();
}

criterion_group!(benches, spline, autoencoder, ranking);
criterion_main!(benches);
