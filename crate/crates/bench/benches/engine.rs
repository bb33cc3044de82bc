use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use laplace_mh::econ;
use laplace_mh::laplace::{explore_hypers, gaussian_approx, FitConfig};
use laplace_mh::spmat::SymbolicCholesky;
use laplace_mh_bench::{columbus, dismap_conditional, hyper_medians, lattice_precision};

fn factorisation(c: &mut Criterion) {
    let mut group = c.benchmark_group("cholesky");
    for side in [10, 20, 40] {
        let q = lattice_precision(side);
        let symbolic = SymbolicCholesky::for_matrix(&q).unwrap();
        let values = symbolic.values_from(&q).unwrap();
        group.bench_with_input(BenchmarkId::new("analyze", side * side), &q, |b, q| {
            b.iter(|| SymbolicCholesky::for_matrix(black_box(q)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("numeric", side * side), &values, |b, v| {
            b.iter(|| symbolic.factor(black_box(v)).unwrap())
        });
    }
    group.finish();
}

fn laplace(c: &mut Criterion) {
    let (model, theta) = dismap_conditional(7);
    c.bench_function("gaussian_approx/dismap_7x7", |b| {
        b.iter(|| gaussian_approx(black_box(&model), black_box(&theta)).unwrap())
    });

    let spec = columbus();
    let cond = econ::build_conditional(&spec, 0.4, 0.1).unwrap();
    let theta = hyper_medians(&cond.model);
    c.bench_function("gaussian_approx/columbus", |b| {
        b.iter(|| gaussian_approx(black_box(&cond.model), black_box(&theta)).unwrap())
    });

    let mut group = c.benchmark_group("explore_hypers");
    group.sample_size(10);
    group.bench_function("columbus", |b| {
        b.iter(|| explore_hypers(black_box(&cond.model), &FitConfig::default()).unwrap())
    });
    group.bench_function("dismap_7x7", |b| {
        b.iter(|| explore_hypers(black_box(&model), &FitConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, factorisation, laplace);
criterion_main!(benches);
