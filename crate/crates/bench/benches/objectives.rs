use std::hint::black_box;

use addgp_bench::{fixture, COMPONENT_GRID, SIZE_GRID, SWEEP_C, SWEEP_N};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn kl_sparse(c: &mut Criterion) {
    let mut g = c.benchmark_group("kl_sparse");
    for &comps in &COMPONENT_GRID {
        let model = fixture(SWEEP_N, comps);
        g.bench_with_input(BenchmarkId::from_parameter(comps), &model, |b, m| {
            b.iter(|| black_box(m.kl_sparse().unwrap()))
        });
    }
    g.finish();
}

fn elbo_sparse(c: &mut Criterion) {
    let mut g = c.benchmark_group("elbo_sparse");
    g.sample_size(20);
    for &n in &SIZE_GRID {
        let model = fixture(n, SWEEP_C);
        g.bench_with_input(BenchmarkId::from_parameter(n), &model, |b, m| {
            b.iter(|| black_box(m.elbo_sparse().unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kl_sparse, elbo_sparse);
criterion_main!(benches);
