use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fvlab_core::genealogy::sample_invariant;
use fvlab_core::moran::{simulate, InitialCondition, MoranConfig, RatePreset};
use fvlab_core::seed::replica_rng;
use fvlab_core::semigroup::{apply_semigroup, SemigroupParams};
use fvlab_core::verify::random_polynomial;

fn pushforward(c: &mut Criterion) {
    let mut group = c.benchmark_group("semigroup_pushforward");
    for arity in [2usize, 4, 6] {
        let f = random_polynomial(arity, 4, 12, &mut replica_rng(1, arity as u64));
        let p = SemigroupParams::new(arity, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(arity), &f, |b, f| {
            b.iter(|| apply_semigroup(black_box(f), &p, 0.3).unwrap())
        });
    }
    group.finish();
}

fn moran(c: &mut Criterion) {
    let mut group = c.benchmark_group("moran_simulate");
    group.sample_size(20);
    for n in [50usize, 200] {
        let cfg = MoranConfig::new(n, 1.0, RatePreset::Diffusion, 1.0, 0.1, InitialCondition::IidNormal { sigma: 1.0 });
        group.bench_with_input(BenchmarkId::from_parameter(n), &cfg, |b, cfg| {
            let mut rng = replica_rng(2, 0);
            b.iter(|| simulate(cfg, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn invariant(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_invariant");
    for n in [20usize, 100, 1000] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let mut rng = replica_rng(3, 0);
            b.iter(|| sample_invariant(n, 1.0, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pushforward, moran, invariant);
criterion_main!(benches);
