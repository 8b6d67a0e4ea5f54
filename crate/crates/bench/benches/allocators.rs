use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dic_bench::{benchmark_demands, corridor_instance};
use dic_core::benchmark::allocate_benchmark;
use dic_core::mpc::{build_qp, MpcController};
use dic_core::qp::{self, SolverSettings};
use dic_core::scenario::build_default_scenario;
use std::hint::black_box;

fn qp_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("qp_solve");
    group.sample_size(10);
    for n in [50, 200] {
        let problem = build_qp(&corridor_instance(n)).unwrap().problem;
        let settings = SolverSettings::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &problem, |b, p| {
            b.iter(|| qp::solve(black_box(p), &settings, None).unwrap())
        });
    }
    group.finish();
}

fn mpc_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("mpc_step");
    group.sample_size(10);
    for n in [50, 200] {
        let instance = corridor_instance(n);
        group.bench_with_input(BenchmarkId::new("cold", n), &instance, |b, inst| {
            b.iter(|| MpcController::new(SolverSettings::default()).solve_step(black_box(inst)).unwrap())
        });
        let mut warm = MpcController::new(SolverSettings::default());
        warm.solve_step(&instance).unwrap();
        group.bench_with_input(BenchmarkId::new("warm", n), &instance, |b, inst| {
            b.iter(|| warm.solve_step(black_box(inst)).unwrap())
        });
    }
    group.finish();
}

fn benchmark_allocation(c: &mut Criterion) {
    let (_, stripes, _, _) = build_default_scenario();
    let mut group = c.benchmark_group("benchmark_allocation");
    for n in [100, 1000] {
        let demands = benchmark_demands(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &demands, |b, d| {
            b.iter(|| allocate_benchmark(black_box(d), &stripes, 0.0))
        });
    }
    group.finish();
}

criterion_group!(benches, qp_solve, mpc_step, benchmark_allocation);
criterion_main!(benches);
