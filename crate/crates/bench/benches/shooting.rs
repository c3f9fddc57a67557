use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use evcar_bench::{perturbed, s1_zero, s2_zero};
use evcar_core::flow::expmap_stm;
use evcar_core::scenario::{verify_gamma_plus, TBAR_F};
use evcar_core::shooting::{jacobian, multi_start_s1, residual, solve, NewtonOptions};
use evcar_core::{HamiltonianId, Phase, Tolerances};

fn flow(c: &mut Criterion) {
    let (mc, y) = s1_zero();
    let p = y.p0();
    let z0 = Phase::new(0.0, 0.0, 0.0, p[0], p[1], p[2]);
    let tol = Tolerances::default();
    c.bench_function("expmap_stm bang arc", |b| {
        b.iter(|| {
            expmap_stm(
                &mc,
                HamiltonianId::HPlus,
                black_box(&z0),
                0.0,
                y.tf(),
                &tol,
                None,
            )
        })
    });
}

fn shooting(c: &mut Criterion) {
    let tol = Tolerances::default();
    let opts = NewtonOptions::default();
    let (mc1, y1) = s1_zero();
    let (mc2, y2) = s2_zero();
    c.bench_function("s1 residual", |b| {
        b.iter(|| residual(&mc1, black_box(&y1), &tol))
    });
    c.bench_function("s1 jacobian", |b| {
        b.iter(|| jacobian(&mc1, black_box(&y1), &tol))
    });
    c.bench_function("s2 residual", |b| {
        b.iter(|| residual(&mc2, black_box(&y2), &tol))
    });
    c.bench_function("s2 jacobian", |b| {
        b.iter(|| jacobian(&mc2, black_box(&y2), &tol))
    });

    let guess = perturbed(&y1, 1e-2);
    c.bench_function("s1 newton from 1% off", |b| {
        b.iter(|| solve(&mc1, black_box(&guess), &opts))
    });
    let mut g = c.benchmark_group("slow");
    g.sample_size(10);
    g.bench_function("s1 multi-start", |b| {
        b.iter(|| multi_start_s1(black_box(&mc1), &opts))
    });
    g.bench_function("bang optimality grid 10", |b| {
        b.iter(|| verify_gamma_plus(black_box(&mc1), 10, TBAR_F, &tol))
    });
    g.finish();
}

criterion_group!(benches, flow, shooting);
criterion_main!(benches);
