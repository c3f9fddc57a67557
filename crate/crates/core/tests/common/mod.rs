//! Generators and helpers shared by the integration tests.
#![allow(dead_code)]

use evcar_core::flow::expmap;
use evcar_core::{Bounds, CarParams, HamiltonianId, ModelConstants, Phase, Tolerances};
use proptest::prelude::*;

pub const IDS: [HamiltonianId; 4] = [
    HamiltonianId::HPlus,
    HamiltonianId::HMinus,
    HamiltonianId::HC1,
    HamiltonianId::HC3,
];

pub fn constants() -> impl Strategy<Value = ModelConstants> {
    (150.0..1200.0f64, 10.0..120.0f64).prop_map(|(imax, vmax)| {
        ModelConstants::new(
            CarParams::default(),
            Bounds {
                imax,
                vmax,
                alphaf: 100.0,
            },
        )
        .unwrap()
    })
}

pub fn phase() -> impl Strategy<Value = Phase> {
    (
        0.0..1.0f64,
        0.0..1.0f64,
        0.0..1.0f64,
        -1.0..1.0f64,
        0.5..8.0f64,
        -1.0..1.0f64,
    )
        .prop_map(|(a, b, c, d, e, f)| Phase::new(a, b, c, d, e, f))
}

/// Time at which the flow first leaves a box around the admissible states,
/// capped at `t`; unconstrained fields reach speeds far beyond any scenario.
pub fn horizon(mc: &ModelConstants, id: HamiltonianId, z0: &Phase, t: f64) -> f64 {
    let d = expmap(mc, id, z0, 0.0, t, &Tolerances::default(), true)
        .unwrap()
        .dense
        .unwrap();
    let inside = |z: &Phase| z[0].abs() <= 1.2 && (-0.2..=1.2).contains(&z[2]);
    (1..=200)
        .map(|k| t * k as f64 / 200.0)
        .take_while(|&s| inside(&d.eval(s)))
        .last()
        .unwrap_or(t / 200.0)
}

/// Level drift of one flow relative to the bound `1e-9 (1 + |H|)`, and the
/// absolute drift of `p2`.
pub fn level_drift(mc: &ModelConstants, id: HamiltonianId, z0: &Phase, t: f64) -> (f64, f64) {
    use evcar_core::hamiltonians::hamiltonian;
    let t = horizon(mc, id, z0, t);
    let r = expmap(mc, id, z0, 0.0, t, &Tolerances::default(), false).unwrap();
    let h0 = hamiltonian(mc, id, z0);
    let h = hamiltonian(mc, id, &r.z);
    (
        (h - h0).abs() / (1e-9 * (1.0 + h0.abs())),
        (r.z[4] - z0[4]).abs(),
    )
}

/// Worst relative mismatch between the variational flow and central
/// differences with step 1e-6.
pub fn stm_fd_error(mc: &ModelConstants, id: HamiltonianId, z0: &Phase, t: f64) -> f64 {
    use evcar_core::flow::expmap_stm;
    let tol = Tolerances::uniform(1e-12);
    let phi = expmap_stm(mc, id, z0, 0.0, t, &tol, None)
        .unwrap()
        .stm
        .unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for c in 0..6 {
        let (mut a, mut b) = (*z0, *z0);
        a[c] += h;
        b[c] -= h;
        let fa = expmap(mc, id, &a, 0.0, t, &tol, false).unwrap().z;
        let fb = expmap(mc, id, &b, 0.0, t, &tol, false).unwrap().z;
        let col = (fa - fb) / (2.0 * h);
        for r in 0..6 {
            worst = worst.max((phi[(r, c)] - col[r]).abs() / col[r].abs().max(1.0));
        }
    }
    worst
}

/// Drift off the current boundary manifold `{x1 = 1, p1 = 0}`.
pub fn c1_manifold_drift(mc: &ModelConstants, z: &Phase, t: f64) -> f64 {
    let mut z0 = *z;
    z0[0] = 1.0;
    z0[3] = 0.0;
    let r = expmap(
        mc,
        HamiltonianId::HC1,
        &z0,
        0.0,
        t,
        &Tolerances::default(),
        false,
    )
    .unwrap();
    (r.z[0] - 1.0).abs().max(r.z[3].abs())
}

/// Drift off the speed boundary manifold `{x3 = 1, x1 = x1_on_c3}`, and with
/// `singular` also off `{p1 = p3 = 0}` measured by `H1` and `H01`.
pub fn c3_manifold_drift(mc: &ModelConstants, z: &Phase, t: f64, singular: bool) -> f64 {
    use evcar_core::hamiltonians::lifts;
    let mut z0 = *z;
    z0[0] = mc.x1_on_c3();
    z0[2] = 1.0;
    if singular {
        z0[3] = 0.0;
        z0[5] = 0.0;
    }
    let r = expmap(
        mc,
        HamiltonianId::HC3,
        &z0,
        0.0,
        t,
        &Tolerances::default(),
        false,
    )
    .unwrap();
    let mut d = (r.z[2] - 1.0).abs().max((r.z[0] - mc.x1_on_c3()).abs());
    if singular {
        let l = lifts(mc, &r.z);
        d = d.max(l.h1.abs()).max(l.h01.abs());
    }
    d
}
