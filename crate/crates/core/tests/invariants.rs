//! Property checks on fields, flows and the boundary manifolds.

mod common;

use common::{
    c1_manifold_drift, c3_manifold_drift, constants, level_drift, phase, stm_fd_error, IDS,
};
use evcar_core::flow::{expmap, expmap_stm};
use evcar_core::hamiltonians::{lifts, vector_field};
use evcar_core::{HamiltonianId, ModelConstants, Phase, Tolerances};
use nalgebra::Matrix6;
use proptest::prelude::*;

fn symplectic_form() -> Matrix6<f64> {
    let mut j = Matrix6::zeros();
    for i in 0..3 {
        j[(i, i + 3)] = 1.0;
        j[(i + 3, i)] = -1.0;
    }
    j
}

/// `{f, g}` by central differences; exact up to rounding for the
/// polynomial lifts of degree at most two.
fn bracket(f: impl Fn(&Phase) -> f64, g: impl Fn(&Phase) -> f64, z: &Phase) -> f64 {
    let h = 1e-2;
    let grad = |k: &dyn Fn(&Phase) -> f64| {
        let mut d = [0.0; 6];
        for (i, di) in d.iter_mut().enumerate() {
            let (mut a, mut b) = (*z, *z);
            a[i] += h;
            b[i] -= h;
            *di = (k(&a) - k(&b)) / (2.0 * h);
        }
        d
    };
    let (df, dg) = (grad(&f), grad(&g));
    (0..3).map(|i| df[i + 3] * dg[i] - df[i] * dg[i + 3]).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn level_and_p2_are_first_integrals(mc in constants(), z0 in phase(), t in 0.5..8.0f64) {
        for id in IDS {
            let (level, p2) = level_drift(&mc, id, &z0, t);
            prop_assert!(level <= 1.0, "{id:?}: {level} of the bound");
            prop_assert!(p2 <= 1e-12, "{id:?}: {p2}");
        }
    }

    #[test]
    fn stm_composes(mc in constants(), z0 in phase(), t1 in 0.2..3.0f64, t2 in 0.2..3.0f64) {
        let tol = Tolerances::uniform(1e-12);
        for id in IDS {
            let a = expmap_stm(&mc, id, &z0, 0.0, t1, &tol, None).unwrap();
            let b = expmap_stm(&mc, id, &a.z, t1, t1 + t2, &tol, None).unwrap();
            let c = expmap_stm(&mc, id, &z0, 0.0, t1 + t2, &tol, None).unwrap();
            let prod = b.stm.unwrap() * a.stm.unwrap();
            let full = c.stm.unwrap();
            prop_assert!((prod - full).amax() <= 1e-8 * full.amax().max(1.0), "{id:?}");
        }
    }

    #[test]
    fn stm_is_symplectic(mc in constants(), z0 in phase(), t in 0.5..8.0f64) {
        let j = symplectic_form();
        for id in IDS {
            let phi = expmap_stm(&mc, id, &z0, 0.0, t, &Tolerances::default(), None).unwrap().stm.unwrap();
            let d = phi.transpose() * j * phi - j;
            prop_assert!(d.amax() <= 1e-6 * phi.amax().powi(2).max(1.0), "{id:?}: {}", d.amax());
        }
    }

    #[test]
    fn brackets_h101_and_h1001_vanish(mc in constants(), z in phase()) {
        let h1 = |z: &Phase| lifts(&mc, z).h1;
        let h01 = |z: &Phase| lifts(&mc, z).h01;
        let h001 = |z: &Phase| lifts(&mc, z).h001;
        prop_assert!(bracket(h1, h01, &z).abs() <= 1e-10);
        prop_assert!(bracket(h1, h001, &z).abs() <= 1e-10);
        // The lifts themselves are brackets of the ones before.
        let h0 = |z: &Phase| lifts(&mc, z).h0;
        prop_assert!((bracket(h0, h1, &z) - h01(&z)).abs() <= 1e-10);
        prop_assert!((bracket(h0, h01, &z) - h001(&z)).abs() <= 1e-10);
    }

    #[test]
    fn current_boundary_manifold_is_invariant(mc in constants(), z in phase(), t in 0.1..5.0f64) {
        prop_assert!(c1_manifold_drift(&mc, &z, t) <= 1e-8);
    }

    #[test]
    fn speed_boundary_manifolds_are_invariant(mc in constants(), z in phase(), t in 0.1..5.0f64, singular in any::<bool>()) {
        prop_assert!(c3_manifold_drift(&mc, &z, t, singular) <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn variational_flow_matches_finite_differences(mc in constants(), z0 in phase(), t in 0.1..2.0f64, k in 0usize..4) {
        let e = stm_fd_error(&mc, IDS[k], &z0, t);
        prop_assert!(e <= 1e-5, "{:?}: {e}", IDS[k]);
    }
}

#[test]
fn switching_function_derivatives_follow_the_lifts() {
    let mc = ModelConstants::reference();
    let z0 = Phase::new(0.0, 0.0, 0.0, 0.3675, 6.4479, 0.2417);
    let r = expmap(
        &mc,
        HamiltonianId::HPlus,
        &z0,
        0.0,
        5.6,
        &Tolerances::uniform(1e-12),
        true,
    )
    .unwrap();
    let d = r.dense.unwrap();
    let h = 1e-4;
    for k in 1..56 {
        let t = 0.1 * k as f64;
        let (a, b) = (d.eval(t + h), d.eval(t - h));
        let dh1 = (lifts(&mc, &a).h1 - lifts(&mc, &b).h1) / (2.0 * h);
        let dh01 = (lifts(&mc, &a).h01 - lifts(&mc, &b).h01) / (2.0 * h);
        let l = lifts(&mc, &d.eval(t));
        assert!((dh1 - l.h01).abs() < 1e-6, "t = {t}");
        assert!((dh01 - l.h001).abs() < 1e-6, "t = {t}");
    }
}

#[test]
fn fold_sign_at_the_final_costate() {
    // p = (0, 1, 0): H1 = H01 = 0 and H001 = k7 k3 k5 > 0.
    let mc = ModelConstants::reference();
    let z = Phase::new(0.3, 1.0, 0.6, 0.0, 1.0, 0.0);
    let l = lifts(&mc, &z);
    assert_eq!(l.h1, 0.0);
    assert_eq!(l.h01, 0.0);
    assert!((l.h001 - mc.k[6] * mc.k[2] * mc.k[4]).abs() < 1e-12);
    assert!(l.h001 > 0.0);
    let f = vector_field(&mc, HamiltonianId::HPlus, &z);
    assert_eq!(f[4], 0.0);
}
