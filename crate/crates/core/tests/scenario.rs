//! Properties of the full scenario, computed once and shared.

use std::sync::OnceLock;

use evcar_core::hamiltonians::{lifts, multiplier};
use evcar_core::scenario::{
    milestone_solutions, run_scenario, structure_at, ScenarioOptions, ScenarioRun,
};
use evcar_core::shooting::trajectory;
use evcar_core::{
    CarParams, HamiltonianId, ModelConstants, Param, Structure, Tolerances, Unknowns,
};

fn run() -> &'static ScenarioRun {
    static RUN: OnceLock<ScenarioRun> = OnceLock::new();
    RUN.get_or_init(|| run_scenario(&CarParams::default(), &ScenarioOptions::default()))
}

fn jumps(y: &Unknowns) -> Vec<f64> {
    (1..=y.n_nodes())
        .filter(|&i| y.layout().nodes[i - 1].jump.is_some())
        .map(|i| y.jump(i))
        .collect()
}

#[test]
fn every_leg_completes() {
    let m = &run().milestones;
    assert!(m.failures.is_empty(), "{:?}", m.failures);
    let names: Vec<_> = m.legs.iter().map(|l| l.name.as_str()).collect();
    assert_eq!(names, ["h1", "h2a", "h2b", "h3", "h4", "h5"]);
}

#[test]
fn thresholds_are_ordered() {
    let m = &run().milestones;
    let (c3, gc3, plus) = (
        m.vmax_c3.unwrap(),
        m.vmax_gamma_c3.unwrap(),
        m.vmax_plus.unwrap(),
    );
    assert!(110.0 > c3 && c3 > gc3 && gc3 > plus && plus > 10.0);
    assert!((gc3 - m.vmax_gamma_c3_oracle.unwrap()).abs() < 1e-6);
}

#[test]
fn structure_along_the_speed_slice() {
    let slice = run().slice.as_ref().unwrap();
    assert_eq!(structure_at(slice, 110.0), Some(Structure::S2));
    assert_eq!(structure_at(slice, 68.0), Some(Structure::S3));
    assert_eq!(structure_at(slice, 65.0), Some(Structure::S4));
    assert_eq!(structure_at(slice, 30.0), Some(Structure::S5));
    assert!(slice.tf_monotone);
    assert!(slice.all_admissible);
}

#[test]
fn current_leg_jump_is_nonpositive_and_nonzero_at_contact() {
    let r = run();
    let imax = r.imax.as_ref().unwrap();
    assert!(jumps(&imax.s2_limit)[0] < -1e-3);
    let h2a = r.legs().find(|l| l.name == "h2a").unwrap();
    for p in &h2a.path.points {
        let y = Unknowns::from_vec(Structure::S2, p.y.clone()).unwrap();
        assert!(
            jumps(&y)[0] <= 1e-6,
            "nu2 = {} at {}",
            jumps(&y)[0],
            p.lambda
        );
    }
}

#[test]
fn current_boundary_multiplier_is_nonpositive() {
    let r = run();
    let base = ModelConstants::new(CarParams::default(), Default::default()).unwrap();
    let h2a = r.legs().find(|l| l.name == "h2a").unwrap();
    let tol = Tolerances::default();
    for p in h2a.path.points.iter().step_by(4) {
        let mc = base.with_param(Param::Imax, p.lambda).unwrap();
        let y = Unknowns::from_vec(Structure::S2, p.y.clone()).unwrap();
        let tr = trajectory(&mc, &y, &tol).unwrap();
        for a in tr.arcs.iter().filter(|a| a.id == HamiltonianId::HC1) {
            for k in 0..=20 {
                let t = a.t0 + (a.t1 - a.t0) * k as f64 / 20.0;
                let eta = multiplier(&mc, HamiltonianId::HC1, &a.dense.eval(t));
                assert!(eta <= 1e-6, "eta_c1 = {eta} at imax {}", p.lambda);
            }
        }
    }
}

#[test]
fn milestone_solutions_satisfy_the_final_conditions() {
    let r = run();
    let tol = Tolerances::default();
    let sols = milestone_solutions(r);
    assert_eq!(sols.len(), 11);
    for (name, bounds, y) in sols {
        let mc = ModelConstants::new(r.car, bounds).unwrap();
        for nu in jumps(&y) {
            assert!(nu <= 1e-6, "{name}: nu = {nu}");
        }
        let tr = trajectory(&mc, &y, &tol).unwrap();
        let z = tr.eval(tr.tf());
        assert!(z[3].abs() <= 1e-8, "{name}: p1(tf) = {}", z[3]);
        assert!(z[5].abs() <= 1e-8, "{name}: p3(tf) = {}", z[5]);
        assert!(lifts(&mc, &z).h001 > 0.0, "{name}");
    }
}

#[test]
fn handoffs_agree() {
    let m = &run().milestones;
    assert_eq!(m.handoffs.len(), 4);
    for h in &m.handoffs {
        assert!(
            h.state_error <= 1e-5,
            "{:?} -> {:?}: {}",
            h.from,
            h.to,
            h.state_error
        );
    }
    let last = m.handoffs.last().unwrap();
    assert_eq!((last.from, last.to), (Structure::S4, Structure::S5));
    assert!(last.costate_error <= 1e-5);
}
