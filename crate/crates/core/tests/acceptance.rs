//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::time::Instant;

use common::{
    c1_manifold_drift, c3_manifold_drift, constants, level_drift, phase, stm_fd_error, IDS,
};
use evcar_core::hamiltonians::lifts;
use evcar_core::scenario::{
    milestone_solutions, run_scenario, verify_gamma_plus, ScenarioOptions, ScenarioRun, TBAR_F,
};
use evcar_core::shooting::{multi_start_s1, trajectory, NewtonOptions};
use evcar_core::{Bounds, CarParams, ModelConstants, Tolerances};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

fn bang_solve() -> Outcome {
    let mc = ModelConstants::reference();
    let clock = Instant::now();
    let rep = match multi_start_s1(&mc, &NewtonOptions::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = clock.elapsed().as_secs_f64();
    let (p0, tf) = (rep.unknowns.p0(), rep.unknowns.tf());
    let want = [0.3615, 6.4479, 0.2416];
    let p0_ok = (0..3).all(|i| within(p0[i], want[i], 1e-3));
    let pass = within(tf, 5.6156, 1e-3) && p0_ok && rep.residual_norm <= 1e-8 && secs < 1.0;
    outcome(
        pass,
        format!(
            "tf {tf:.6}, p0 ({:.6}, {:.6}, {:.6}) vs ({}, {}, {}), residual {:.1e}, {secs:.3} s",
            p0[0], p0[1], p0[2], want[0], want[1], want[2], rep.residual_norm
        ),
    )
}

fn milestones(run: &ScenarioRun) -> Outcome {
    let m = &run.milestones;
    let get = |v: Option<f64>| v.unwrap_or(f64::NAN);
    let (ic1, vc3, vgc3, vplus) = (
        get(m.imax_c1),
        get(m.vmax_c3),
        get(m.vmax_gamma_c3),
        get(m.vmax_plus),
    );
    let oracle = get(m.vmax_gamma_c3_oracle);
    let pass = m.failures.is_empty()
        && within(ic1, 1081.94, 0.5)
        && within(vc3, 70.3716, 0.05)
        && within(vgc3, 65.6042, 0.05)
        && within(vgc3, oracle, 0.05)
        && within(vplus, 64.1641, 0.1)
        && m.runtime_s < 300.0;
    outcome(
        pass,
        format!(
            "imax_c1 {ic1:.4}, vmax_c3 {vc3:.4}, vmax_gc3 {vgc3:.4} (oracle {oracle:.4}), \
             vmax_plus {vplus:.4}, {:.1} s{}",
            m.runtime_s,
            if m.failures.is_empty() {
                String::new()
            } else {
                format!(", failures: {:?}", m.failures)
            }
        ),
    )
}

fn bang_optimality() -> Outcome {
    let mc = ModelConstants::new(
        CarParams::default(),
        Bounds {
            imax: 1200.0,
            vmax: 120.0,
            alphaf: 100.0,
        },
    )
    .unwrap();
    let clock = Instant::now();
    let rep = verify_gamma_plus(&mc, 50, TBAR_F, &Tolerances::default());
    let secs = clock.elapsed().as_secs_f64();
    outcome(
        rep.passed() && secs < 60.0,
        format!(
            "{} crossings on {}x{}, min |Phi| {:.3e}, {} failed points, {secs:.2} s",
            rep.zero_crossings,
            rep.grid_n,
            rep.grid_n,
            rep.min_abs_phi,
            rep.failures.len()
        ),
    )
}

fn invariants(run: &ScenarioRun) -> Outcome {
    let mut runner = TestRunner::deterministic();
    let case = (constants(), phase(), 0.5..8.0f64, 0usize..4);
    let mut draw = || case.new_tree(&mut runner).unwrap().current();

    let (mut level, mut p2, mut manifold, mut stm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (mc, z0, t, _) = draw();
        for id in IDS {
            let (l, p) = level_drift(&mc, id, &z0, t);
            level = level.max(l);
            p2 = p2.max(p);
        }
        let t = t.min(5.0);
        manifold = manifold
            .max(c1_manifold_drift(&mc, &z0, t))
            .max(c3_manifold_drift(&mc, &z0, t, false))
            .max(c3_manifold_drift(&mc, &z0, t, true));
    }
    for _ in 0..100 {
        let (mc, z0, t, k) = draw();
        stm = stm.max(stm_fd_error(&mc, IDS[k], &z0, t.min(2.0)));
    }

    let tol = Tolerances::default();
    let (mut nu, mut transversal, mut h001) = (f64::NEG_INFINITY, 0.0f64, f64::INFINITY);
    let sols = milestone_solutions(run);
    for (_, bounds, y) in &sols {
        let mc = ModelConstants::new(run.car, *bounds).unwrap();
        for i in 1..=y.n_nodes() {
            if y.layout().nodes[i - 1].jump.is_some() {
                nu = nu.max(y.jump(i));
            }
        }
        let tr = trajectory(&mc, y, &tol).unwrap();
        let z = tr.eval(tr.tf());
        transversal = transversal.max(z[3].abs()).max(z[5].abs());
        h001 = h001.min(lifts(&mc, &z).h001);
    }
    let pass = level <= 1.0
        && p2 <= 1e-12
        && manifold <= 1e-8
        && !sols.is_empty()
        && nu <= 1e-6
        && transversal <= 1e-8
        && h001 > 0.0
        && stm <= 1e-5;
    outcome(
        pass,
        format!(
            "level {:.2e}, p2 {p2:.1e}, manifolds {manifold:.1e}, max nu {nu:.1e}, \
             |p1|,|p3| at tf {transversal:.1e}, min H001 {h001:.3e} on {} solutions, \
             variational {stm:.1e}",
            level * 1e-9,
            sols.len()
        ),
    )
}

fn handoffs(run: &ScenarioRun) -> Outcome {
    let hs = &run.milestones.handoffs;
    let state = hs.iter().map(|h| h.state_error).fold(0.0, f64::max);
    let last = hs.last();
    let costate = last.map_or(f64::NAN, |h| h.costate_error);
    let s4_s5 = last
        .is_some_and(|h| (h.from, h.to) == (evcar_core::Structure::S4, evcar_core::Structure::S5));
    outcome(
        hs.len() == 4 && s4_s5 && state <= 1e-5 && costate <= 1e-5,
        format!(
            "{} hand-offs, max state gap {state:.1e}, costate gap at the last {costate:.1e}",
            hs.len()
        ),
    )
}

fn path_health(run: &ScenarioRun) -> Outcome {
    let legs = &run.milestones.legs;
    let drift = legs.iter().map(|l| l.max_drift).fold(0.0, f64::max);
    let end = legs.iter().map(|l| l.end_residual).fold(0.0, f64::max);
    outcome(
        legs.len() == 6 && drift <= 1e-4 && end <= 1e-8,
        format!(
            "{} legs, max predictor residual {drift:.1e}, max endpoint residual {end:.1e}",
            legs.len()
        ),
    )
}

fn main() {
    let run = run_scenario(&CarParams::default(), &ScenarioOptions::default());
    let results = [
        ("1 bang solve", bang_solve()),
        ("2 milestones", milestones(&run)),
        ("3 bang optimality", bang_optimality()),
        ("4 invariants", invariants(&run)),
        ("5 hand-offs", handoffs(&run)),
        ("6 path health", path_health(&run)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "criterion {name:<18} {}  {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria pass",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
