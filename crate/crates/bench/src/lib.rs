//! Solved problems the benchmarks start from.

use evcar_core::scenario::{run_imax_leg, ScenarioOptions};
use evcar_core::shooting::{multi_start_s1, NewtonOptions};
use evcar_core::{CarParams, ModelConstants, Param, Unknowns};

/// Bang solution of the reference car.
pub fn s1_zero() -> (ModelConstants, Unknowns) {
    let mc = ModelConstants::reference();
    let rep = multi_start_s1(&mc, &NewtonOptions::default()).expect("reference car solves");
    (mc, rep.unknowns)
}

/// Current-boundary solution at the end of the current leg.
pub fn s2_zero() -> (ModelConstants, Unknowns) {
    let opts = ScenarioOptions::default();
    let leg = run_imax_leg(&CarParams::default(), &opts).expect("current leg completes");
    let mc = ModelConstants::reference()
        .with_param(Param::Imax, opts.imax_end)
        .unwrap();
    (mc, leg.sol_end.unknowns)
}

/// `y` with every entry scaled by `1 + eps`.
pub fn perturbed(y: &Unknowns, eps: f64) -> Unknowns {
    y.with_values(y.values.map(|v| v * (1.0 + eps)))
}
