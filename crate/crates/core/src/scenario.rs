//! The two continuation legs at `alphaf = 100` and the bang-arc optimality
//! check.
//!
//! The current leg starts from the unconstrained extremal at
//! `(imax, vmax) = (1100, 110)` and lowers `imax` to 150; the speed leg then
//! lowers `vmax` from 110 to 10 through four structure changes.

use log::{debug, info};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuation::{
    correct, follow, FollowOptions, Homotopy, MonitorFn, PathEnd, PathProblem, PathResult, Stop,
};
use crate::flow::{expmap, Tolerances};
use crate::hamiltonians::{lifts, vector_field, HamiltonianId, Phase};
use crate::model::{vmax_gamma_c3, Bounds, CarParams, ModelConstants, Param};
use crate::shooting::{
    check_admissible, multi_start_s1, solve, trajectory, NewtonOptions, SolveReport, Structure,
    Unknowns,
};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOptions {
    pub imax_start: f64,
    pub imax_end: f64,
    pub vmax_start: f64,
    pub vmax_end: f64,
    pub alphaf: f64,
    pub newton: NewtonOptions,
    pub follow: FollowOptions,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            imax_start: 1100.0,
            imax_end: 150.0,
            vmax_start: 110.0,
            vmax_end: 10.0,
            alphaf: 100.0,
            newton: NewtonOptions::default(),
            follow: FollowOptions::default(),
        }
    }
}

impl ScenarioOptions {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.newton.flow = Tolerances::uniform(tol);
        self
    }
}

/// One followed path of the scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Leg {
    pub name: String,
    pub structure: Structure,
    pub param: Param,
    pub path: PathResult,
}

impl Leg {
    pub fn end_unknowns(&self) -> Unknowns {
        Unknowns::from_vec(self.structure, self.path.y_end.clone()).expect("path keeps the layout")
    }
}

/// Distance between the extremals of two structures at the same parameter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Handoff {
    pub from: Structure,
    pub to: Structure,
    pub lambda: f64,
    /// Largest state difference on a uniform grid.
    pub state_error: f64,
    /// Largest costate difference on the grid after `costate_from`.
    pub costate_error: f64,
    pub costate_from: f64,
}

/// Compares the trajectories of two solutions on 2001 grid points.
pub fn compare_extremals(
    mc: &ModelConstants,
    a: &Unknowns,
    b: &Unknowns,
    costate_from: f64,
    tol: &Tolerances,
) -> Result<Handoff, Error> {
    let ta = trajectory(mc, a, tol)?;
    let tb = trajectory(mc, b, tol)?;
    let tf = a.tf().min(b.tf());
    let mut state_error = (a.tf() - b.tf()).abs();
    let mut costate_error: f64 = 0.0;
    let n = 2000;
    for k in 0..=n {
        let t = tf * k as f64 / n as f64;
        let (za, zb) = (ta.eval(t), tb.eval(t));
        let d = za - zb;
        state_error = state_error.max(d.rows(0, 3).amax());
        // Costates may legitimately jump at a node; skip points next to one.
        let near_node = |y: &Unknowns| (1..=y.n_nodes()).any(|i| (y.time(i) - t).abs() < 1e-6);
        if t >= costate_from && !near_node(a) && !near_node(b) {
            costate_error = costate_error.max(d.rows(3, 3).amax());
        }
    }
    Ok(Handoff {
        from: a.structure,
        to: b.structure,
        lambda: 0.0,
        state_error,
        costate_error,
        costate_from,
    })
}

/// Time in `[t0, t1]` where `g` vanishes along arc `id` started at `z0`
/// at `t0`, by secant iterations on exact flows.
fn refine_root<G: Fn(&Phase) -> f64>(
    mc: &ModelConstants,
    id: HamiltonianId,
    z0: &Phase,
    t0: f64,
    guess: f64,
    g: G,
    tol: &Tolerances,
) -> Result<(f64, Phase), Error> {
    let at = |t: f64| expmap(mc, id, z0, t0, t, tol, false).map(|r| r.z);
    let h = 1e-4;
    let (mut ta, mut tb) = (guess - h, guess + h);
    let (mut ga, mut gb) = (g(&at(ta)?), g(&at(tb)?));
    for _ in 0..50 {
        if gb == ga {
            break;
        }
        let tn = tb - gb * (tb - ta) / (gb - ga);
        ta = tb;
        ga = gb;
        tb = tn;
        gb = g(&at(tb)?);
        if (tb - ta).abs() < 1e-14 * tb.abs().max(1.0) || gb == 0.0 {
            break;
        }
    }
    Ok((tb, at(tb)?))
}

/// Largest `x_c - 1` over the arcs of a solution that are not on bound `c`.
pub fn max_constraint(
    mc: &ModelConstants,
    y: &Unknowns,
    component: usize,
    tol: &Tolerances,
) -> Result<f64, Error> {
    let tr = trajectory(mc, y, tol)?;
    let skip = if component == 0 {
        HamiltonianId::HC1
    } else {
        HamiltonianId::HC3
    };
    Ok(tr
        .arcs
        .iter()
        .filter(|a| a.id != skip && a.t1 > a.t0)
        .map(|a| a.dense.max_component(component).1 - 1.0)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Extremal with a contact point with the current bound, rewritten as a
/// three-arc extremal whose boundary arc has zero length.
///
/// The state is unchanged. The costate before the contact time is replaced
/// by the one lying on `p1 = 0` there, and the jump restores the original
/// costate after it.
pub fn s2_from_contact(
    mc: &ModelConstants,
    y1: &Unknowns,
    tol: &Tolerances,
) -> Result<Unknowns, Error> {
    let tr = trajectory(mc, y1, tol)?;
    let (t_guess, _) = tr.arcs[0].dense.max_component(0);
    let z0 = y1.start(0);
    let (tau, z_tau) = refine_root(
        mc,
        HamiltonianId::HPlus,
        &z0,
        0.0,
        t_guess,
        |z| vector_field(mc, HamiltonianId::HPlus, z)[0],
        tol,
    )?;
    let mut z_minus = z_tau;
    z_minus[3] = 0.0;
    let back = expmap(mc, HamiltonianId::HPlus, &z_minus, tau, 0.0, tol, false)?.z;
    let mut y2 = Unknowns::zeros(Structure::S2);
    y2.set_p0(&nalgebra::Vector3::new(back[3], back[4], back[5]));
    y2.set_tf(y1.tf());
    y2.set_time(1, tau);
    y2.set_time(2, tau);
    y2.set_jump(2, -z_tau[3]);
    y2.set_node(1, &z_minus);
    y2.set_node(2, &z_minus);
    Ok(y2)
}

/// Extremal of the three-arc structure touching the speed bound, rewritten
/// with a zero-length negative bang arc where the switching function has a
/// double zero and a costate jump at the contact point.
pub fn s3_from_contact(
    mc: &ModelConstants,
    y2: &Unknowns,
    tol: &Tolerances,
) -> Result<Unknowns, Error> {
    let tr = trajectory(mc, y2, tol)?;
    let last = &tr.arcs[2];
    let (t_guess, _) = last.dense.max_component(2);
    let z2p = y2.start(2);
    let t2 = y2.time(2);
    let (t5, _) = refine_root(
        mc,
        HamiltonianId::HPlus,
        &z2p,
        t2,
        t_guess,
        |z| vector_field(mc, HamiltonianId::HPlus, z)[2],
        tol,
    )?;
    let z_f = last.dense.eval(y2.tf());
    let z5p = expmap(mc, HamiltonianId::HPlus, &z_f, y2.tf(), t5, tol, false)?.z;

    // Backward arc from the contact point for a given jump.
    let back = |nu: f64| -> Result<crate::flow::DenseTrajectory, Error> {
        let mut z5 = z5p;
        z5[5] += nu;
        Ok(expmap(mc, HamiltonianId::HPlus, &z5, t5, t2, tol, true)?
            .dense
            .expect("dense"))
    };
    let min_phi = |nu: f64| -> Result<(f64, f64), Error> {
        let d = back(nu)?;
        let (t, p1) = d.min_component(3);
        Ok((t, p1))
    };
    // Bracket the jump for which min p1 on (t2, t5) reaches zero.
    let (_, m0) = min_phi(0.0)?;
    if m0 <= 0.0 {
        return Err(Error::Scenario(
            "switching function already vanishes before the contact".into(),
        ));
    }
    let mut lo = -0.1;
    while min_phi(lo)?.1 > 0.0 {
        lo *= 2.0;
        if lo < -1e4 {
            return Err(Error::Scenario(
                "no jump produces a fold of the switching function".into(),
            ));
        }
    }
    let mut hi = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if min_phi(mid)?.1 > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let nu5 = 0.5 * (lo + hi);
    let d = back(nu5)?;
    let (tau_g, _) = d.min_component(3);
    // Polish the fold time on H01 = 0 along the backward arc.
    let mut z5 = z5p;
    z5[5] += nu5;
    let (tau, z_tau) = refine_root(
        mc,
        HamiltonianId::HPlus,
        &z5,
        t5,
        tau_g,
        |z| lifts(mc, z).h01,
        tol,
    )?;
    let z_t2p = expmap(mc, HamiltonianId::HPlus, &z_tau, tau, t2, tol, false)?.z;

    let mut y3 = Unknowns::zeros(Structure::S3);
    y3.set_p0(&y2.p0());
    y3.set_tf(y2.tf());
    y3.set_time(1, y2.time(1));
    y3.set_time(2, t2);
    y3.set_node(1, &y2.node(1));
    let mut z2 = y2.node(2);
    z2[5] = z_t2p[5];
    y3.set_node(2, &z2);
    y3.set_jump(2, -z_t2p[3]);
    y3.set_time(3, tau);
    y3.set_time(4, tau);
    y3.set_node(3, &z_tau);
    y3.set_node(4, &z_tau);
    y3.set_time(5, t5);
    y3.set_node(5, &z5);
    y3.set_jump(5, nu5);
    Ok(y3)
}

/// Extremal ending on the speed bound, from the contact extremal whose last
/// bang arc runs along the bound.
///
/// At unit boundary control the negative bang arc ends on the equilibrium
/// `(x1_on_c3, 1)` of the positive flow, so the boundary arc starts at the
/// fourth switching time. The jump clears `p3` so that `p1 = p3 = 0` on it.
pub fn s4_from_s3(y3: &Unknowns) -> Unknowns {
    let mut y4 = Unknowns::zeros(Structure::S4);
    y4.set_p0(&y3.p0());
    y4.set_tf(y3.tf());
    for i in 1..=4 {
        y4.set_time(i, y3.time(i));
        y4.set_node(i, &y3.node(i));
    }
    y4.set_jump(2, y3.jump(2));
    y4.set_jump(4, y3.node(4)[5]);
    y4
}

/// Drops the empty positive bang arc after the current bound.
pub fn s5_from_s4(y4: &Unknowns) -> Unknowns {
    let mut y5 = Unknowns::zeros(Structure::S5);
    y5.set_p0(&y4.p0());
    y5.set_tf(y4.tf());
    y5.set_time(1, y4.time(1));
    y5.set_node(1, &y4.node(1));
    y5.set_time(2, y4.time(2));
    y5.set_node(2, &y4.node(2));
    y5.set_time(3, y4.time(4));
    y5.set_node(3, &y4.node(4));
    y5.set_jump(3, y4.jump(4));
    y5
}

/// The six homotopies of the two legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LegKind {
    H1,
    H2a,
    H2b,
    H3,
    H4,
    H5,
}

impl LegKind {
    pub const ALL: [LegKind; 6] = [
        LegKind::H1,
        LegKind::H2a,
        LegKind::H2b,
        LegKind::H3,
        LegKind::H4,
        LegKind::H5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LegKind::H1 => "h1",
            LegKind::H2a => "h2a",
            LegKind::H2b => "h2b",
            LegKind::H3 => "h3",
            LegKind::H4 => "h4",
            LegKind::H5 => "h5",
        }
    }

    pub fn structure(self) -> Structure {
        match self {
            LegKind::H1 => Structure::S1,
            LegKind::H2a | LegKind::H2b => Structure::S2,
            LegKind::H3 => Structure::S3,
            LegKind::H4 => Structure::S4,
            LegKind::H5 => Structure::S5,
        }
    }

    pub fn param(self) -> Param {
        match self {
            LegKind::H1 | LegKind::H2a => Param::Imax,
            _ => Param::Vmax,
        }
    }

    /// Arc that may start with zero length and must open along the leg.
    pub fn opening(self) -> Option<usize> {
        match self {
            LegKind::H2a => Some(1),
            LegKind::H3 => Some(3),
            _ => None,
        }
    }

    /// Name of the scalar whose sign change ends the leg.
    pub fn event(self) -> Option<&'static str> {
        match self {
            LegKind::H1 => Some("max_c1"),
            LegKind::H2b => Some("max_c3"),
            LegKind::H3 => Some("u_c3"),
            LegKind::H4 => Some("t3-t2"),
            LegKind::H2a | LegKind::H5 => None,
        }
    }
}

impl std::fmt::Display for LegKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        LegKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Scenario(format!("unknown homotopy `{s}`")))
    }
}

/// Structure-change monitor of a leg, evaluated at `(y, lambda)`.
fn event_monitor<'a>(
    kind: LegKind,
    base: &'a ModelConstants,
    tol: Tolerances,
) -> Option<Box<MonitorFn<'a>>> {
    let structure = kind.structure();
    let param = kind.param();
    let on = move |y: &DVector<f64>| Unknowns::zeros(structure).with_values(y.clone());
    match kind {
        LegKind::H1 | LegKind::H2b => {
            let component = if kind == LegKind::H1 { 0 } else { 2 };
            Some(Box::new(move |y: &DVector<f64>, l: f64| {
                max_constraint(&base.with_param(param, l)?, &on(y), component, &tol)
            }))
        }
        LegKind::H3 => Some(Box::new(move |_: &DVector<f64>, l: f64| {
            Ok(base.with_param(param, l)?.u_c3() - 1.0)
        })),
        LegKind::H4 => {
            let lay = Unknowns::zeros(structure).layout().clone();
            let (i2, i3) = (lay.nodes[1].time, lay.nodes[2].time);
            Some(Box::new(move |y: &DVector<f64>, _: f64| Ok(y[i3] - y[i2])))
        }
        LegKind::H2a | LegKind::H5 => None,
    }
}

/// Follows homotopy `kind` from the zero `y0` of `base` towards `target`,
/// stopping at the structure-change event when `stop_at_event` is set.
///
/// An empty opening arc at the start is split open first.
pub fn run_leg(
    kind: LegKind,
    base: &ModelConstants,
    y0: &Unknowns,
    target: f64,
    stop_at_event: bool,
    opts: &ScenarioOptions,
) -> Result<Leg, Error> {
    if y0.structure != kind.structure() {
        return Err(Error::Scenario(format!(
            "{kind} follows {} but the start is {}",
            kind.structure(),
            y0.structure
        )));
    }
    let name = kind.name();
    let param = kind.param();
    let lambda0 = base.param(param);
    let newton = &opts.newton;
    let mut h = Homotopy::new(name, kind.structure(), param, *base);
    h.tol = newton.flow;
    let fo = FollowOptions {
        lambda_scale: (lambda0 - target).abs().max(1.0),
        ..opts.follow
    };
    let monitor = if stop_at_event {
        event_monitor(kind, base, newton.flow)
    } else {
        None
    };
    let stop = Stop {
        target: Some(target),
        monitor: kind.event().zip(monitor.as_deref()),
    };
    info!(
        "{name}: following {} from {} = {lambda0}",
        kind.structure(),
        param.name()
    );
    let (y1, l1) = match kind.opening() {
        Some(arc) if y0.arc_length(arc) <= 1e-9 * y0.tf() => {
            step_off(&h, y0, lambda0, target, arc, newton)?
        }
        _ => (y0.clone(), lambda0),
    };
    let mut path = follow(&h, &y1.values, l1, &stop, &fo);
    if let PathEnd::Failed(msg) = &path.end {
        debug!("{name}: last point {:?}", path.y_end);
        return Err(Error::Continuation {
            lambda: path.lambda_end,
            reason: format!("{name}: {msg}"),
        });
    }
    if l1 != lambda0 {
        let mut first = path.points[0].clone();
        first.lambda = lambda0;
        first.y = y0.values.as_slice().to_vec();
        first.residual = h.residual(&y0.values, lambda0)?.norm();
        first.corrected = true;
        first.monitor = None;
        let shift = (&y1.values - &y0.values)
            .norm()
            .hypot((l1 - lambda0) / fo.lambda_scale);
        for p in &mut path.points {
            p.s += shift;
        }
        path.points.insert(0, first);
    }
    info!(
        "{name}: ended at {} = {} ({:?}, drift {:.2e})",
        param.name(),
        path.lambda_end,
        path.end,
        path.max_drift
    );
    Ok(Leg {
        name: name.into(),
        structure: kind.structure(),
        param,
        path,
    })
}

/// Solves slightly past the start so that `arc` opens, to leave a point
/// where the zero-length arc makes the path branch.
fn step_off(
    h: &Homotopy,
    y0: &Unknowns,
    lambda0: f64,
    target: f64,
    arc: usize,
    opts: &NewtonOptions,
) -> Result<(Unknowns, f64), Error> {
    for frac in [1e-3, 3e-3, 1e-2, 3e-2] {
        let l = lambda0 + frac * (target - lambda0);
        let mc = h.mc(l)?;
        // The new arc grows either linearly or like the square root of the
        // parameter step.
        for width in [0.0, frac, 0.3 * frac.sqrt(), frac.sqrt(), 3.0 * frac.sqrt()] {
            let mut guess = y0.clone();
            let d = width * y0.tf();
            guess.set_time(arc, y0.time(arc) - d);
            guess.set_time(arc + 1, y0.time(arc + 1) + d);
            let rep = solve(&mc, &guess, opts)?;
            if rep.converged && rep.unknowns.arc_length(arc) > 0.0 && rep.admissible() {
                return Ok((rep.unknowns, l));
            }
        }
    }
    Err(Error::Scenario(format!(
        "{}: arc {arc} does not open past {} = {lambda0}",
        h.name,
        h.param.name()
    )))
}

fn solved(
    mc: &ModelConstants,
    y: &Unknowns,
    opts: &NewtonOptions,
    what: &str,
) -> Result<SolveReport, Error> {
    let rep = solve(mc, y, opts)?;
    if !rep.converged {
        return Err(Error::Scenario(format!(
            "{what}: {} (residual {:.2e})",
            rep.message, rep.residual_norm
        )));
    }
    Ok(rep)
}

fn ended_on_event(leg: &Leg, what: &str) -> Result<f64, Error> {
    if leg.path.end != PathEnd::Event {
        return Err(Error::Scenario(format!("{}: {what}", leg.name)));
    }
    Ok(leg.path.lambda_end)
}

/// Rewrites an extremal at the end of leg `from` as the starting extremal
/// of the next leg, and polishes it when the rewrite is not exact.
pub fn next_structure(
    mc: &ModelConstants,
    y: &Unknowns,
    to: Structure,
    opts: &NewtonOptions,
) -> Result<Unknowns, Error> {
    let tol = &opts.flow;
    match (y.structure, to) {
        (Structure::S1, Structure::S2) => {
            let g = s2_from_contact(mc, y, tol)?;
            Ok(solved(mc, &g, opts, "S2 at the contact")?.unknowns)
        }
        (Structure::S2, Structure::S3) => s3_from_contact(mc, y, tol),
        (Structure::S3, Structure::S4) => {
            Ok(solved(mc, &s4_from_s3(y), opts, "S4 at unit boundary control")?.unknowns)
        }
        (Structure::S4, Structure::S5) => Ok(solved(
            mc,
            &s5_from_s4(y),
            opts,
            "S5 at the closing of the bang arc",
        )?
        .unknowns),
        (a, b) if a == b => Ok(y.clone()),
        (a, b) => Err(Error::Scenario(format!("no limit case from {a} to {b}"))),
    }
}

/// Results of the current leg.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImaxLeg {
    pub sol_start: SolveReport,
    pub imax_c1: f64,
    pub s1_limit: Unknowns,
    pub s2_limit: Unknowns,
    pub handoff: Handoff,
    pub sol_end: SolveReport,
    pub legs: Vec<Leg>,
}

pub fn run_imax_leg(car: &CarParams, opts: &ScenarioOptions) -> Result<ImaxLeg, Error> {
    let tol = opts.newton.flow;
    let base = ModelConstants::new(
        *car,
        Bounds {
            imax: opts.imax_start,
            vmax: opts.vmax_start,
            alphaf: opts.alphaf,
        },
    )?;
    let sol_start = multi_start_s1(&base, &opts.newton)?;
    info!("h1 start: tf = {:.6}", sol_start.unknowns.tf());

    let h1 = run_leg(
        LegKind::H1,
        &base,
        &sol_start.unknowns,
        opts.imax_end,
        true,
        opts,
    )?;
    let imax_c1 = ended_on_event(
        &h1,
        "reached the end of the leg without touching the current bound",
    )?;
    let mc_c1 = base.with_param(Param::Imax, imax_c1)?;
    let s1_limit = h1.end_unknowns();
    let s2_limit = next_structure(&mc_c1, &s1_limit, Structure::S2, &opts.newton)?;
    // Costates differ before the contact.
    let mut handoff = compare_extremals(&mc_c1, &s1_limit, &s2_limit, s2_limit.time(2), &tol)?;
    handoff.lambda = imax_c1;

    let h2a = run_leg(LegKind::H2a, &mc_c1, &s2_limit, opts.imax_end, false, opts)?;
    let mc_end = base.with_param(Param::Imax, opts.imax_end)?;
    let sol_end = solved(
        &mc_end,
        &h2a.end_unknowns(),
        &opts.newton,
        "S2 at the end of h2a",
    )?;
    Ok(ImaxLeg {
        sol_start,
        imax_c1,
        s1_limit,
        s2_limit,
        handoff,
        sol_end,
        legs: vec![h1, h2a],
    })
}

/// Results of the speed leg.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VmaxLeg {
    pub vmax_c3: f64,
    pub vmax_gamma_c3: f64,
    pub vmax_gamma_c3_oracle: f64,
    pub vmax_plus: f64,
    pub handoffs: Vec<Handoff>,
    /// Old and new extremal at each of the three structure changes.
    pub limits: Vec<Unknowns>,
    pub sol_end: SolveReport,
    pub legs: Vec<Leg>,
}

pub fn run_vmax_leg(
    car: &CarParams,
    sol_start: &Unknowns,
    opts: &ScenarioOptions,
) -> Result<VmaxLeg, Error> {
    let tol = opts.newton.flow;
    let base = ModelConstants::new(
        *car,
        Bounds {
            imax: opts.imax_end,
            vmax: opts.vmax_start,
            alphaf: opts.alphaf,
        },
    )?;
    let mut legs = Vec::new();
    let mut handoffs = Vec::new();
    let mut limits = Vec::new();
    let mut events = Vec::new();
    let mut mc = base;
    let mut y = sol_start.clone();
    let chain = [
        (LegKind::H2b, "never touched the speed bound"),
        (LegKind::H3, "never reached a unit boundary control"),
        (LegKind::H4, "never closed the positive bang arc"),
    ];
    for (kind, missing) in chain {
        let l = run_leg(kind, &mc, &y, opts.vmax_end, true, opts)?;
        let v = ended_on_event(&l, missing)?;
        mc = base.with_param(Param::Vmax, v)?;
        let old = l.end_unknowns();
        legs.push(l);
        let to = match old.structure {
            Structure::S2 => Structure::S3,
            Structure::S3 => Structure::S4,
            _ => Structure::S5,
        };
        let new = next_structure(&mc, &old, to, &opts.newton)?;
        // The last change keeps both extremals identical, costates included.
        let costate_from = if to == Structure::S5 {
            0.0
        } else {
            f64::INFINITY
        };
        let mut ho = compare_extremals(&mc, &old, &new, costate_from, &tol)?;
        ho.lambda = v;
        handoffs.push(ho);
        limits.push(old);
        limits.push(new.clone());
        events.push(v);
        y = new;
    }
    let h5 = run_leg(LegKind::H5, &mc, &y, opts.vmax_end, false, opts)?;
    let sol_end = solved(
        &base.with_param(Param::Vmax, opts.vmax_end)?,
        &h5.end_unknowns(),
        &opts.newton,
        "S5 at the end of h5",
    )?;
    legs.push(h5);
    Ok(VmaxLeg {
        vmax_c3: events[0],
        vmax_gamma_c3: events[1],
        vmax_gamma_c3_oracle: vmax_gamma_c3(car, opts.imax_end, opts.alphaf)?,
        vmax_plus: events[2],
        handoffs,
        limits,
        sol_end,
        legs,
    })
}

/// Final time of the single-arc extremal used as the horizon of the
/// bang-arc optimality scan.
pub const TBAR_F: f64 = 5.6156;

/// Outcome of the switching-function scan behind bang-arc optimality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaPlusReport {
    pub grid_n: usize,
    pub tbar: f64,
    /// Smallest `|Phi|` over the grid and over `[delta, tbar]`.
    pub min_abs_phi: f64,
    /// Terminal state where the minimum is reached.
    pub argmin: (f64, f64),
    pub zero_crossings: usize,
    /// Grid points whose integration failed, with the reason.
    pub failures: Vec<(f64, f64, String)>,
}

impl GammaPlusReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.zero_crossings == 0 && self.min_abs_phi > 0.0
    }
}

/// Flows `H+` backward from `z_f = (x_f, (0, 1, 0))` for `x_f` on a grid of
/// `[-1, 1] x {1} x [0, 1]` and scans the switching function on
/// `[delta, tbar]`, `delta = 1e-3 tbar`. A one-point grid uses `x_f = (0, 1, 0)`.
pub fn verify_gamma_plus(
    mc: &ModelConstants,
    grid_n: usize,
    tbar: f64,
    tol: &Tolerances,
) -> GammaPlusReport {
    let pts: Vec<(f64, f64)> = if grid_n <= 1 {
        vec![(0.0, 0.0)]
    } else {
        let g = |k: usize, a: f64, b: f64| a + (b - a) * k as f64 / (grid_n - 1) as f64;
        (0..grid_n)
            .flat_map(|i| (0..grid_n).map(move |j| (g(i, -1.0, 1.0), g(j, 0.0, 1.0))))
            .collect()
    };
    let delta = 1e-3 * tbar;
    let k7 = mc.k[6];
    let scan = |&(x1, x3): &(f64, f64)| -> Result<(f64, usize), (f64, f64, String)> {
        let zf = Phase::new(x1, 1.0, x3, 0.0, 1.0, 0.0);
        let r = expmap(mc, HamiltonianId::HPlus, &zf, 0.0, -tbar, tol, true)
            .map_err(|e| (x1, x3, e.to_string()))?;
        let d = r.dense.expect("dense requested");
        let n = 2000;
        let mut min_abs = f64::INFINITY;
        let mut crossings = 0;
        let mut prev = 0.0_f64;
        for k in 0..=n {
            let t = delta + (tbar - delta) * k as f64 / n as f64;
            let phi = k7 * d.eval(-t)[3];
            min_abs = min_abs.min(phi.abs());
            if k > 0 && phi.signum() != prev.signum() {
                crossings += 1;
            }
            prev = phi;
        }
        Ok((min_abs, crossings))
    };
    let res: Vec<_> = pts.par_iter().map(|p| (p, scan(p))).collect();
    let mut rep = GammaPlusReport {
        grid_n,
        tbar,
        min_abs_phi: f64::INFINITY,
        argmin: (f64::NAN, f64::NAN),
        zero_crossings: 0,
        failures: vec![],
    };
    for (p, r) in res {
        match r {
            Ok((m, c)) => {
                if m < rep.min_abs_phi {
                    rep.min_abs_phi = m;
                    rep.argmin = *p;
                }
                rep.zero_crossings += c;
            }
            Err(f) => rep.failures.push(f),
        }
    }
    rep
}

/// One row of the structure slice along the speed leg.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceRow {
    pub leg: String,
    pub vmax: f64,
    pub structure: Structure,
    pub label: String,
    pub tf: f64,
    pub times: Vec<f64>,
    pub jumps: Vec<f64>,
    pub residual: f64,
    pub admissible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceSummary {
    pub rows: Vec<SliceRow>,
    /// `tf` never decreases as `vmax` decreases.
    pub tf_monotone: bool,
    /// Range of `t3 - t2` along the last leg.
    pub last_gap: Option<(f64, f64)>,
    pub all_admissible: bool,
}

/// Tabulates the speed legs and checks every point for admissibility.
pub fn slice_report(
    base: &ModelConstants,
    legs: &[Leg],
    tol: &Tolerances,
) -> Result<SliceSummary, Error> {
    let mut rows = Vec::new();
    for l in legs.iter().filter(|l| l.param == Param::Vmax) {
        let adm = path_admissibility(base, l, tol)?;
        for (p, admissible) in l.path.points.iter().zip(adm) {
            let y = Unknowns::from_vec(l.structure, p.y.clone())?;
            let n = y.n_nodes();
            rows.push(SliceRow {
                leg: l.name.clone(),
                vmax: p.lambda,
                structure: l.structure,
                label: l.structure.label(),
                tf: y.tf(),
                times: (1..=n).map(|i| y.time(i)).collect(),
                jumps: (1..=n)
                    .filter(|&i| y.layout().nodes[i - 1].jump.is_some())
                    .map(|i| y.jump(i))
                    .collect(),
                residual: p.residual,
                admissible,
            });
        }
    }
    let mut sorted: Vec<&SliceRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.vmax.total_cmp(&a.vmax));
    let tf_monotone = sorted.windows(2).all(|w| w[1].tf >= w[0].tf - 1e-6);
    let last_gap = legs
        .iter()
        .rev()
        .find(|l| l.param == Param::Vmax && l.structure == Structure::S5)
        .map(|l| {
            l.path
                .points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let y = Unknowns::from_vec(l.structure, p.y.clone()).expect("layout");
                    let g = y.time(3) - y.time(2);
                    (lo.min(g), hi.max(g))
                })
        });
    let all_admissible = rows.iter().all(|r| r.admissible);
    Ok(SliceSummary {
        rows,
        tf_monotone,
        last_gap,
        all_admissible,
    })
}

/// `check_admissible` on every point of a leg. Uncorrected points are first
/// brought back to the zero at their `lambda`, since their residual is of
/// the order of the sign slack.
pub fn path_admissibility(
    base: &ModelConstants,
    leg: &Leg,
    tol: &Tolerances,
) -> Result<Vec<bool>, Error> {
    let mut h = Homotopy::new(&leg.name, leg.structure, leg.param, *base);
    h.tol = *tol;
    leg.path
        .points
        .par_iter()
        .map(|p| {
            let mc = base.with_param(leg.param, p.lambda)?;
            let mut y = DVector::from_column_slice(&p.y);
            if !p.corrected {
                let (yc, rc) = correct(&h, &y, p.lambda, CORRECTED_RESIDUAL, 10)?;
                if rc > CORRECTED_RESIDUAL {
                    return Ok(false);
                }
                y = yc;
            }
            let y = Unknowns::zeros(leg.structure).with_values(y);
            Ok(check_admissible(&mc, &y, tol)?.admissible)
        })
        .collect()
}

const CORRECTED_RESIDUAL: f64 = 1e-8;

/// Structure of the slice at `vmax`; at a hand-off value the earlier leg wins.
pub fn structure_at(slice: &SliceSummary, vmax: f64) -> Option<Structure> {
    let mut legs: Vec<(&str, Structure, f64, f64)> = Vec::new();
    for r in &slice.rows {
        match legs.last_mut() {
            Some(l) if l.0 == r.leg => {
                l.2 = l.2.min(r.vmax);
                l.3 = l.3.max(r.vmax);
            }
            _ => legs.push((&r.leg, r.structure, r.vmax, r.vmax)),
        }
    }
    legs.iter()
        .find(|l| vmax >= l.2 && vmax <= l.3)
        .map(|l| l.1)
}

pub fn write_slice_csv(path: &std::path::Path, slice: &SliceSummary) -> Result<(), Error> {
    let nt = slice.rows.iter().map(|r| r.times.len()).max().unwrap_or(0);
    let nj = slice.rows.iter().map(|r| r.jumps.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec![
        "leg".to_string(),
        "structure".into(),
        "label".into(),
        "vmax".into(),
        "tf".into(),
    ];
    head.extend((1..=nt).map(|i| format!("t{i}")));
    head.extend((1..=nj).map(|i| format!("jump{i}")));
    head.extend(["residual".to_string(), "admissible".into()]);
    w.write_record(&head)?;
    for r in &slice.rows {
        let mut rec = vec![
            r.leg.clone(),
            r.structure.to_string(),
            r.label.clone(),
            r.vmax.to_string(),
            r.tf.to_string(),
        ];
        rec.extend((0..nt).map(|i| r.times.get(i).map_or(String::new(), f64::to_string)));
        rec.extend((0..nj).map(|i| r.jumps.get(i).map_or(String::new(), f64::to_string)));
        rec.extend([r.residual.to_string(), r.admissible.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Health of one followed leg.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LegHealth {
    pub name: String,
    pub points: usize,
    pub lambda_end: f64,
    /// Largest residual of an uncorrected path point.
    pub max_drift: f64,
    /// Residual after Newton correction at the end of the leg.
    pub end_residual: f64,
}

impl From<&Leg> for LegHealth {
    fn from(l: &Leg) -> Self {
        Self {
            name: l.name.clone(),
            points: l.path.points.len(),
            lambda_end: l.path.lambda_end,
            max_drift: l.path.max_drift,
            end_residual: l.path.residual_end,
        }
    }
}

/// Thresholds and diagnostics of a scenario run. Missing values belong to
/// legs that failed or were skipped.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Milestones {
    pub tf_start: Option<f64>,
    pub p0_start: Option<[f64; 3]>,
    pub residual_start: Option<f64>,
    pub imax_c1: Option<f64>,
    pub vmax_c3: Option<f64>,
    pub vmax_gamma_c3: Option<f64>,
    pub vmax_gamma_c3_oracle: Option<f64>,
    pub vmax_plus: Option<f64>,
    /// Jump at the current bound exit when the positive arc closes.
    pub nu2_at_vmax_plus: Option<f64>,
    pub tf_end: Option<f64>,
    pub handoffs: Vec<Handoff>,
    pub legs: Vec<LegHealth>,
    pub tf_monotone: Option<bool>,
    pub slice_admissible: Option<bool>,
    pub last_gap: Option<(f64, f64)>,
    pub failures: Vec<String>,
    pub runtime_s: f64,
}

/// A full run at `imax` lowered to 150 then `vmax` lowered to 10.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub car: CarParams,
    pub options: ScenarioOptions,
    pub imax: Option<ImaxLeg>,
    pub vmax: Option<VmaxLeg>,
    pub slice: Option<SliceSummary>,
    pub milestones: Milestones,
}

impl ScenarioRun {
    pub fn legs(&self) -> impl Iterator<Item = &Leg> {
        self.imax
            .iter()
            .flat_map(|l| &l.legs)
            .chain(self.vmax.iter().flat_map(|l| &l.legs))
    }
}

/// Runs both legs. A failed leg is recorded and the legs after it skipped.
pub fn run_scenario(car: &CarParams, opts: &ScenarioOptions) -> ScenarioRun {
    let t0 = std::time::Instant::now();
    let tol = opts.newton.flow;
    let mut m = Milestones::default();
    let imax = match run_imax_leg(car, opts) {
        Ok(l) => Some(l),
        Err(e) => {
            m.failures.push(format!("current leg: {e}"));
            None
        }
    };
    let vmax = imax
        .as_ref()
        .and_then(|il| match run_vmax_leg(car, &il.sol_end.unknowns, opts) {
            Ok(l) => Some(l),
            Err(e) => {
                m.failures.push(format!("speed leg: {e}"));
                None
            }
        });
    if let Some(il) = &imax {
        let y = &il.sol_start.unknowns;
        m.tf_start = Some(y.tf());
        let p = y.p0();
        m.p0_start = Some([p[0], p[1], p[2]]);
        m.residual_start = Some(il.sol_start.residual_norm);
        m.imax_c1 = Some(il.imax_c1);
        m.handoffs.push(il.handoff);
        m.legs.extend(il.legs.iter().map(LegHealth::from));
    }
    if let Some(vl) = &vmax {
        m.vmax_c3 = Some(vl.vmax_c3);
        m.vmax_gamma_c3 = Some(vl.vmax_gamma_c3);
        m.vmax_gamma_c3_oracle = Some(vl.vmax_gamma_c3_oracle);
        m.vmax_plus = Some(vl.vmax_plus);
        m.nu2_at_vmax_plus = vl
            .legs
            .iter()
            .find(|l| l.name == "h4")
            .map(|l| l.end_unknowns().jump(2));
        m.tf_end = Some(vl.sol_end.unknowns.tf());
        m.handoffs.extend(vl.handoffs.iter().copied());
        m.legs.extend(vl.legs.iter().map(LegHealth::from));
    }
    let mut slice = None;
    if let Some(vl) = &vmax {
        let base = ModelConstants::new(
            *car,
            Bounds {
                imax: opts.imax_end,
                vmax: opts.vmax_start,
                alphaf: opts.alphaf,
            },
        );
        match base.and_then(|b| slice_report(&b, &vl.legs, &tol)) {
            Ok(s) => {
                m.tf_monotone = Some(s.tf_monotone);
                m.slice_admissible = Some(s.all_admissible);
                m.last_gap = s.last_gap;
                slice = Some(s);
            }
            Err(e) => m.failures.push(format!("slice: {e}")),
        }
    }
    m.runtime_s = t0.elapsed().as_secs_f64();
    ScenarioRun {
        car: *car,
        options: *opts,
        imax,
        vmax,
        slice,
        milestones: m,
    }
}

/// Named solutions written as trajectory files.
pub fn milestone_solutions(run: &ScenarioRun) -> Vec<(String, Bounds, Unknowns)> {
    let o = &run.options;
    let b = |imax: f64, vmax: f64| Bounds {
        imax,
        vmax,
        alphaf: o.alphaf,
    };
    let mut out = Vec::new();
    if let Some(il) = &run.imax {
        out.push((
            "s1_start".into(),
            b(o.imax_start, o.vmax_start),
            il.sol_start.unknowns.clone(),
        ));
        out.push((
            "s1_imax_c1".into(),
            b(il.imax_c1, o.vmax_start),
            il.s1_limit.clone(),
        ));
        out.push((
            "s2_imax_c1".into(),
            b(il.imax_c1, o.vmax_start),
            il.s2_limit.clone(),
        ));
        out.push((
            "s2_imax_end".into(),
            b(o.imax_end, o.vmax_start),
            il.sol_end.unknowns.clone(),
        ));
    }
    if let Some(vl) = &run.vmax {
        let names = [
            "s2_vmax_c3",
            "s3_vmax_c3",
            "s3_vmax_gamma_c3",
            "s4_vmax_gamma_c3",
            "s4_vmax_plus",
            "s5_vmax_plus",
        ];
        let at = [
            vl.vmax_c3,
            vl.vmax_c3,
            vl.vmax_gamma_c3,
            vl.vmax_gamma_c3,
            vl.vmax_plus,
            vl.vmax_plus,
        ];
        for ((n, v), y) in names.iter().zip(at).zip(&vl.limits) {
            out.push((n.to_string(), b(o.imax_end, v), y.clone()));
        }
        out.push((
            "s5_vmax_end".into(),
            b(o.imax_end, o.vmax_end),
            vl.sol_end.unknowns.clone(),
        ));
    }
    out
}

/// Writes `milestones.json`, `slice.csv`, one path CSV per leg and one
/// trajectory CSV per milestone solution into `dir`.
pub fn write_results(dir: &std::path::Path, run: &ScenarioRun) -> Result<(), Error> {
    use crate::io::{write_json, write_path_csv, write_trajectory_csv, SolutionFile};
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("milestones.json"), &run.milestones)?;
    if let Some(s) = &run.slice {
        write_slice_csv(&dir.join("slice.csv"), s)?;
    }
    let tol = run.options.newton.flow;
    for l in run.legs() {
        let bounds = if l.param == Param::Imax {
            Bounds {
                imax: run.options.imax_start,
                vmax: run.options.vmax_start,
                alphaf: run.options.alphaf,
            }
        } else {
            Bounds {
                imax: run.options.imax_end,
                vmax: run.options.vmax_start,
                alphaf: run.options.alphaf,
            }
        };
        let base = ModelConstants::new(run.car, bounds)?;
        let adm = path_admissibility(&base, l, &tol)?;
        write_path_csv(
            &dir.join(format!("path_{}.csv", l.name)),
            l.structure,
            &l.path.points,
            &adm,
        )?;
    }
    for (name, bounds, y) in milestone_solutions(run) {
        let mc = ModelConstants::new(run.car, bounds)?;
        let tr = trajectory(&mc, &y, &tol)?;
        write_trajectory_csv(&dir.join(format!("{name}.csv")), &mc, &tr, 200)?;
        let report = solve(&mc, &y, &run.options.newton)?;
        write_json(
            &dir.join(format!("{name}.json")),
            &SolutionFile {
                car: run.car,
                bounds,
                report,
            },
        )?;
    }
    Ok(())
}
