//! Arclength path following of `h(y, lambda) = 0`.
//!
//! The unit tangent spans the kernel of `[dh/dy | dh/dmu]` where
//! `mu = lambda / lambda_scale`. Paths are integrated with classical RK4 on
//! the tangent field without correction; steps are accepted on tangent
//! angle and residual drift, and the last point is Newton-corrected.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::flow::Tolerances;
use crate::model::{ModelConstants, Param};
use crate::shooting::{self, evaluate, Structure, Unknowns};
use crate::Error;

/// Residual, `dh/dy` and `dh/dlambda` at one point.
pub type Linearization = (DVector<f64>, DMatrix<f64>, DVector<f64>);

/// A one-parameter family of square nonlinear systems.
pub trait PathProblem: Sync {
    fn dim(&self) -> usize;
    fn residual(&self, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>, Error>;
    fn linearize(&self, y: &DVector<f64>, lambda: f64) -> Result<Linearization, Error>;
}

/// Shooting system with one bound released.
#[derive(Debug, Clone)]
pub struct Homotopy {
    pub name: String,
    pub structure: Structure,
    pub param: Param,
    pub base: ModelConstants,
    pub tol: Tolerances,
}

impl Homotopy {
    pub fn new(name: &str, structure: Structure, param: Param, base: ModelConstants) -> Self {
        Self {
            name: name.into(),
            structure,
            param,
            base,
            tol: Tolerances::default(),
        }
    }

    pub fn mc(&self, lambda: f64) -> Result<ModelConstants, Error> {
        self.base.with_param(self.param, lambda)
    }

    pub fn unknowns(&self, y: &DVector<f64>) -> Unknowns {
        Unknowns::zeros(self.structure).with_values(y.clone())
    }
}

impl PathProblem for Homotopy {
    fn dim(&self) -> usize {
        self.structure.dim()
    }

    fn residual(&self, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>, Error> {
        shooting::residual(&self.mc(lambda)?, &self.unknowns(y), &self.tol)
    }

    fn linearize(&self, y: &DVector<f64>, lambda: f64) -> Result<Linearization, Error> {
        let ev = evaluate(
            &self.mc(lambda)?,
            &self.unknowns(y),
            &self.tol,
            true,
            Some(self.param),
        )?;
        Ok((
            ev.residual,
            ev.jacobian.expect("requested"),
            ev.param.expect("requested"),
        ))
    }
}

/// Orientation of the first tangent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Orientation {
    LambdaDecreasing,
    LambdaIncreasing,
    /// Sign imposed on one component of `y` (useful at a turning point).
    Component {
        index: usize,
        positive: bool,
    },
}

/// Unit tangent in scaled coordinates `(y, mu)`. With `prev` the bordered
/// system keeps the orientation; otherwise the kernel comes from an SVD.
pub fn tangent_scaled(
    jy: &DMatrix<f64>,
    jl: &DVector<f64>,
    scale: f64,
    prev: Option<&DVector<f64>>,
    orientation: Orientation,
) -> Result<DVector<f64>, Error> {
    let n = jy.nrows();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(jy);
    a.view_mut((0, n), (n, 1)).copy_from(&(jl * scale));
    let t = if let Some(p) = prev {
        a.row_mut(n).copy_from(&p.transpose());
        let mut rhs = DVector::zeros(n + 1);
        rhs[n] = 1.0;
        a.lu()
            .solve(&rhs)
            .ok_or(Error::Singular("bordered tangent system"))?
    } else {
        let svd = a.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
        // The padded zero row always contributes one zero singular value.
        if n > 0 && sv[order[1]] <= 1e-12 * sv[order[n]] {
            return Err(Error::Singular("rank-deficient path jacobian"));
        }
        let mut t: DVector<f64> = vt.row(order[0]).transpose();
        let flip = match orientation {
            Orientation::LambdaDecreasing => t[n] > 0.0,
            Orientation::LambdaIncreasing => t[n] < 0.0,
            Orientation::Component { index, positive } => (t[index] > 0.0) != positive,
        };
        if flip {
            t = -t;
        }
        t
    };
    let norm = t.norm();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Singular("degenerate tangent"));
    }
    Ok(t / norm)
}

/// Unit tangent in unscaled `(y, lambda)` coordinates.
pub fn tangent<P: PathProblem>(
    p: &P,
    y: &DVector<f64>,
    lambda: f64,
    prev: Option<&DVector<f64>>,
    orientation: Orientation,
) -> Result<DVector<f64>, Error> {
    let (_, jy, jl) = p.linearize(y, lambda)?;
    tangent_scaled(&jy, &jl, 1.0, prev, orientation)
}

/// Damped Newton on `y` at fixed `lambda`. Returns the corrected point and
/// its residual norm.
pub fn correct<P: PathProblem>(
    p: &P,
    y0: &DVector<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, f64), Error> {
    let mut y = y0.clone();
    let mut r = p.residual(&y, lambda)?;
    let mut norm = r.norm();
    for _ in 0..max_iter {
        if norm <= tol {
            break;
        }
        let (_, jy, _) = p.linearize(&y, lambda)?;
        let dx = jy
            .lu()
            .solve(&(-&r))
            .ok_or(Error::Singular("newton correction"))?;
        let mut alpha = 1.0;
        loop {
            let yt = &y + alpha * &dx;
            if let Ok(rt) = p.residual(&yt, lambda) {
                let nt = rt.norm();
                if nt <= (1.0 - 1e-4 * alpha) * norm {
                    y = yt;
                    r = rt;
                    norm = nt;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-14 {
                return Ok((y, norm));
            }
        }
    }
    Ok((y, norm))
}

/// Scalar whose sign change marks a structure change.
pub type MonitorFn<'a> = dyn Fn(&DVector<f64>, f64) -> Result<f64, Error> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowOptions {
    /// Initial step in scaled arclength.
    pub ds0: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    /// Range of `lambda` used to balance the arclength.
    pub lambda_scale: f64,
    /// Newton-correct every accepted point (off by default).
    pub correct_each_step: bool,
    /// Largest residual accepted on an uncorrected point.
    pub drift_ceiling: f64,
    pub max_steps: usize,
    pub orientation: Orientation,
    /// Residual target of the endpoint and event corrections.
    pub newton_tol: f64,
    /// Event localization width in `lambda`.
    pub event_tol: f64,
}

impl Default for FollowOptions {
    fn default() -> Self {
        Self {
            ds0: 0.1,
            ds_min: 1e-7,
            ds_max: 0.4,
            lambda_scale: 1.0,
            correct_each_step: false,
            drift_ceiling: 1e-5,
            max_steps: 20_000,
            orientation: Orientation::LambdaDecreasing,
            newton_tol: 1e-8,
            event_tol: 1e-4,
        }
    }
}

/// Stop rule of a path.
pub struct Stop<'a> {
    pub target: Option<f64>,
    pub monitor: Option<(&'a str, &'a MonitorFn<'a>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathPoint {
    pub s: f64,
    pub lambda: f64,
    pub y: Vec<f64>,
    /// Unit tangent in scaled coordinates.
    pub tangent: Vec<f64>,
    /// Residual norm before any correction.
    pub residual: f64,
    pub corrected: bool,
    pub monitor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub kind: String,
    pub lambda: f64,
    pub y: Vec<f64>,
    pub residual: f64,
    pub monitor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PathEnd {
    Target,
    Event,
    Failed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathResult {
    pub points: Vec<PathPoint>,
    pub event: Option<Event>,
    pub end: PathEnd,
    /// Endpoint after correction.
    pub y_end: Vec<f64>,
    pub lambda_end: f64,
    pub residual_end: f64,
    /// Largest uncorrected residual along the path.
    pub max_drift: f64,
}

struct Sample {
    y: DVector<f64>,
    lambda: f64,
    t: DVector<f64>,
    monitor: Option<f64>,
}

/// Follows the path from a zero `(y0, lambda0)` until the target, a sign
/// change of the monitor, or failure.
pub fn follow<P: PathProblem>(
    p: &P,
    y0: &DVector<f64>,
    lambda0: f64,
    stop: &Stop,
    opts: &FollowOptions,
) -> PathResult {
    let scale = opts.lambda_scale;
    let n = p.dim();
    let pack = |y: &DVector<f64>, l: f64| {
        let mut v = DVector::zeros(n + 1);
        v.rows_mut(0, n).copy_from(y);
        v[n] = l / scale;
        v
    };
    let unpack = |v: &DVector<f64>| (v.rows(0, n).into_owned(), v[n] * scale);
    let tan_at =
        |v: &DVector<f64>, prev: Option<&DVector<f64>>| -> Result<(DVector<f64>, f64), Error> {
            let (y, l) = unpack(v);
            let (r, jy, jl) = p.linearize(&y, l)?;
            Ok((
                tangent_scaled(&jy, &jl, scale, prev, opts.orientation)?,
                r.norm(),
            ))
        };
    let monitor = |y: &DVector<f64>, l: f64| stop.monitor.map(|(_, m)| m(y, l)).transpose();

    let mut points = Vec::new();
    let fail =
        |points: Vec<PathPoint>, y: &DVector<f64>, l: f64, drift: f64, msg: String| PathResult {
            points,
            event: None,
            end: PathEnd::Failed(msg),
            y_end: y.as_slice().to_vec(),
            lambda_end: l,
            residual_end: f64::NAN,
            max_drift: drift,
        };

    let (t0, r0) = match tan_at(&pack(y0, lambda0), None) {
        Ok(v) => v,
        Err(e) => return fail(points, y0, lambda0, f64::NAN, e.to_string()),
    };
    let m0 = match monitor(y0, lambda0) {
        Ok(m) => m,
        Err(e) => return fail(points, y0, lambda0, r0, e.to_string()),
    };
    let mut cur = Sample {
        y: y0.clone(),
        lambda: lambda0,
        t: t0,
        monitor: m0,
    };
    let mut s = 0.0;
    let mut max_drift = r0;
    let push = |points: &mut Vec<PathPoint>, c: &Sample, s: f64, r: f64, corrected: bool| {
        points.push(PathPoint {
            s,
            lambda: c.lambda,
            y: c.y.as_slice().to_vec(),
            tangent: c.t.as_slice().to_vec(),
            residual: r,
            corrected,
            monitor: c.monitor,
        })
    };
    push(&mut points, &cur, s, r0, false);
    let mut ds = opts.ds0;

    for _ in 0..opts.max_steps {
        if ds < opts.ds_min {
            return fail(
                points,
                &cur.y,
                cur.lambda,
                max_drift,
                format!("step size below {:e}", opts.ds_min),
            );
        }
        let step = rk4_step(&pack(&cur.y, cur.lambda), &cur.t, ds, &tan_at);
        let (v_new, t_new, r_new) = match step {
            Ok(v) => v,
            Err(e) => {
                debug!("{}: step {ds:.3e} rejected ({e})", n);
                ds *= 0.5;
                continue;
            }
        };
        let cosang = cur.t.dot(&t_new);
        if cosang < 0.99 {
            ds *= 0.5;
            continue;
        }
        let (mut y_new, l_new) = unpack(&v_new);
        let mut corrected = false;
        // Accumulated drift is removed by a correction at fixed lambda; the
        // step is only shortened when that fails.
        if r_new > opts.drift_ceiling {
            match correct(p, &y_new, l_new, opts.newton_tol, 10) {
                Ok((yc, rc)) if rc <= opts.newton_tol => {
                    y_new = yc;
                    corrected = true;
                }
                _ => {
                    ds *= 0.5;
                    continue;
                }
            }
        }
        // Shorten the step so that it lands on the target.
        if let Some(target) = stop.target {
            if (l_new - target) * (cur.lambda - target) < 0.0 {
                let frac = (target - cur.lambda) / (l_new - cur.lambda);
                let ds_t = ds * frac;
                match rk4_step(&pack(&cur.y, cur.lambda), &cur.t, ds_t, &tan_at) {
                    Ok((v, t, r)) => {
                        let (y, l) = unpack(&v);
                        max_drift = max_drift.max(r);
                        s += ds_t;
                        let last = Sample {
                            y,
                            lambda: l,
                            t,
                            monitor: None,
                        };
                        // Land exactly on the target with the nearby point as guess.
                        let landed = correct(p, &last.y, target, opts.newton_tol, 30);
                        match &landed {
                            Ok((yc, rc)) => {
                                let t = tan_at(&pack(yc, target), Some(&last.t))
                                    .map_or(last.t.clone(), |(t, _)| t);
                                let at = Sample {
                                    y: yc.clone(),
                                    lambda: target,
                                    t,
                                    monitor: None,
                                };
                                push(&mut points, &at, s, *rc, true);
                            }
                            Err(_) => push(&mut points, &last, s, r, false),
                        }
                        return match landed {
                            Ok((yc, rc)) => PathResult {
                                points,
                                event: None,
                                end: if rc <= opts.newton_tol {
                                    PathEnd::Target
                                } else {
                                    PathEnd::Failed(format!(
                                        "endpoint correction stalled at {rc:.2e}"
                                    ))
                                },
                                y_end: yc.as_slice().to_vec(),
                                lambda_end: target,
                                residual_end: rc,
                                max_drift,
                            },
                            Err(e) => fail(points, &last.y, target, max_drift, e.to_string()),
                        };
                    }
                    Err(_) => {
                        ds *= 0.5;
                        continue;
                    }
                }
            }
        }
        if opts.correct_each_step && !corrected {
            if let Ok((yc, _)) = correct(p, &y_new, l_new, opts.newton_tol, 10) {
                y_new = yc;
                corrected = true;
            }
        }
        let m_new = match monitor(&y_new, l_new) {
            Ok(m) => m,
            Err(_) => {
                ds *= 0.5;
                continue;
            }
        };
        let next = Sample {
            y: y_new,
            lambda: l_new,
            t: t_new,
            monitor: m_new,
        };
        max_drift = max_drift.max(r_new);
        s += ds;
        push(&mut points, &next, s, r_new, corrected);
        debug!(
            "lambda = {l_new:.8}, ds = {ds:.2e}, residual = {r_new:.2e}, monitor = {:?}",
            next.monitor
        );
        if let (Some(a), Some(b), Some((kind, mon))) = (cur.monitor, next.monitor, stop.monitor) {
            if a.signum() != b.signum() {
                return match locate_event(p, kind, mon, &cur, &next, opts) {
                    Ok(ev) => {
                        // The point past the event belongs to another structure.
                        points.pop();
                        let w = (ev.lambda - cur.lambda) / (next.lambda - cur.lambda);
                        let y = DVector::from_column_slice(&ev.y);
                        let t = tan_at(&pack(&y, ev.lambda), Some(&cur.t))
                            .map_or(cur.t.clone(), |(t, _)| t);
                        let at = Sample {
                            y,
                            lambda: ev.lambda,
                            t,
                            monitor: Some(ev.monitor),
                        };
                        push(&mut points, &at, s - ds + w * ds, ev.residual, true);
                        PathResult {
                            points,
                            y_end: ev.y.clone(),
                            lambda_end: ev.lambda,
                            residual_end: ev.residual,
                            event: Some(ev),
                            end: PathEnd::Event,
                            max_drift,
                        }
                    }
                    Err(e) => fail(
                        points,
                        &next.y,
                        next.lambda,
                        max_drift,
                        format!("event localization: {e}"),
                    ),
                };
            }
        }
        cur = next;
        if cosang > 0.999 {
            ds = (2.0 * ds).min(opts.ds_max);
        }
    }
    fail(
        points,
        &cur.y,
        cur.lambda,
        max_drift,
        "step budget exhausted".into(),
    )
}

type TanFn<'a> =
    dyn Fn(&DVector<f64>, Option<&DVector<f64>>) -> Result<(DVector<f64>, f64), Error> + 'a;

fn rk4_step(
    v: &DVector<f64>,
    t1: &DVector<f64>,
    ds: f64,
    tan_at: &TanFn,
) -> Result<(DVector<f64>, DVector<f64>, f64), Error> {
    let (t2, _) = tan_at(&(v + 0.5 * ds * t1), Some(t1))?;
    let (t3, _) = tan_at(&(v + 0.5 * ds * &t2), Some(&t2))?;
    let (t4, _) = tan_at(&(v + ds * &t3), Some(&t3))?;
    let v_new = v + ds / 6.0 * (t1 + 2.0 * t2 + 2.0 * t3 + &t4);
    let (t_new, r) = tan_at(&v_new, Some(&t4))?;
    Ok((v_new, t_new, r))
}

/// Bisection on `lambda` with a solve at every probe, followed by secant
/// refinement on the monitor.
fn locate_event<P: PathProblem>(
    p: &P,
    kind: &str,
    mon: &MonitorFn,
    a: &Sample,
    b: &Sample,
    opts: &FollowOptions,
) -> Result<Event, Error> {
    let guess = |l: f64| {
        let w = if b.lambda == a.lambda {
            0.5
        } else {
            (l - a.lambda) / (b.lambda - a.lambda)
        };
        &a.y + (&b.y - &a.y) * w
    };
    let probe = |l: f64, y: &DVector<f64>| -> Result<(DVector<f64>, f64, f64), Error> {
        let (yc, r) = correct(p, y, l, opts.newton_tol, 30)?;
        if r > opts.newton_tol {
            return Err(Error::Continuation {
                lambda: l,
                reason: format!("probe residual {r:.2e}"),
            });
        }
        Ok((yc.clone(), mon(&yc, l)?, r))
    };
    let (mut la, mut lb) = (a.lambda, b.lambda);
    let (mut ya, ga, _) = probe(la, &a.y)?;
    let (mut yb, mut gb, _) = probe(lb, &b.y)?;
    let mut ga = ga;
    if ga.signum() == gb.signum() {
        return Err(Error::NoBracket {
            what: "monitor",
            lo: la.min(lb),
            hi: la.max(lb),
        });
    }
    while (lb - la).abs() > opts.event_tol {
        let lm = 0.5 * (la + lb);
        let wa = (lm - la) / (lb - la);
        let (ym, gm, _) =
            probe(lm, &(&ya + (&yb - &ya) * wa)).or_else(|_| probe(lm, &guess(lm)))?;
        if gm.signum() == ga.signum() {
            la = lm;
            ya = ym;
            ga = gm;
        } else {
            lb = lm;
            yb = ym;
            gb = gm;
        }
    }
    // Secant (regula falsi) on the smooth monitor.
    let mut best = if ga.abs() < gb.abs() {
        (la, ya.clone(), ga)
    } else {
        (lb, yb.clone(), gb)
    };
    for _ in 0..20 {
        if best.2.abs() < 1e-11 || (lb - la).abs() < 1e-13 * la.abs().max(1.0) {
            break;
        }
        let lm = la - ga * (lb - la) / (gb - ga);
        let wa = (lm - la) / (lb - la);
        let Ok((ym, gm, _)) = probe(lm, &(&ya + (&yb - &ya) * wa)) else {
            break;
        };
        if gm.abs() < best.2.abs() {
            best = (lm, ym.clone(), gm);
        }
        if gm.signum() == ga.signum() {
            la = lm;
            ya = ym;
            ga = gm;
        } else {
            lb = lm;
            yb = ym;
            gb = gm;
        }
    }
    let (l, y, g) = best;
    let r = p.residual(&y, l)?.norm();
    Ok(Event {
        kind: kind.into(),
        lambda: l,
        y: y.as_slice().to_vec(),
        residual: r,
        monitor: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Toy<F: Fn(f64, f64) -> (f64, f64, f64) + Sync>(F);

    impl<F: Fn(f64, f64) -> (f64, f64, f64) + Sync> PathProblem for Toy<F> {
        fn dim(&self) -> usize {
            1
        }
        fn residual(&self, y: &DVector<f64>, l: f64) -> Result<DVector<f64>, Error> {
            Ok(DVector::from_element(1, (self.0)(y[0], l).0))
        }
        fn linearize(&self, y: &DVector<f64>, l: f64) -> Result<Linearization, Error> {
            let (h, hy, hl) = (self.0)(y[0], l);
            Ok((
                DVector::from_element(1, h),
                DMatrix::from_element(1, 1, hy),
                DVector::from_element(1, hl),
            ))
        }
    }

    #[test]
    fn linear_toy_tangent() {
        let p = Toy(|y, l| (y - l, 1.0, -1.0));
        let t = tangent(
            &p,
            &DVector::from_element(1, 1.0),
            1.0,
            None,
            Orientation::LambdaIncreasing,
        )
        .unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((t[0] - r).abs() < 1e-12 && (t[1] - r).abs() < 1e-12);
    }

    #[test]
    fn parabola_toy_tangent_and_follow() {
        let p = Toy(|y, l| (y * y - l, 2.0 * y, -1.0));
        let y0 = DVector::from_element(1, 1.0);
        let t = tangent(&p, &y0, 1.0, None, Orientation::LambdaIncreasing).unwrap();
        let r5 = 5f64.sqrt();
        assert!((t[0] - 1.0 / r5).abs() < 1e-12 && (t[1] - 2.0 / r5).abs() < 1e-12);
        let opts = FollowOptions {
            orientation: Orientation::LambdaIncreasing,
            ..Default::default()
        };
        let res = follow(
            &p,
            &y0,
            1.0,
            &Stop {
                target: Some(4.0),
                monitor: None,
            },
            &opts,
        );
        assert_eq!(res.end, PathEnd::Target);
        assert!((res.y_end[0] - 2.0).abs() < 1e-6);
        for w in res.points.windows(2) {
            let a = DVector::from_vec(w[0].tangent.clone());
            let b = DVector::from_vec(w[1].tangent.clone());
            assert!(a.dot(&b) > 0.0);
        }
    }

    #[test]
    fn turning_point_is_passed() {
        // y^2 + l = 1 turns at l = 1; start on the lower branch going up in l.
        let p = Toy(|y, l| (y * y + l - 1.0, 2.0 * y, 1.0));
        let y0 = DVector::from_element(1, -1.0);
        let opts = FollowOptions {
            orientation: Orientation::LambdaIncreasing,
            ..Default::default()
        };
        let res = follow(
            &p,
            &y0,
            0.0,
            &Stop {
                target: Some(-3.0),
                monitor: None,
            },
            &opts,
        );
        assert_eq!(res.end, PathEnd::Target);
        assert!((res.y_end[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn event_is_localized_by_bisection() {
        let p = Toy(|y, l| (y - l * l, 1.0, -2.0 * l));
        let mon = |y: &DVector<f64>, _l: f64| Ok(y[0] - 2.0);
        let stop = Stop {
            target: Some(5.0),
            monitor: Some(("y=2", &mon)),
        };
        let opts = FollowOptions {
            orientation: Orientation::LambdaIncreasing,
            ..Default::default()
        };
        let res = follow(&p, &DVector::from_element(1, 1.0), 1.0, &stop, &opts);
        assert_eq!(res.end, PathEnd::Event);
        assert!((res.lambda_end - 2f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn singular_start_is_reported() {
        let p = Toy(|_, _| (0.0, 0.0, 0.0));
        assert!(tangent(
            &p,
            &DVector::from_element(1, 0.0),
            0.0,
            None,
            Orientation::LambdaDecreasing
        )
        .is_err());
    }
}
