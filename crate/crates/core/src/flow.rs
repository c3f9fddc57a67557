//! Dormand–Prince 5(4) integration of Hamiltonian flows.
//!
//! The integrator works on fixed-size vectors so the phase point, its
//! state-transition matrix and an optional parameter sensitivity column are
//! advanced together under one error control.

use nalgebra::{Matrix6, SVector};

use crate::hamiltonians::{
    field_jacobian, field_param_derivative, vector_field, HamiltonianId, Phase,
};
use crate::model::{ModelConstants, Param};
use crate::Error;

/// Integration tolerances.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rel: 1e-10,
            abs: 1e-10,
            max_steps: 200_000,
        }
    }
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Self {
            rel: tol,
            abs: tol,
            ..Self::default()
        }
    }
}

/// Step counters of one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evals: usize,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction). The
/// observer sees every accepted step as `(t, y, f(t, y))`, starting with the
/// initial point.
pub fn dopri5<const N: usize, F, O>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: SVector<f64, N>,
    tol: &Tolerances,
    mut observe: O,
) -> Result<(SVector<f64, N>, FlowStats), Error>
where
    F: FnMut(f64, &SVector<f64, N>) -> SVector<f64, N>,
    O: FnMut(f64, &SVector<f64, N>, &SVector<f64, N>),
{
    let mut stats = FlowStats::default();
    let mut t = t0;
    let mut y = y0;
    let mut k0 = f(t, &y);
    stats.evals += 1;
    observe(t, &y, &k0);
    let span = t1 - t0;
    if span == 0.0 {
        return Ok((y, stats));
    }
    if !span.is_finite() {
        return Err(Error::Integration {
            t: t0,
            reason: "non-finite time span".into(),
        });
    }
    let dir = span.signum();
    let scale = |a: &SVector<f64, N>, b: &SVector<f64, N>| -> SVector<f64, N> {
        SVector::from_fn(|i, _| tol.abs + tol.rel * a[i].abs().max(b[i].abs()))
    };
    // Max norm: an RMS norm lets the error pile up in one component and the
    // level drifts past 1e-9 on long bang arcs.
    let norm = |v: &SVector<f64, N>, sk: &SVector<f64, N>| -> f64 { v.component_div(sk).amax() };

    // Initial step size heuristic.
    let mut h = {
        let sk = scale(&y, &y);
        let d0 = norm(&y, &sk);
        let d1 = norm(&k0, &sk);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let h0 = h0.min(span.abs());
        let y1 = y + dir * h0 * k0;
        let k1 = f(t + dir * h0, &y1);
        stats.evals += 1;
        let d2 = norm(&(k1 - k0), &sk) / h0;
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dm).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span.abs())
    };

    let beta = 0.04;
    let expo1 = 0.2 - beta * 0.75;
    let (fac_min, fac_max, safe) = (0.2, 10.0, 0.9);
    let mut fac_old = 1e-4_f64;
    let mut last_rejected = false;
    let h_floor = 1e-14 * (t0.abs().max(t1.abs()).max(1.0));

    loop {
        if stats.accepted + stats.rejected >= tol.max_steps {
            return Err(Error::Integration {
                t,
                reason: format!("step budget of {} exhausted", tol.max_steps),
            });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = dir * h;
        let mut k = [SVector::<f64, N>::zeros(); 7];
        k[0] = k0;
        for s in 1..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    ys += hs * A[s][j] * kj;
                }
            }
            k[s] = f(t + C[s] * hs, &ys);
        }
        stats.evals += 6;
        let mut y_new = y;
        for j in 0..6 {
            if A[6][j] != 0.0 {
                y_new += hs * A[6][j] * k[j];
            }
        }
        let mut err_v = SVector::<f64, N>::zeros();
        for j in 0..7 {
            if E[j] != 0.0 {
                err_v += hs * E[j] * k[j];
            }
        }
        let err = norm(&err_v, &scale(&y, &y_new));
        if !err.is_finite() || !y_new.iter().all(|v| v.is_finite()) {
            stats.rejected += 1;
            h *= 0.25;
            last_rejected = true;
            if h < h_floor {
                return Err(Error::Integration {
                    t,
                    reason: "non-finite state".into(),
                });
            }
            continue;
        }
        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(beta) / safe).clamp(1.0 / fac_max, 1.0 / fac_min);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err.max(1e-4);
            t = if last { t1 } else { t + hs };
            y = y_new;
            k0 = k[6];
            stats.accepted += 1;
            observe(t, &y, &k0);
            if last {
                return Ok((y, stats));
            }
            h = h_new;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h /= (fac11 / safe).min(1.0 / fac_min);
            last_rejected = true;
            if h < h_floor {
                return Err(Error::Integration {
                    t,
                    reason: "step size underflow".into(),
                });
            }
        }
    }
}

/// Accepted steps of a phase trajectory with cubic Hermite interpolation.
#[derive(Debug, Clone, Default)]
pub struct DenseTrajectory {
    pub t: Vec<f64>,
    pub z: Vec<Phase>,
    pub dz: Vec<Phase>,
}

impl DenseTrajectory {
    fn push(&mut self, t: f64, z: Phase, dz: Phase) {
        self.t.push(t);
        self.z.push(z);
        self.dz.push(dz);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.t[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.t.last().expect("non-empty trajectory")
    }

    /// Index `i` of the step `[t_i, t_{i+1}]` containing `t`, clamped.
    fn segment(&self, t: f64) -> usize {
        let n = self.t.len();
        if n < 2 {
            return 0;
        }
        let forward = self.t[n - 1] >= self.t[0];
        let idx = if forward {
            self.t.partition_point(|&s| s <= t)
        } else {
            self.t.partition_point(|&s| s >= t)
        };
        idx.clamp(1, n - 1) - 1
    }

    /// Cubic Hermite interpolant on the step `i` at `t`.
    pub fn hermite(&self, i: usize, t: f64) -> Phase {
        let (ta, tb) = (self.t[i], self.t[i + 1]);
        let h = tb - ta;
        if h == 0.0 {
            return self.z[i];
        }
        let s = (t - ta) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        self.z[i] * h00 + self.dz[i] * (h10 * h) + self.z[i + 1] * h01 + self.dz[i + 1] * (h11 * h)
    }

    pub fn eval(&self, t: f64) -> Phase {
        if self.t.len() == 1 {
            return self.z[0];
        }
        self.hermite(self.segment(t), t)
    }

    /// Maximum of one component over the trajectory as `(t, value)`.
    /// Each cubic piece is maximized exactly.
    pub fn max_component(&self, c: usize) -> (f64, f64) {
        self.extremum(c, 1.0)
    }

    /// Minimum of one component over the trajectory as `(t, value)`.
    pub fn min_component(&self, c: usize) -> (f64, f64) {
        let (t, v) = self.extremum(c, -1.0);
        (t, -v)
    }

    // Maximum of `sign * z[c]`.
    fn extremum(&self, c: usize, sign: f64) -> (f64, f64) {
        let mut best = (self.t[0], sign * self.z[0][c]);
        let mut consider = |t: f64, v: f64| {
            if sign * v > best.1 {
                best = (t, sign * v);
            }
        };
        for i in 0..self.t.len() {
            consider(self.t[i], self.z[i][c]);
        }
        for i in 0..self.t.len().saturating_sub(1) {
            let (ta, tb) = (self.t[i], self.t[i + 1]);
            let h = tb - ta;
            if h == 0.0 {
                continue;
            }
            // Derivative of the cubic in s is a quadratic a s^2 + b s + c.
            let (y0, y1) = (self.z[i][c], self.z[i + 1][c]);
            let (m0, m1) = (self.dz[i][c] * h, self.dz[i + 1][c] * h);
            let a = 3.0 * (2.0 * y0 + m0 - 2.0 * y1 + m1);
            let b = 2.0 * (-3.0 * y0 - 2.0 * m0 + 3.0 * y1 - m1);
            let cc = m0;
            let mut roots = [f64::NAN; 2];
            if a.abs() < 1e-300 {
                if b != 0.0 {
                    roots[0] = -cc / b;
                }
            } else {
                let disc = b * b - 4.0 * a * cc;
                if disc >= 0.0 {
                    let q = -0.5 * (b + b.signum() * disc.sqrt());
                    roots[0] = q / a;
                    if q != 0.0 {
                        roots[1] = cc / q;
                    }
                }
            }
            for s in roots {
                if s.is_finite() && s > 0.0 && s < 1.0 {
                    let t = ta + s * h;
                    consider(t, self.hermite(i, t)[c]);
                }
            }
        }
        best
    }
}

/// Endpoint of a flow plus optional variational data.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub z: Phase,
    /// `d z(t1) / d z(t0)`.
    pub stm: Option<Matrix6<f64>>,
    /// `d z(t1) / d lambda` at fixed `z(t0)`.
    pub param_sens: Option<Phase>,
    pub dense: Option<DenseTrajectory>,
    pub stats: FlowStats,
}

/// Flow of one Hamiltonian from `z0` at `t0` to `t1`.
pub fn expmap(
    mc: &ModelConstants,
    id: HamiltonianId,
    z0: &Phase,
    t0: f64,
    t1: f64,
    tol: &Tolerances,
    keep_dense: bool,
) -> Result<FlowResult, Error> {
    let mut dense = keep_dense.then(DenseTrajectory::default);
    let (z, stats) = dopri5(
        |_, z: &Phase| vector_field(mc, id, z),
        t0,
        t1,
        *z0,
        tol,
        |t, z, f| {
            if let Some(d) = dense.as_mut() {
                d.push(t, *z, *f);
            }
        },
    )?;
    Ok(FlowResult {
        z,
        stm: None,
        param_sens: None,
        dense,
        stats,
    })
}

/// Flow together with a tangent vector `dz0` (one variational column).
pub fn expmap_var(
    mc: &ModelConstants,
    id: HamiltonianId,
    z0: &Phase,
    dz0: &Phase,
    t0: f64,
    t1: f64,
    tol: &Tolerances,
) -> Result<(Phase, Phase), Error> {
    let mut y0 = SVector::<f64, 12>::zeros();
    y0.fixed_rows_mut::<6>(0).copy_from(z0);
    y0.fixed_rows_mut::<6>(6).copy_from(dz0);
    let (y, _) = dopri5(
        |_, y: &SVector<f64, 12>| {
            let z: Phase = y.fixed_rows::<6>(0).into();
            let v: Phase = y.fixed_rows::<6>(6).into();
            let mut out = SVector::<f64, 12>::zeros();
            out.fixed_rows_mut::<6>(0)
                .copy_from(&vector_field(mc, id, &z));
            out.fixed_rows_mut::<6>(6)
                .copy_from(&(field_jacobian(mc, id, &z) * v));
            out
        },
        t0,
        t1,
        y0,
        tol,
        |_, _, _| {},
    )?;
    Ok((y.fixed_rows::<6>(0).into(), y.fixed_rows::<6>(6).into()))
}

/// Flow with its state-transition matrix and, when `param` is given, the
/// sensitivity to that continuation parameter.
pub fn expmap_stm(
    mc: &ModelConstants,
    id: HamiltonianId,
    z0: &Phase,
    t0: f64,
    t1: f64,
    tol: &Tolerances,
    param: Option<Param>,
) -> Result<FlowResult, Error> {
    // Layout: z (6), STM column-major (36), parameter column (6).
    let mut y0 = SVector::<f64, 48>::zeros();
    y0.fixed_rows_mut::<6>(0).copy_from(z0);
    for i in 0..6 {
        y0[6 + 7 * i] = 1.0;
    }
    let rhs = |_: f64, y: &SVector<f64, 48>| {
        let z: Phase = y.fixed_rows::<6>(0).into();
        let j = field_jacobian(mc, id, &z);
        let phi = Matrix6::from_column_slice(&y.as_slice()[6..42]);
        let mut out = SVector::<f64, 48>::zeros();
        out.fixed_rows_mut::<6>(0)
            .copy_from(&vector_field(mc, id, &z));
        out.as_mut_slice()[6..42].copy_from_slice((j * phi).as_slice());
        if let Some(p) = param {
            let s: Phase = y.fixed_rows::<6>(42).into();
            let ds = j * s + field_param_derivative(mc, id, &z, p);
            out.fixed_rows_mut::<6>(42).copy_from(&ds);
        }
        out
    };
    let (y, stats) = dopri5(rhs, t0, t1, y0, tol, |_, _, _| {})?;
    Ok(FlowResult {
        z: y.fixed_rows::<6>(0).into(),
        stm: Some(Matrix6::from_column_slice(&y.as_slice()[6..42])),
        param_sens: param.map(|_| y.fixed_rows::<6>(42).into()),
        dense: None,
        stats,
    })
}
