use serde::{Deserialize, Serialize};

use super::eval::{trajectory, Trajectory};
use super::{Structure, Unknowns};
use crate::flow::Tolerances;
use crate::hamiltonians::HamiltonianId;
use crate::model::ModelConstants;
use crate::Error;

/// Slack on constraint, sign and multiplier checks.
pub const TOL_C: f64 = 1e-6;
/// Arcs shorter than this are reported as empty.
pub const EMPTY_ARC: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TimeOrdering,
    CurrentBound,
    SpeedBound,
    SwitchingSign,
    BoundaryControl,
    Multiplier,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Arc (0-based) or node (1-based, for jumps) where it occurs.
    pub index: usize,
    pub t: f64,
    pub value: f64,
}

/// A posteriori checks that a shooting zero is a genuine extremal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub violations: Vec<Violation>,
    pub empty_arcs: Vec<usize>,
    /// `max x1 - 1` over arcs off the current bound.
    pub max_c1: f64,
    /// `max x3 - 1` over arcs off the speed bound.
    pub max_c3: f64,
}

impl AdmissibilityReport {
    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

pub fn check_admissible(
    mc: &ModelConstants,
    y: &Unknowns,
    tol: &Tolerances,
) -> Result<AdmissibilityReport, Error> {
    let n = y.n_nodes();
    let mut violations = Vec::new();
    let mut empty_arcs = Vec::new();
    for a in 0..=n {
        let len = y.arc_length(a);
        if len < -EMPTY_ARC {
            violations.push(Violation {
                kind: ViolationKind::TimeOrdering,
                index: a,
                t: y.time(a),
                value: len,
            });
        } else if len < EMPTY_ARC {
            empty_arcs.push(a);
        }
    }
    for i in 1..=n {
        if y.layout().nodes[i - 1].jump.is_some() && y.jump(i) > TOL_C {
            violations.push(Violation {
                kind: ViolationKind::Jump,
                index: i,
                t: y.time(i),
                value: y.jump(i),
            });
        }
    }
    // Reversed arcs make the dense reconstruction meaningless.
    if violations
        .iter()
        .any(|v| v.kind == ViolationKind::TimeOrdering)
    {
        return Ok(AdmissibilityReport {
            admissible: false,
            violations,
            empty_arcs,
            max_c1: f64::NAN,
            max_c3: f64::NAN,
        });
    }
    let tr = trajectory(mc, y, tol)?;
    let (max_c1, max_c3) = scan_arcs(mc, &tr, &mut violations);
    Ok(AdmissibilityReport {
        admissible: violations.is_empty(),
        violations,
        empty_arcs,
        max_c1,
        max_c3,
    })
}

fn scan_arcs(mc: &ModelConstants, tr: &Trajectory, out: &mut Vec<Violation>) -> (f64, f64) {
    let (k2, k3, k5, k7) = (mc.k[1], mc.k[2], mc.k[4], mc.k[6]);
    let mut max_c1 = f64::NEG_INFINITY;
    let mut max_c3 = f64::NEG_INFINITY;
    for (a, arc) in tr.arcs.iter().enumerate() {
        if arc.t1 - arc.t0 < EMPTY_ARC {
            continue;
        }
        let d = &arc.dense;
        let mut flag = |kind, t, value| {
            out.push(Violation {
                kind,
                index: a,
                t,
                value,
            })
        };
        let (t1m, x1m) = d.max_component(0);
        let (t3m, x3m) = d.max_component(2);
        if arc.id != HamiltonianId::HC1 {
            max_c1 = max_c1.max(x1m - 1.0);
        }
        if arc.id != HamiltonianId::HC3 {
            max_c3 = max_c3.max(x3m - 1.0);
        }
        if x1m - 1.0 > TOL_C {
            flag(ViolationKind::CurrentBound, t1m, x1m - 1.0);
        }
        if x3m - 1.0 > TOL_C {
            flag(ViolationKind::SpeedBound, t3m, x3m - 1.0);
        }
        match arc.id {
            HamiltonianId::HPlus => {
                let (t, p1) = d.min_component(3);
                if k7 * p1 < -TOL_C {
                    flag(ViolationKind::SwitchingSign, t, k7 * p1);
                }
            }
            HamiltonianId::HMinus => {
                let (t, p1) = d.max_component(3);
                if k7 * p1 > TOL_C {
                    flag(ViolationKind::SwitchingSign, t, k7 * p1);
                }
            }
            HamiltonianId::HC1 => {
                // u_c1 is affine in x3 with slope -k2/k7 > 0.
                let (tlo, x3lo) = d.min_component(2);
                let u_lo = -(mc.k[0] + k2 * x3lo) / k7;
                let u_hi = -(mc.k[0] + k2 * x3m) / k7;
                if u_hi > 1.0 + TOL_C {
                    flag(ViolationKind::BoundaryControl, t3m, u_hi);
                }
                if u_lo < -1.0 - TOL_C {
                    flag(ViolationKind::BoundaryControl, tlo, u_lo);
                }
                let (t, p3) = d.min_component(5);
                if -k5 * p3 > TOL_C {
                    flag(ViolationKind::Multiplier, t, -k5 * p3);
                }
            }
            HamiltonianId::HC3 => {
                let u = mc.u_c3();
                if u.abs() > 1.0 + TOL_C {
                    flag(ViolationKind::BoundaryControl, arc.t0, u);
                }
                let eta = -k3 * d.z[0][4];
                if eta > TOL_C {
                    flag(ViolationKind::Multiplier, arc.t0, eta);
                }
            }
        }
    }
    (max_c1, max_c3)
}

/// Structures whose empty arc suggests a neighbouring structure.
pub fn suggest_after_empty(s: Structure, arc: usize) -> Option<Structure> {
    match (s, arc) {
        (Structure::S2, 1) => Some(Structure::S1),
        (Structure::S4, 2) => Some(Structure::S5),
        _ => None,
    }
}
