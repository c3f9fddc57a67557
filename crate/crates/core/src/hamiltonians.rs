//! True Hamiltonians of the four arc types and their canonical fields.
//!
//! Phase points are `z = (x1, x2, x3, p1, p2, p3)`. On a boundary arc the
//! control and multiplier are closed-form functions of `z`, so the arc is
//! the flow of an ordinary Hamiltonian whose field is written out below
//! together with its Jacobian and its derivative with respect to `k`.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::model::{Constraint, ModelConstants, Param, State};

/// Phase point `(x, p)`.
pub type Phase = Vector6<f64>;

/// Arc type and its Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HamiltonianId {
    /// Bang arc with `u = +1`.
    HPlus,
    /// Bang arc with `u = -1`.
    HMinus,
    /// Boundary arc on `x1 = 1`.
    HC1,
    /// Boundary arc on `x3 = 1`.
    HC3,
}

impl HamiltonianId {
    pub fn label(self) -> &'static str {
        match self {
            HamiltonianId::HPlus => "+",
            HamiltonianId::HMinus => "-",
            HamiltonianId::HC1 => "c1",
            HamiltonianId::HC3 => "c3",
        }
    }

    pub fn constraint(self) -> Option<Constraint> {
        match self {
            HamiltonianId::HC1 => Some(Constraint::C1),
            HamiltonianId::HC3 => Some(Constraint::C3),
            _ => None,
        }
    }
}

pub fn state(z: &Phase) -> State {
    State::new(z[0], z[1], z[2])
}

pub fn costate(z: &Phase) -> State {
    State::new(z[3], z[4], z[5])
}

/// Hamiltonian lifts used by the switching analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftValues {
    pub h0: f64,
    /// Switching function.
    pub h1: f64,
    pub h01: f64,
    pub h001: f64,
}

pub fn lifts(mc: &ModelConstants, z: &Phase) -> LiftValues {
    let [k1, k2, k3, k4, k5, k6, k7] = mc.k;
    let (x1, x3) = (z[0], z[2]);
    let (p1, p2, p3) = (z[3], z[4], z[5]);
    LiftValues {
        h0: p1 * (k1 * x1 + k2 * x3) + p2 * k3 * x3 + p3 * (k4 + k5 * x1 + k6 * x3 * x3),
        h1: k7 * p1,
        h01: -k7 * (k1 * p1 + k5 * p3),
        h001: k7 * ((k1 * k1 + k2 * k5) * p1 + k3 * k5 * p2 + k5 * (k1 + 2.0 * k6 * x3) * p3),
    }
}

/// Control realized by an arc at `z`.
pub fn control(mc: &ModelConstants, id: HamiltonianId, z: &Phase) -> f64 {
    match id {
        HamiltonianId::HPlus => 1.0,
        HamiltonianId::HMinus => -1.0,
        HamiltonianId::HC1 => mc.u_c1(&state(z)),
        HamiltonianId::HC3 => mc.u_c3(),
    }
}

/// State-constraint multiplier along an arc (zero on bang arcs).
pub fn multiplier(mc: &ModelConstants, id: HamiltonianId, z: &Phase) -> f64 {
    match id {
        HamiltonianId::HC1 => -mc.k[4] * z[5],
        HamiltonianId::HC3 => -mc.k[2] * z[4],
        _ => 0.0,
    }
}

/// Value of the true Hamiltonian.
pub fn hamiltonian(mc: &ModelConstants, id: HamiltonianId, z: &Phase) -> f64 {
    let l = lifts(mc, z);
    let u = control(mc, id, z);
    let eta = multiplier(mc, id, z);
    let c = id.constraint().map_or(0.0, |c| c.value(&state(z)));
    l.h0 + u * l.h1 + eta * c
}

/// Canonical field `(dH/dp, -dH/dx)`.
pub fn vector_field(mc: &ModelConstants, id: HamiltonianId, z: &Phase) -> Phase {
    let [k1, k2, k3, k4, k5, k6, k7] = mc.k;
    let (x1, x3) = (z[0], z[2]);
    let (p1, p2, p3) = (z[3], z[4], z[5]);
    match id {
        HamiltonianId::HPlus | HamiltonianId::HMinus => {
            let u = if id == HamiltonianId::HPlus {
                1.0
            } else {
                -1.0
            };
            Phase::new(
                k1 * x1 + k2 * x3 + u * k7,
                k3 * x3,
                k4 + k5 * x1 + k6 * x3 * x3,
                -(k1 * p1 + k5 * p3),
                0.0,
                -(k2 * p1 + k3 * p2 + 2.0 * k6 * x3 * p3),
            )
        }
        HamiltonianId::HC1 => Phase::new(
            k1 * (x1 - 1.0),
            k3 * x3,
            k4 + k5 + k6 * x3 * x3,
            -k1 * p1,
            0.0,
            -(k3 * p2 + 2.0 * k6 * x3 * p3),
        ),
        HamiltonianId::HC3 => Phase::new(
            k1 * x1 + k2 * x3 + k1 * (k4 + k6) / k5 - k2,
            k3,
            k4 + k5 * x1 + k6 * x3 * x3,
            -(k1 * p1 + k5 * p3),
            0.0,
            -(k2 * p1 + 2.0 * k6 * x3 * p3),
        ),
    }
}

/// Jacobian of [`vector_field`] with respect to `z`.
pub fn field_jacobian(mc: &ModelConstants, id: HamiltonianId, z: &Phase) -> Matrix6<f64> {
    let [k1, k2, k3, _, k5, k6, _] = mc.k;
    let (x3, p3) = (z[2], z[5]);
    let mut j = Matrix6::zeros();
    match id {
        HamiltonianId::HPlus | HamiltonianId::HMinus | HamiltonianId::HC3 => {
            j[(0, 0)] = k1;
            j[(0, 2)] = k2;
            if id != HamiltonianId::HC3 {
                j[(1, 2)] = k3;
            }
            j[(2, 0)] = k5;
            j[(2, 2)] = 2.0 * k6 * x3;
            j[(3, 3)] = -k1;
            j[(3, 5)] = -k5;
            j[(5, 2)] = -2.0 * k6 * p3;
            j[(5, 3)] = -k2;
            if id != HamiltonianId::HC3 {
                j[(5, 4)] = -k3;
            }
            j[(5, 5)] = -2.0 * k6 * x3;
        }
        HamiltonianId::HC1 => {
            j[(0, 0)] = k1;
            j[(1, 2)] = k3;
            j[(2, 2)] = 2.0 * k6 * x3;
            j[(3, 3)] = -k1;
            j[(5, 2)] = -2.0 * k6 * p3;
            j[(5, 4)] = -k3;
            j[(5, 5)] = -2.0 * k6 * x3;
        }
    }
    j
}

/// Derivative of [`vector_field`] with respect to `(k1, ..., k7)`, one column
/// per coefficient.
pub fn field_k_derivative(
    mc: &ModelConstants,
    id: HamiltonianId,
    z: &Phase,
) -> nalgebra::SMatrix<f64, 6, 7> {
    let [k1, _, _, k4, k5, k6, _] = mc.k;
    let (x1, x3) = (z[0], z[2]);
    let (p1, p2, p3) = (z[3], z[4], z[5]);
    let mut d = nalgebra::SMatrix::<f64, 6, 7>::zeros();
    match id {
        HamiltonianId::HPlus | HamiltonianId::HMinus => {
            let u = if id == HamiltonianId::HPlus {
                1.0
            } else {
                -1.0
            };
            d[(0, 0)] = x1;
            d[(0, 1)] = x3;
            d[(0, 6)] = u;
            d[(1, 2)] = x3;
            d[(2, 3)] = 1.0;
            d[(2, 4)] = x1;
            d[(2, 5)] = x3 * x3;
            d[(3, 0)] = -p1;
            d[(3, 4)] = -p3;
            d[(5, 1)] = -p1;
            d[(5, 2)] = -p2;
            d[(5, 5)] = -2.0 * x3 * p3;
        }
        HamiltonianId::HC1 => {
            d[(0, 0)] = x1 - 1.0;
            d[(1, 2)] = x3;
            d[(2, 3)] = 1.0;
            d[(2, 4)] = 1.0;
            d[(2, 5)] = x3 * x3;
            d[(3, 0)] = -p1;
            d[(5, 2)] = -p2;
            d[(5, 5)] = -2.0 * x3 * p3;
        }
        HamiltonianId::HC3 => {
            let s = (k4 + k6) / k5;
            d[(0, 0)] = x1 + s;
            d[(0, 1)] = x3 - 1.0;
            d[(0, 3)] = k1 / k5;
            d[(0, 4)] = -k1 * s / k5;
            d[(0, 5)] = k1 / k5;
            d[(1, 2)] = 1.0;
            d[(2, 3)] = 1.0;
            d[(2, 4)] = x1;
            d[(2, 5)] = x3 * x3;
            d[(3, 0)] = -p1;
            d[(3, 4)] = -p3;
            d[(5, 1)] = -p1;
            d[(5, 5)] = -2.0 * x3 * p3;
        }
    }
    d
}

/// Derivative of [`vector_field`] with respect to a continuation parameter.
pub fn field_param_derivative(
    mc: &ModelConstants,
    id: HamiltonianId,
    z: &Phase,
    p: Param,
) -> Phase {
    let dk = nalgebra::SVector::<f64, 7>::from(mc.dk(p));
    field_k_derivative(mc, id, z) * dk
}

/// Field, Jacobian and Hamiltonian value in one call.
#[derive(Debug, Clone, Copy)]
pub struct FieldEval {
    pub h: f64,
    pub dz: Phase,
    pub jac: Matrix6<f64>,
}

pub fn ham_field(mc: &ModelConstants, id: HamiltonianId, z: &Phase) -> FieldEval {
    FieldEval {
        h: hamiltonian(mc, id, z),
        dz: vector_field(mc, id, z),
        jac: field_jacobian(mc, id, z),
    }
}
