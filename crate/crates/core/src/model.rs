//! Physical parameters, normalization and the affine control system.
//!
//! States are normalized so that both state constraints read `x <= 1`:
//! `x1` is the current over `i_max`, `x2` the position over the track length
//! and `x3` the rotor speed over `omega_max`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Normalized state `(x1, x2, x3)`.
pub type State = Vector3<f64>;

/// Track length in meters.
pub const TRACK_LENGTH: f64 = 100.0;

/// Electric and mechanical characteristics of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarParams {
    /// Inductor (H).
    #[serde(rename = "Lm")]
    pub lm: f64,
    /// Motor resistance (Ohm).
    #[serde(rename = "Rm")]
    pub rm: f64,
    /// Motor torque coefficient.
    #[serde(rename = "Km")]
    pub km: f64,
    /// Battery voltage (V).
    #[serde(rename = "Valim")]
    pub valim: f64,
    /// Wheel radius (m).
    pub r: f64,
    /// Gear reduction ratio.
    #[serde(rename = "Kr")]
    pub kr: f64,
    /// Gravity (m/s^2).
    pub g: f64,
    /// Friction coefficient.
    #[serde(rename = "Kf")]
    pub kf: f64,
    /// Mass (kg).
    #[serde(rename = "M")]
    pub m: f64,
    /// Air density (kg/m^3).
    pub rho: f64,
    /// Frontal area (m^2).
    #[serde(rename = "S")]
    pub s: f64,
    /// Drag coefficient.
    #[serde(rename = "Cx")]
    pub cx: f64,
    /// Battery resistance (Ohm).
    #[serde(rename = "Rbat")]
    pub rbat: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            lm: 0.05,
            rm: 0.03,
            km: 0.27,
            valim: 150.0,
            r: 0.33,
            kr: 10.0,
            g: 9.81,
            kf: 0.03,
            m: 250.0,
            rho: 1.293,
            s: 2.0,
            cx: 0.4,
            rbat: 0.05,
        }
    }
}

impl CarParams {
    fn fields(&self) -> [(&'static str, f64); 13] {
        [
            ("Lm", self.lm),
            ("Rm", self.rm),
            ("Km", self.km),
            ("Valim", self.valim),
            ("r", self.r),
            ("Kr", self.kr),
            ("g", self.g),
            ("Kf", self.kf),
            ("M", self.m),
            ("rho", self.rho),
            ("S", self.s),
            ("Cx", self.cx),
            ("Rbat", self.rbat),
        ]
    }

    /// Rejects non-finite or non-positive entries.
    pub fn validate(&self) -> Result<(), Error> {
        for (name, v) in self.fields() {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter { name, value: v });
            }
        }
        Ok(())
    }
}

/// Bounds on current and speed plus the tyre scaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Current bound (A).
    pub imax: f64,
    /// Speed bound (km/h).
    pub vmax: f64,
    /// Scaling factor applied to the mass term.
    pub alphaf: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            imax: 1100.0,
            vmax: 110.0,
            alphaf: 100.0,
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<(), Error> {
        for (name, v) in [
            ("imax", self.imax),
            ("vmax", self.vmax),
            ("alphaf", self.alphaf),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter { name, value: v });
            }
        }
        Ok(())
    }
}

/// Continuation parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    /// Current bound `i_max` (A).
    Imax,
    /// Speed bound `v_max` (km/h).
    Vmax,
}

impl Param {
    pub fn name(self) -> &'static str {
        match self {
            Param::Imax => "imax",
            Param::Vmax => "vmax",
        }
    }

    /// Exponent of this parameter in each `k_j`. Every `k_j` is a monomial in
    /// the normalized weights and only `w10 = imax` and `w12 ∝ vmax` vary.
    pub fn exponents(self) -> [f64; 7] {
        match self {
            Param::Imax => [0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
            Param::Vmax => [0.0, 1.0, 1.0, -1.0, -1.0, 1.0, 0.0],
        }
    }
}

/// Normalized constants of the control system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub car: CarParams,
    pub bounds: Bounds,
    /// Normalization weights `w1..w12`.
    pub w: [f64; 12],
    /// Coefficients `k1..k7`.
    pub k: [f64; 7],
}

impl ModelConstants {
    pub fn new(car: CarParams, bounds: Bounds) -> Result<Self, Error> {
        car.validate()?;
        bounds.validate()?;
        let omega_max = bounds.vmax * car.kr / (3.6 * car.r);
        let w = [
            1.0 / car.lm,
            car.rm,
            car.km,
            car.valim,
            car.r / car.kr,
            car.g * car.kf,
            1.0 / car.m,
            0.5 * car.rho * car.s * car.cx,
            car.rbat,
            bounds.imax,
            bounds.alphaf,
            omega_max,
        ];
        let [w1, w2, w3, w4, w5, w6, w7, w8, _w9, w10, w11, w12] = w;
        let k = [
            -w1 * w2,
            -w1 * w3 * w12 / w10,
            w5 * w12 / w11,
            -w6 / (w5 * w12),
            w3 * w7 * w10 / (w5 * w5 * w12),
            -w5 * w7 * w8 * w12,
            w1 * w4 / w10,
        ];
        Ok(Self { car, bounds, w, k })
    }

    /// Reference vehicle at `imax = 1100`, `vmax = 110`.
    pub fn reference() -> Self {
        Self::new(CarParams::default(), Bounds::default()).expect("reference parameters are valid")
    }

    pub fn param(&self, p: Param) -> f64 {
        match p {
            Param::Imax => self.bounds.imax,
            Param::Vmax => self.bounds.vmax,
        }
    }

    /// Same vehicle with one bound replaced.
    pub fn with_param(&self, p: Param, value: f64) -> Result<Self, Error> {
        let mut b = self.bounds;
        match p {
            Param::Imax => b.imax = value,
            Param::Vmax => b.vmax = value,
        }
        Self::new(self.car, b)
    }

    /// `dk_j / dλ` for the given continuation parameter.
    pub fn dk(&self, p: Param) -> [f64; 7] {
        let lam = self.param(p);
        let e = p.exponents();
        std::array::from_fn(|j| e[j] * self.k[j] / lam)
    }

    /// Drift `F0(x)`.
    pub fn drift(&self, x: &State) -> State {
        let [k1, k2, k3, k4, k5, k6, _] = self.k;
        State::new(
            k1 * x[0] + k2 * x[2],
            k3 * x[2],
            k4 + k5 * x[0] + k6 * x[2] * x[2],
        )
    }

    /// Control field `F1 = (k7, 0, 0)`.
    pub fn control_field(&self) -> State {
        State::new(self.k[6], 0.0, 0.0)
    }

    /// `F0(x) + u F1(x)`.
    pub fn dynamics(&self, x: &State, u: f64) -> State {
        self.drift(x) + u * self.control_field()
    }

    /// Boundary control keeping `x1 = 1`.
    pub fn u_c1(&self, x: &State) -> f64 {
        let [k1, k2, .., k7] = self.k;
        -(k1 + k2 * x[2]) / k7
    }

    /// Current level holding `x3 = 1` at equilibrium.
    pub fn x1_on_c3(&self) -> f64 {
        let [_, _, _, k4, k5, k6, _] = self.k;
        -(k4 + k6) / k5
    }

    /// Boundary control keeping `x3 = 1`; constant along the arc.
    pub fn u_c3(&self) -> f64 {
        let [k1, k2, .., k7] = self.k;
        -(k1 * self.x1_on_c3() + k2) / k7
    }

    /// Speed in km/h corresponding to a normalized `x3`.
    pub fn speed_kmh(&self, x3: f64) -> f64 {
        x3 * self.bounds.vmax
    }
}

/// The two state constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    /// Current bound `x1 <= 1`.
    C1,
    /// Speed bound `x3 <= 1`.
    C3,
}

impl Constraint {
    /// State component bounded by this constraint.
    pub fn index(self) -> usize {
        match self {
            Constraint::C1 => 0,
            Constraint::C3 => 2,
        }
    }

    pub fn value(self, x: &State) -> f64 {
        x[self.index()] - 1.0
    }
}

/// Largest `vmax` for which an arc on the speed bound is reachable with
/// `|u| <= 1`. Bisection on `omega_max` over `[1, 1e4]` rad/s.
pub fn vmax_gamma_c3(car: &CarParams, imax: f64, alphaf: f64) -> Result<f64, Error> {
    let to_v = |omega: f64| omega * 3.6 * car.r / car.kr;
    let g = |omega: f64| -> Result<f64, Error> {
        let mc = ModelConstants::new(
            *car,
            Bounds {
                imax,
                vmax: to_v(omega),
                alphaf,
            },
        )?;
        Ok(mc.u_c3() - 1.0)
    };
    let (mut lo, mut hi) = (1.0_f64, 1.0e4_f64);
    let (mut glo, ghi) = (g(lo)?, g(hi)?);
    if glo.signum() == ghi.signum() {
        return Err(Error::NoBracket {
            what: "u_c3 = 1",
            lo,
            hi,
        });
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid)?;
        if gm.signum() == glo.signum() {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    Ok(to_v(0.5 * (lo + hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_follow_table_values() {
        let mc = ModelConstants::reference();
        assert!((mc.w[0] - 20.0).abs() < 1e-12);
        assert!((mc.w[4] - 0.033).abs() < 1e-15);
        assert!((mc.w[11] - 110.0 * 10.0 / (3.6 * 0.33)).abs() < 1e-9);
        // k1 = -Rm/Lm
        assert!((mc.k[0] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn dk_matches_finite_difference() {
        let mc = ModelConstants::reference();
        for p in [Param::Imax, Param::Vmax] {
            let h = 1e-4 * mc.param(p);
            let a = mc.with_param(p, mc.param(p) + h).unwrap();
            let b = mc.with_param(p, mc.param(p) - h).unwrap();
            let dk = mc.dk(p);
            for (j, d) in dk.iter().enumerate() {
                let fd = (a.k[j] - b.k[j]) / (2.0 * h);
                assert!((fd - d).abs() <= 1e-7 * (1.0 + d.abs()), "{p:?} k{}", j + 1);
            }
        }
    }

    #[test]
    fn boundary_controls_keep_constraints_active() {
        let mc = ModelConstants::reference();
        let x = State::new(1.0, 0.3, 0.7);
        assert!(mc.dynamics(&x, mc.u_c1(&x))[0].abs() < 1e-12);
        let y = State::new(mc.x1_on_c3(), 0.3, 1.0);
        let f = mc.dynamics(&y, mc.u_c3());
        assert!(f[0].abs() < 1e-10 && f[2].abs() < 1e-10);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let car = CarParams {
            m: -1.0,
            ..CarParams::default()
        };
        assert!(matches!(
            ModelConstants::new(car, Bounds::default()),
            Err(Error::InvalidParameter { name: "M", .. })
        ));
        let b = Bounds {
            vmax: f64::NAN,
            ..Bounds::default()
        };
        assert!(ModelConstants::new(CarParams::default(), b).is_err());
    }

    #[test]
    fn gamma_c3_threshold_solves_unit_control() {
        let car = CarParams::default();
        let v = vmax_gamma_c3(&car, 150.0, 100.0).unwrap();
        let mc = ModelConstants::new(
            car,
            Bounds {
                imax: 150.0,
                vmax: v,
                alphaf: 100.0,
            },
        )
        .unwrap();
        assert!((mc.u_c3() - 1.0).abs() < 1e-9);
    }
}
