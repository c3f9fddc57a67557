use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::admissible::{check_admissible, AdmissibilityReport};
use super::eval::{evaluate, residual};
use super::{Structure, Unknowns};
use crate::flow::Tolerances;
use crate::model::ModelConstants;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Target residual norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Smallest damping factor tried by the line search.
    pub step_floor: f64,
    pub flow: Tolerances,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            step_floor: 1e-14,
            flow: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Residual norm after each iteration, starting with the initial one.
    pub history: Vec<f64>,
    pub unknowns: Unknowns,
    pub admissibility: Option<AdmissibilityReport>,
    pub message: String,
}

impl SolveReport {
    pub fn admissible(&self) -> bool {
        self.admissibility.as_ref().is_some_and(|a| a.admissible)
    }
}

/// Damped Newton with backtracking on the residual norm.
pub fn solve(
    mc: &ModelConstants,
    y_init: &Unknowns,
    opts: &NewtonOptions,
) -> Result<SolveReport, Error> {
    let mut y = y_init.clone();
    let mut r = residual(mc, &y, &opts.flow)?;
    let mut norm = r.norm();
    let mut history = vec![norm];
    let mut message = String::from("max iterations reached");
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if norm <= opts.tol {
            message = "converged".into();
            break;
        }
        iterations += 1;
        let j = evaluate(mc, &y, &opts.flow, true, None)?
            .jacobian
            .expect("requested");
        let Some(dx) = j.lu().solve(&(-&r)) else {
            message = "singular jacobian".into();
            break;
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= opts.step_floor {
            let trial = y.with_values(&y.values + alpha * &dx);
            if let Ok(rt) = residual(mc, &trial, &opts.flow) {
                let nt = rt.norm();
                if nt.is_finite() && nt <= (1.0 - 1e-4 * alpha) * norm {
                    accepted = Some((trial, rt, nt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((yt, rt, nt)) = accepted else {
            message = "line search failed".into();
            break;
        };
        debug!(
            "newton {} it {iterations}: |h| = {nt:.3e}, alpha = {alpha}",
            y.structure
        );
        y = yt;
        r = rt;
        norm = nt;
        history.push(norm);
    }
    let converged = norm <= opts.tol;
    if converged {
        message = "converged".into();
    }
    let admissibility = if converged {
        Some(check_admissible(mc, &y, &opts.flow)?)
    } else {
        None
    };
    Ok(SolveReport {
        converged,
        residual_norm: norm,
        iterations,
        history,
        unknowns: y,
        admissibility,
        message,
    })
}

/// Solves the single-arc problem from a grid of starting points
/// `p0 in {0.1, 1, 5}^3`, `tf in {2, 5, 10, 20}`, tried in order of
/// increasing initial residual; returns the first converged admissible zero.
pub fn multi_start_s1(mc: &ModelConstants, opts: &NewtonOptions) -> Result<SolveReport, Error> {
    let levels = [0.1, 1.0, 5.0];
    let mut starts = Vec::new();
    for &a in &levels {
        for &b in &levels {
            for &c in &levels {
                for tf in [2.0, 5.0, 10.0, 20.0] {
                    starts.push(Unknowns::from_vec(Structure::S1, vec![a, b, c, tf])?);
                }
            }
        }
    }
    let mut ranked: Vec<(f64, Unknowns)> = starts
        .into_par_iter()
        .filter_map(|y| {
            let r = residual(mc, &y, &opts.flow).ok()?.norm();
            r.is_finite().then_some((r, y))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, y) in ranked {
        if let Ok(r) = solve(mc, &y, opts) {
            if r.converged && r.admissible() && r.unknowns.tf() > 0.0 {
                return Ok(r);
            }
        }
    }
    Err(Error::Scenario("no start of the grid converged".into()))
}

/// Componentwise distance between two solutions, for tests and reports.
pub fn distance(a: &Unknowns, b: &Unknowns) -> f64 {
    (&a.values - &b.values).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s1_converges_quadratically_from_rounded_guess() {
        let mc = ModelConstants::reference();
        let y = Unknowns::from_vec(Structure::S1, vec![0.3675, 6.4479, 0.2417, 5.6156]).unwrap();
        let rep = solve(&mc, &y, &NewtonOptions::default()).unwrap();
        assert!(rep.converged, "{}", rep.message);
        assert!(rep.residual_norm < 1e-10);
        assert!(rep.admissible());
        let h = &rep.history;
        if h.len() >= 3 {
            let n = h.len();
            assert!(h[n - 1] / h[n - 2] < 0.1 * h[n - 2] / h[n - 3] || h[n - 1] < 1e-12);
        }
        assert!((rep.unknowns.tf() - 5.6156236).abs() < 1e-6);
    }

    #[test]
    fn singular_start_returns_report() {
        let mc = ModelConstants::reference();
        let y = Unknowns::from_vec(Structure::S1, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let rep = solve(&mc, &y, &NewtonOptions::default()).unwrap();
        assert!(!rep.converged);
    }
}
