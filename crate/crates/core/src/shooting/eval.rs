use nalgebra::{DMatrix, DVector, RowSVector};
use rayon::prelude::*;

use super::{NodeCondition, Structure, Unknowns, TF};
use crate::flow::{expmap, expmap_stm, DenseTrajectory, Tolerances};
use crate::hamiltonians::{control, hamiltonian, multiplier, vector_field, HamiltonianId, Phase};
use crate::model::{ModelConstants, Param};
use crate::Error;

type Grad = RowSVector<f64, 6>;

/// Value, gradient in `z` and derivative in `lambda` of a node condition.
fn condition(
    mc: &ModelConstants,
    c: NodeCondition,
    z: &Phase,
    dk: Option<&[f64; 7]>,
) -> (f64, Grad, f64) {
    let [k1, k2, _, k4, k5, k6, k7] = mc.k;
    let (x1, x3, p1) = (z[0], z[2], z[3]);
    let mut g = Grad::zeros();
    match c {
        NodeCondition::C1 => {
            g[0] = 1.0;
            (x1 - 1.0, g, 0.0)
        }
        NodeCondition::C3 => {
            g[2] = 1.0;
            (x3 - 1.0, g, 0.0)
        }
        NodeCondition::H1 => {
            g[3] = k7;
            (k7 * p1, g, dk.map_or(0.0, |d| d[6] * p1))
        }
        NodeCondition::Uc1Exit => {
            g[2] = -k2 / k7;
            let num = k1 + k2 * x3;
            let dl = dk.map_or(0.0, |d| -(d[0] + d[1] * x3) / k7 + num * d[6] / (k7 * k7));
            (-num / k7 - 1.0, g, dl)
        }
        NodeCondition::F0C3 => {
            g[0] = k5;
            g[2] = 2.0 * k6 * x3;
            let dl = dk.map_or(0.0, |d| d[3] + d[4] * x1 + d[5] * x3 * x3);
            (k4 + k5 * x1 + k6 * x3 * x3, g, dl)
        }
    }
}

/// Endpoint rows `(x2 - 1, p1, p3, H+ - 1)` with their gradients and
/// `lambda` derivatives.
fn endpoint(mc: &ModelConstants, z: &Phase, dk: Option<&[f64; 7]>) -> [(f64, Grad, f64); 4] {
    let mut out = [(0.0, Grad::zeros(), 0.0); 4];
    for (r, k) in [1usize, 3, 5].into_iter().enumerate() {
        out[r].0 = z[k] - if k == 1 { 1.0 } else { 0.0 };
        out[r].1[k] = 1.0;
    }
    // H+ is linear in k, so its k-derivative is H+ evaluated with k := dk.
    let f = vector_field(mc, HamiltonianId::HPlus, z);
    let g = Grad::from_fn(|_, c| if c < 3 { -f[c + 3] } else { f[c - 3] });
    let dl = dk.map_or(0.0, |d| {
        let mut m = *mc;
        m.k = *d;
        hamiltonian(&m, HamiltonianId::HPlus, z)
    });
    out[3] = (hamiltonian(mc, HamiltonianId::HPlus, z) - 1.0, g, dl);
    out
}

/// Shooting residual, optionally with its Jacobian and its derivative with
/// respect to a continuation parameter.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub residual: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub param: Option<DVector<f64>>,
}

struct ArcEnd {
    z: Phase,
    stm: Option<nalgebra::Matrix6<f64>>,
    sens: Option<Phase>,
}

pub fn evaluate(
    mc: &ModelConstants,
    y: &Unknowns,
    tol: &Tolerances,
    with_jacobian: bool,
    param: Option<Param>,
) -> Result<Evaluation, Error> {
    let s = y.structure;
    let arcs = s.arcs();
    let nodes = s.nodes();
    let n = nodes.len();
    let layout = y.layout();
    let dim = layout.dim;

    let ends: Vec<ArcEnd> = (0..=n)
        .into_par_iter()
        .map(|a| {
            let z0 = y.start(a);
            let (t0, t1) = (y.time(a), y.time(a + 1));
            let id = arcs[a];
            let tol = &arc_tolerance(id, tol);
            if with_jacobian || param.is_some() {
                let r = expmap_stm(mc, id, &z0, t0, t1, tol, param)?;
                Ok(ArcEnd {
                    z: r.z,
                    stm: r.stm,
                    sens: r.param_sens,
                })
            } else {
                let r = expmap(mc, id, &z0, t0, t1, tol, false)?;
                Ok(ArcEnd {
                    z: r.z,
                    stm: None,
                    sens: None,
                })
            }
        })
        .collect::<Result<_, Error>>()?;

    let dk = param.map(|p| mc.dk(p));
    let dk = dk.as_ref();
    let mut res = DVector::zeros(dim);
    let mut jac = with_jacobian.then(|| DMatrix::zeros(dim, dim));
    let mut pcol = param.map(|_| DVector::zeros(dim));

    // Sensitivity of the end of arc `a`: adds `g * d e_a` into row `row`.
    let add_arc_row = |jac: &mut DMatrix<f64>, row: usize, a: usize, g: &Grad| {
        let e = &ends[a];
        let phi = e.stm.as_ref().expect("jacobian requested");
        let gphi = g * phi;
        if a == 0 {
            for c in 0..3 {
                jac[(row, c)] += gphi[3 + c];
            }
        } else {
            let slot = layout.nodes[a - 1];
            for c in 0..6 {
                jac[(row, slot.z + c)] += gphi[c];
            }
            if let (Some(k), Some(con)) = (slot.jump, nodes[a - 1].jump) {
                jac[(row, k)] -= gphi[3 + con.index()];
            }
            let f = vector_field(mc, arcs[a], &e.z);
            jac[(row, slot.time)] -= (g * f)[0];
        }
        let f = vector_field(mc, arcs[a], &e.z);
        let tcol = if a == n { TF } else { layout.nodes[a].time };
        jac[(row, tcol)] += (g * f)[0];
    };

    let mut row = 0;
    for (i, spec) in nodes.iter().enumerate() {
        let z = y.node(i + 1);
        for &c in spec.conditions {
            let (v, g, dl) = condition(mc, c, &z, dk);
            res[row] = v;
            if let Some(j) = jac.as_mut() {
                let k = layout.nodes[i].z;
                for cc in 0..6 {
                    j[(row, k + cc)] = g[cc];
                }
            }
            if let Some(p) = pcol.as_mut() {
                p[row] = dl;
            }
            row += 1;
        }
    }
    for (v, g, dl) in endpoint(mc, &ends[n].z, dk) {
        res[row] = v;
        if let Some(j) = jac.as_mut() {
            add_arc_row(j, row, n, &g);
        }
        if let Some(p) = pcol.as_mut() {
            p[row] = dl + (g * ends[n].sens.expect("parameter requested"))[0];
        }
        row += 1;
    }
    for i in 1..=n {
        let d = ends[i - 1].z - y.node(i);
        for c in 0..6 {
            res[row + c] = d[c];
            let mut g = Grad::zeros();
            g[c] = 1.0;
            if let Some(j) = jac.as_mut() {
                add_arc_row(j, row + c, i - 1, &g);
                j[(row + c, layout.nodes[i - 1].z + c)] -= 1.0;
            }
            if let Some(p) = pcol.as_mut() {
                p[row + c] = ends[i - 1].sens.expect("parameter requested")[c];
            }
        }
        row += 6;
    }
    debug_assert_eq!(row, dim);
    Ok(Evaluation {
        residual: res,
        jacobian: jac,
        param: pcol,
    })
}

pub fn residual(
    mc: &ModelConstants,
    y: &Unknowns,
    tol: &Tolerances,
) -> Result<DVector<f64>, Error> {
    Ok(evaluate(mc, y, tol, false, None)?.residual)
}

pub fn jacobian(
    mc: &ModelConstants,
    y: &Unknowns,
    tol: &Tolerances,
) -> Result<DMatrix<f64>, Error> {
    Ok(evaluate(mc, y, tol, true, None)?
        .jacobian
        .expect("requested"))
}

/// `d residual / d lambda` at fixed unknowns.
pub fn param_column(
    mc: &ModelConstants,
    y: &Unknowns,
    tol: &Tolerances,
    p: Param,
) -> Result<DVector<f64>, Error> {
    Ok(evaluate(mc, y, tol, false, Some(p))?
        .param
        .expect("requested"))
}

/// One arc of a reconstructed extremal.
#[derive(Debug, Clone)]
pub struct TrajectoryArc {
    pub id: HamiltonianId,
    pub t0: f64,
    pub t1: f64,
    pub dense: DenseTrajectory,
}

/// Dense extremal obtained by flowing every arc from its start point.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub structure: Structure,
    pub arcs: Vec<TrajectoryArc>,
}

impl Trajectory {
    pub fn tf(&self) -> f64 {
        self.arcs.last().map_or(0.0, |a| a.t1)
    }

    /// Arc index used at time `t`; right-continuous at junctions.
    pub fn arc_at(&self, t: f64) -> usize {
        self.arcs
            .iter()
            .rposition(|a| a.t1 > a.t0 && t >= a.t0)
            .unwrap_or(0)
    }

    pub fn eval(&self, t: f64) -> Phase {
        self.arcs[self.arc_at(t)].dense.eval(t)
    }

    /// Samples `(t, z, u, eta, arc)` on every accepted step plus `n` uniform
    /// points per arc.
    pub fn samples(
        &self,
        mc: &ModelConstants,
        n: usize,
    ) -> Vec<(f64, Phase, f64, f64, HamiltonianId)> {
        let mut out = Vec::new();
        for arc in &self.arcs {
            let mut ts: Vec<f64> = arc.dense.t.clone();
            for k in 0..=n {
                ts.push(arc.t0 + (arc.t1 - arc.t0) * k as f64 / n.max(1) as f64);
            }
            ts.sort_by(f64::total_cmp);
            ts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            for t in ts {
                let z = arc.dense.eval(t);
                out.push((
                    t,
                    z,
                    control(mc, arc.id, &z),
                    multiplier(mc, arc.id, &z),
                    arc.id,
                ));
            }
        }
        out
    }
}

/// Boundary arcs carry `p1 = p3 = 0` (or `p1 = 0` on the current bound) on
/// an unstable costate subspace; long arcs amplify the local error by several
/// orders of magnitude, so they are integrated 1000 times tighter.
pub fn arc_tolerance(id: HamiltonianId, tol: &Tolerances) -> Tolerances {
    match id.constraint() {
        Some(_) => Tolerances {
            rel: tol.rel * 1e-3,
            abs: tol.abs * 1e-3,
            ..*tol
        },
        None => *tol,
    }
}

/// Reconstructs the extremal with dense output on every arc.
pub fn trajectory(
    mc: &ModelConstants,
    y: &Unknowns,
    tol: &Tolerances,
) -> Result<Trajectory, Error> {
    let arcs = y.structure.arcs();
    let out = (0..arcs.len())
        .into_par_iter()
        .map(|a| {
            let (t0, t1) = (y.time(a), y.time(a + 1));
            let r = expmap(
                mc,
                arcs[a],
                &y.start(a),
                t0,
                t1,
                &arc_tolerance(arcs[a], tol),
                true,
            )?;
            Ok(TrajectoryArc {
                id: arcs[a],
                t0,
                t1,
                dense: r.dense.expect("dense requested"),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(Trajectory {
        structure: y.structure,
        arcs: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Bounds;

    fn s1_guess() -> Unknowns {
        Unknowns::from_vec(
            Structure::S1,
            vec![0.3675202, 6.4479153, 0.2416860, 5.6156236],
        )
        .unwrap()
    }

    #[test]
    fn s1_residual_is_small_at_known_zero() {
        let mc = ModelConstants::reference();
        let r = residual(&mc, &s1_guess(), &Tolerances::default()).unwrap();
        assert!(r.norm() < 1e-6, "{r}");
    }

    /// Forward-propagated nodes make every matching residual vanish.
    fn consistent(s: Structure, mc: &ModelConstants) -> Unknowns {
        let mut y = Unknowns::zeros(s);
        y.set_p0(&nalgebra::Vector3::new(0.3, 6.0, 0.5));
        let n = y.n_nodes();
        let tf = 4.0;
        y.set_tf(tf);
        for i in 1..=n {
            y.set_time(i, tf * i as f64 / (n + 1) as f64);
            y.set_jump(i, -0.05 * i as f64);
        }
        let tol = Tolerances::default();
        for i in 1..=n {
            let z = expmap(
                mc,
                s.arcs()[i - 1],
                &y.start(i - 1),
                y.time(i - 1),
                y.time(i),
                &tol,
                false,
            )
            .unwrap()
            .z;
            y.set_node(i, &z);
        }
        y
    }

    #[test]
    fn matching_rows_vanish_on_propagated_nodes() {
        let mc = ModelConstants::reference();
        for s in Structure::ALL {
            let y = consistent(s, &mc);
            let r = residual(&mc, &y, &Tolerances::default()).unwrap();
            let m = s.n_conditions() + 4;
            assert!(r.rows(m, r.len() - m).amax() < 1e-9, "{s}");
        }
    }

    #[test]
    fn jacobian_and_param_column_match_finite_differences() {
        let mc = ModelConstants::new(
            Default::default(),
            Bounds {
                imax: 400.0,
                vmax: 90.0,
                alphaf: 100.0,
            },
        )
        .unwrap();
        let tol = Tolerances::uniform(1e-12);
        for s in Structure::ALL {
            let y = consistent(s, &mc);
            for p in [Param::Imax, Param::Vmax] {
                let ev = evaluate(&mc, &y, &tol, true, Some(p)).unwrap();
                let j = ev.jacobian.unwrap();
                for c in 0..y.values.len() {
                    let h = 1e-6 * (1.0 + y.values[c].abs());
                    let mut a = y.clone();
                    let mut b = y.clone();
                    a.values[c] += h;
                    b.values[c] -= h;
                    let col = (residual(&mc, &a, &tol).unwrap() - residual(&mc, &b, &tol).unwrap())
                        / (2.0 * h);
                    for r in 0..col.len() {
                        assert!(
                            (j[(r, c)] - col[r]).abs() <= 1e-5 * (1.0 + col[r].abs()),
                            "{s} J[{r},{c}] = {} vs {}",
                            j[(r, c)],
                            col[r]
                        );
                    }
                }
                let lam = mc.param(p);
                let h = 1e-6 * lam;
                let ra = residual(&mc.with_param(p, lam + h).unwrap(), &y, &tol).unwrap();
                let rb = residual(&mc.with_param(p, lam - h).unwrap(), &y, &tol).unwrap();
                let fd = (ra - rb) / (2.0 * h);
                let pc = ev.param.unwrap();
                for r in 0..fd.len() {
                    assert!(
                        (pc[r] - fd[r]).abs() <= 1e-5 * (1.0 + fd[r].abs()),
                        "{s} {p:?} row {r}"
                    );
                }
            }
        }
    }

    #[test]
    fn s1_time_column_has_zero_hamiltonian_row() {
        let mc = ModelConstants::reference();
        let j = jacobian(&mc, &s1_guess(), &Tolerances::default()).unwrap();
        assert!(j[(3, 3)].abs() < 1e-8);
    }

    #[test]
    fn trajectory_follows_arcs() {
        let mc = ModelConstants::reference();
        let y = consistent(Structure::S4, &mc);
        let tr = trajectory(&mc, &y, &Tolerances::default()).unwrap();
        assert_eq!(tr.arcs.len(), 5);
        assert_eq!(tr.arc_at(y.time(2) + 1e-9), 2);
        assert!((tr.eval(y.time(3)) - y.node(3)).amax() < 1e-8 || tr.arc_at(y.time(3)) == 3);
    }
}
