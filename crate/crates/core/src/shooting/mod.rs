//! Multiple shooting for the five arc structures.
//!
//! Every structure is a fixed arc sequence `arc_0, ..., arc_n` separated by
//! `n` nodes. A node carries a time, an optional costate jump and a phase
//! point unknown; the residual stacks the node conditions, the endpoint
//! conditions and the matching conditions between consecutive arcs.

mod admissible;
mod eval;
mod newton;

pub use admissible::{
    check_admissible, suggest_after_empty, AdmissibilityReport, Violation, ViolationKind,
    EMPTY_ARC, TOL_C,
};
pub use eval::{
    evaluate, jacobian, param_column, residual, trajectory, Evaluation, Trajectory, TrajectoryArc,
};
pub use newton::{distance, multi_start_s1, solve, NewtonOptions, SolveReport};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::hamiltonians::{HamiltonianId, Phase};
use crate::model::Constraint;
use crate::Error;

use HamiltonianId::{HMinus, HPlus, HC1, HC3};

/// Scalar condition imposed on a node phase point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeCondition {
    /// `x1 - 1`
    C1,
    /// `x3 - 1`
    C3,
    /// Switching function `H1`.
    H1,
    /// `u_c1(x) - 1`, exit of the current bound with continuous control.
    Uc1Exit,
    /// `F0 . c3`, tangency to the speed bound.
    F0C3,
}

#[derive(Debug, Clone, Copy)]
pub struct NodeSpec {
    pub conditions: &'static [NodeCondition],
    pub jump: Option<Constraint>,
}

const ENTRY_C1: NodeSpec = NodeSpec {
    conditions: &[NodeCondition::C1, NodeCondition::H1],
    jump: None,
};
const EXIT_C1: NodeSpec = NodeSpec {
    conditions: &[NodeCondition::Uc1Exit],
    jump: Some(Constraint::C1),
};
const SWITCH: NodeSpec = NodeSpec {
    conditions: &[NodeCondition::H1],
    jump: None,
};
const FREE: NodeSpec = NodeSpec {
    conditions: &[],
    jump: None,
};
const TOUCH_C3: NodeSpec = NodeSpec {
    conditions: &[NodeCondition::C3, NodeCondition::F0C3],
    jump: Some(Constraint::C3),
};

/// Arc structure of a candidate extremal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// `+`
    S1,
    /// `+ c1 +`
    S2,
    /// `+ c1 + - +` with a contact point with the speed bound in the last
    /// bang arc.
    S3,
    /// `+ c1 + - c3`
    S4,
    /// `+ c1 - c3`
    S5,
}

impl Structure {
    pub const ALL: [Structure; 5] = [
        Structure::S1,
        Structure::S2,
        Structure::S3,
        Structure::S4,
        Structure::S5,
    ];

    pub fn arcs(self) -> &'static [HamiltonianId] {
        match self {
            Structure::S1 => &[HPlus],
            Structure::S2 => &[HPlus, HC1, HPlus],
            Structure::S3 => &[HPlus, HC1, HPlus, HMinus, HPlus, HPlus],
            Structure::S4 => &[HPlus, HC1, HPlus, HMinus, HC3],
            Structure::S5 => &[HPlus, HC1, HMinus, HC3],
        }
    }

    pub fn nodes(self) -> &'static [NodeSpec] {
        match self {
            Structure::S1 => &[],
            Structure::S2 => &[ENTRY_C1, EXIT_C1],
            Structure::S3 => &[ENTRY_C1, EXIT_C1, SWITCH, SWITCH, TOUCH_C3],
            Structure::S4 => &[ENTRY_C1, EXIT_C1, SWITCH, TOUCH_C3],
            Structure::S5 => &[ENTRY_C1, FREE, TOUCH_C3],
        }
    }

    /// Readable arc sequence such as `g+ gc1 g+`.
    pub fn label(self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for (a, id) in self.arcs().iter().enumerate() {
            // The two trailing bang arcs of S3 form one arc touching c3.
            if self == Structure::S3 && a == 5 {
                continue;
            }
            let mut s = format!("g{}", id.label());
            if self == Structure::S3 && a == 4 {
                s.push_str("^c3");
            }
            parts.push(s);
        }
        parts.join(" ")
    }

    pub fn layout(self) -> Layout {
        let nodes = self.nodes();
        let mut idx = 4;
        let mut slots = Vec::with_capacity(nodes.len());
        for spec in nodes {
            let time = idx;
            idx += 1;
            let jump = spec.jump.map(|_| {
                idx += 1;
                idx - 1
            });
            slots.push(NodeSlot { time, jump, z: 0 });
        }
        for s in &mut slots {
            s.z = idx;
            idx += 6;
        }
        Layout {
            nodes: slots,
            dim: idx,
        }
    }

    pub fn dim(self) -> usize {
        self.layout().dim
    }

    pub fn n_conditions(self) -> usize {
        self.nodes().iter().map(|n| n.conditions.len()).sum()
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Structure::S1 => "s1",
            Structure::S2 => "s2",
            Structure::S3 => "s3",
            Structure::S4 => "s4",
            Structure::S5 => "s5",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Structure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Structure::S1),
            "s2" => Ok(Structure::S2),
            "s3" => Ok(Structure::S3),
            "s4" => Ok(Structure::S4),
            "s5" => Ok(Structure::S5),
            _ => Err(format!("unknown structure '{s}' (expected s1..s5)")),
        }
    }
}

/// Offsets of one node inside the flat unknown vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeSlot {
    pub time: usize,
    pub jump: Option<usize>,
    pub z: usize,
}

/// Flat layout: `p0 (3), tf, [t_i, nu_i?] per node, z_i (6) per node`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub nodes: Vec<NodeSlot>,
    pub dim: usize,
}

pub const TF: usize = 3;

/// Shooting unknowns with named access.
#[derive(Debug, Clone, PartialEq)]
pub struct Unknowns {
    pub structure: Structure,
    pub values: DVector<f64>,
    layout: Layout,
}

impl Unknowns {
    pub fn zeros(structure: Structure) -> Self {
        let layout = structure.layout();
        Self {
            structure,
            values: DVector::zeros(layout.dim),
            layout,
        }
    }

    pub fn from_vec(structure: Structure, values: Vec<f64>) -> Result<Self, Error> {
        let layout = structure.layout();
        if values.len() != layout.dim {
            return Err(Error::Dimension {
                expected: layout.dim,
                got: values.len(),
            });
        }
        Ok(Self {
            structure,
            values: DVector::from_vec(values),
            layout,
        })
    }

    pub fn with_values(&self, values: DVector<f64>) -> Self {
        debug_assert_eq!(values.len(), self.layout.dim);
        Self {
            structure: self.structure,
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_nodes(&self) -> usize {
        self.layout.nodes.len()
    }

    pub fn p0(&self) -> Vector3<f64> {
        Vector3::new(self.values[0], self.values[1], self.values[2])
    }

    pub fn set_p0(&mut self, p: &Vector3<f64>) {
        self.values.rows_mut(0, 3).copy_from(p);
    }

    pub fn tf(&self) -> f64 {
        self.values[TF]
    }

    pub fn set_tf(&mut self, tf: f64) {
        self.values[TF] = tf;
    }

    /// Time of node `i` (1-based); `time(0) = 0` and `time(n+1) = tf`.
    pub fn time(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else if i > self.n_nodes() {
            self.tf()
        } else {
            self.values[self.layout.nodes[i - 1].time]
        }
    }

    pub fn set_time(&mut self, i: usize, t: f64) {
        let k = self.layout.nodes[i - 1].time;
        self.values[k] = t;
    }

    /// Jump at node `i`, zero when the node has none.
    pub fn jump(&self, i: usize) -> f64 {
        self.layout.nodes[i - 1]
            .jump
            .map_or(0.0, |k| self.values[k])
    }

    pub fn set_jump(&mut self, i: usize, nu: f64) {
        if let Some(k) = self.layout.nodes[i - 1].jump {
            self.values[k] = nu;
        }
    }

    pub fn node(&self, i: usize) -> Phase {
        let k = self.layout.nodes[i - 1].z;
        Phase::from_fn(|r, _| self.values[k + r])
    }

    pub fn set_node(&mut self, i: usize, z: &Phase) {
        let k = self.layout.nodes[i - 1].z;
        self.values.rows_mut(k, 6).copy_from(z);
    }

    /// Phase point leaving node `i` after the costate jump; `start(0)` is
    /// the initial point `(0, 0, 0, p0)`.
    pub fn start(&self, i: usize) -> Phase {
        if i == 0 {
            let p = self.p0();
            return Phase::new(0.0, 0.0, 0.0, p[0], p[1], p[2]);
        }
        let mut z = self.node(i);
        if let Some(c) = self.structure.nodes()[i - 1].jump {
            z[3 + c.index()] -= self.jump(i);
        }
        z
    }

    /// Length of arc `a` (0-based).
    pub fn arc_length(&self, a: usize) -> f64 {
        self.time(a + 1) - self.time(a)
    }

    /// Names of the flat entries, used for CSV headers.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "p0_1".to_string(),
            "p0_2".into(),
            "p0_3".into(),
            "tf".into(),
        ];
        names.resize(self.layout.dim, String::new());
        for (i, s) in self.layout.nodes.iter().enumerate() {
            names[s.time] = format!("t{}", i + 1);
            if let Some(k) = s.jump {
                names[k] = format!("nu{}", i + 1);
            }
            for (r, lbl) in ["x1", "x2", "x3", "p1", "p2", "p3"].iter().enumerate() {
                names[s.z + r] = format!("z{}_{}", i + 1, lbl);
            }
        }
        names
    }
}

/// Serialized form with every slice named.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedUnknowns {
    pub structure: Structure,
    pub p0: [f64; 3],
    pub tf: f64,
    pub times: Vec<f64>,
    /// `(node, nu)` for nodes carrying a jump.
    pub jumps: Vec<(usize, f64)>,
    pub nodes: Vec<[f64; 6]>,
}

impl From<&Unknowns> for NamedUnknowns {
    fn from(y: &Unknowns) -> Self {
        let n = y.n_nodes();
        let p = y.p0();
        NamedUnknowns {
            structure: y.structure,
            p0: [p[0], p[1], p[2]],
            tf: y.tf(),
            times: (1..=n).map(|i| y.time(i)).collect(),
            jumps: (1..=n)
                .filter(|&i| y.layout.nodes[i - 1].jump.is_some())
                .map(|i| (i, y.jump(i)))
                .collect(),
            nodes: (1..=n).map(|i| y.node(i).into()).collect(),
        }
    }
}

impl TryFrom<NamedUnknowns> for Unknowns {
    type Error = Error;
    fn try_from(v: NamedUnknowns) -> Result<Self, Error> {
        let mut y = Unknowns::zeros(v.structure);
        let n = y.n_nodes();
        if v.times.len() != n || v.nodes.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: v.times.len().min(v.nodes.len()),
            });
        }
        let n_jumps = y.layout.nodes.iter().filter(|s| s.jump.is_some()).count();
        if v.jumps.len() != n_jumps
            || v.jumps
                .iter()
                .any(|&(i, _)| i == 0 || i > n || y.layout.nodes[i - 1].jump.is_none())
        {
            return Err(Error::Dimension {
                expected: n_jumps,
                got: v.jumps.len(),
            });
        }
        y.set_p0(&Vector3::from(v.p0));
        y.set_tf(v.tf);
        for i in 1..=n {
            y.set_time(i, v.times[i - 1]);
            y.set_node(i, &Phase::from(v.nodes[i - 1]));
        }
        for (i, nu) in v.jumps {
            y.set_jump(i, nu);
        }
        Ok(y)
    }
}

impl Serialize for Unknowns {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        NamedUnknowns::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Unknowns {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = NamedUnknowns::deserialize(d)?;
        Unknowns::try_from(v).map_err(serde::de::Error::custom)
    }
}
