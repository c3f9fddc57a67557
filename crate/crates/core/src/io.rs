//! Config loading and CSV/JSON export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::continuation::{Event, PathPoint};
use crate::model::{Bounds, CarParams, ModelConstants};
use crate::shooting::{SolveReport, Structure, Trajectory, Unknowns};
use crate::Error;

/// Car and bounds read from a flat JSON object.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub car: CarParams,
    pub bounds: Bounds,
}

const CAR_KEYS: [&str; 13] = [
    "Lm", "Rm", "Km", "Valim", "r", "Kr", "g", "Kf", "M", "rho", "S", "Cx", "Rbat",
];
const BOUND_KEYS: [&str; 3] = ["imax", "vmax", "alphaf"];

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Parses `{"Lm": .., "imax": .., ...}`. Missing keys keep the reference
/// values; unknown keys and non-positive values are rejected by name.
pub fn parse_config(text: &str) -> Result<Config, Error> {
    let value: Value = serde_json::from_str(text)?;
    let Value::Object(map) = value else {
        return Err(config_error("<root>", "expected a JSON object"));
    };
    config_from_map(&map)
}

fn config_from_map(map: &Map<String, Value>) -> Result<Config, Error> {
    for key in map.keys() {
        if !CAR_KEYS.contains(&key.as_str()) && !BOUND_KEYS.contains(&key.as_str()) {
            return Err(config_error(key, "unknown key"));
        }
    }
    let get = |key: &str, default: f64| -> Result<f64, Error> {
        match map.get(key) {
            None => Ok(default),
            Some(v) => {
                let x = v
                    .as_f64()
                    .ok_or_else(|| config_error(key, format!("expected a number, got {v}")))?;
                if x.is_finite() && x > 0.0 {
                    Ok(x)
                } else {
                    Err(config_error(key, format!("must be positive, got {x}")))
                }
            }
        }
    };
    let d = CarParams::default();
    let car = CarParams {
        lm: get("Lm", d.lm)?,
        rm: get("Rm", d.rm)?,
        km: get("Km", d.km)?,
        valim: get("Valim", d.valim)?,
        r: get("r", d.r)?,
        kr: get("Kr", d.kr)?,
        g: get("g", d.g)?,
        kf: get("Kf", d.kf)?,
        m: get("M", d.m)?,
        rho: get("rho", d.rho)?,
        s: get("S", d.s)?,
        cx: get("Cx", d.cx)?,
        rbat: get("Rbat", d.rbat)?,
    };
    let b = Bounds::default();
    let bounds = Bounds {
        imax: get("imax", b.imax)?,
        vmax: get("vmax", b.vmax)?,
        alphaf: get("alphaf", b.alphaf)?,
    };
    Ok(Config { car, bounds })
}

pub fn load_config(path: &Path) -> Result<Config, Error> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Error> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    Ok(serde_json::from_reader(std::io::BufReader::new(
        File::open(path)?,
    ))?)
}

/// A solve report with the problem it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub car: CarParams,
    pub bounds: Bounds,
    pub report: SolveReport,
}

impl SolutionFile {
    pub fn constants(&self) -> Result<ModelConstants, Error> {
        ModelConstants::new(self.car, self.bounds)
    }
}

/// Writes `t,x1,x2,x3,p1,p2,p3,u,eta,arc` with `n` extra uniform samples per
/// arc on top of the integrator steps.
pub fn write_trajectory_csv(
    path: &Path,
    mc: &ModelConstants,
    tr: &Trajectory,
    n: usize,
) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x1", "x2", "x3", "p1", "p2", "p3", "u", "eta", "arc"])?;
    for (t, z, u, eta, id) in tr.samples(mc, n) {
        let mut rec: Vec<String> = vec![t.to_string()];
        rec.extend(z.iter().map(|v| v.to_string()));
        rec.push(u.to_string());
        rec.push(eta.to_string());
        rec.push(format!("g{}", id.label()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Header of the path CSV for a structure.
pub fn path_header(structure: Structure) -> Vec<String> {
    let y = Unknowns::zeros(structure);
    let layout = y.layout();
    let mut h = vec!["s".to_string(), "lambda".into(), "tf".into()];
    h.extend((1..=layout.nodes.len()).map(|i| format!("t{i}")));
    h.extend(
        layout
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.jump.is_some())
            .map(|(i, _)| format!("nu{}", i + 1)),
    );
    h.push("residual".into());
    h.push("admissible".into());
    h
}

/// Writes `s,lambda,tf,t1,...,nu...,residual,admissible`, one row per point.
pub fn write_path_csv(
    path: &Path,
    structure: Structure,
    points: &[PathPoint],
    admissible: &[bool],
) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(path_header(structure))?;
    for (k, p) in points.iter().enumerate() {
        let y = Unknowns::from_vec(structure, p.y.clone())?;
        let n = y.n_nodes();
        let mut rec = vec![p.s.to_string(), p.lambda.to_string(), y.tf().to_string()];
        rec.extend((1..=n).map(|i| y.time(i).to_string()));
        rec.extend(
            (1..=n)
                .filter(|&i| y.layout().nodes[i - 1].jump.is_some())
                .map(|i| y.jump(i).to_string()),
        );
        rec.push(p.residual.to_string());
        rec.push(admissible.get(k).map_or(String::new(), |a| a.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Event record of a path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: String,
    pub lambda: f64,
    pub y: Vec<f64>,
}

impl From<&Event> for EventRecord {
    fn from(e: &Event) -> Self {
        Self {
            kind: e.kind.clone(),
            lambda: e.lambda,
            y: e.y.clone(),
        }
    }
}
