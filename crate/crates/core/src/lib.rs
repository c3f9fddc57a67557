//! Indirect shooting and homotopy solver for the minimum-time electric
//! vehicle problem with current and speed constraints.

pub mod continuation;
pub mod flow;
pub mod hamiltonians;
pub mod io;
pub mod model;
pub mod scenario;
pub mod shooting;

mod error;

pub use error::Error;
pub use flow::{DenseTrajectory, FlowResult, Tolerances};
pub use hamiltonians::{HamiltonianId, Phase};
pub use model::{Bounds, CarParams, Constraint, ModelConstants, Param, State};
pub use shooting::{SolveReport, Structure, Unknowns};
