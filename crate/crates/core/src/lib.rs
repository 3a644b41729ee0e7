//! Dynamically embedded MPC: a constrained linear controller realized as a
//! primal-dual gradient flow on the KKT system of a finite-horizon
//! linear-quadratic problem, with an explicit reference governor that keeps
//! the problem feasible while the applied reference moves toward its target.

pub mod erg;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod lti;
pub mod ocp;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod terminal;
pub mod trace;

pub use error::{Error, Result};
pub use scenario::{Scenario, ScenarioFile};
pub use sim::{metrics, run, Metrics, RunStatus, SimOutcome};
pub use trace::{SimTrace, TraceRow};
