//! Corridor simulator for dynamic inductive charging with an uncoordinated
//! benchmark allocator and a receding-horizon QP allocator.

pub mod benchmark;
pub mod energy;
pub mod error;
pub mod metrics;
pub mod mobility;
pub mod mpc;
pub mod protocol;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod types;

pub use benchmark::{allocate_benchmark, AllocationPlan};
pub use error::{Error, Result};
pub use mpc::{MpcConfig, MpcController, MpcInstance};
pub use qp::{QpProblem, QpSolution, QpStatus, SolverSettings};
pub use scenario::{Scenario, ScenarioConfig, SimConfig, StripeSpec};
pub use types::{Direction, Strategy, StripeId, VehicleId};
