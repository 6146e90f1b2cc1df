//! Multilevel objective-function-free trust-region optimization.

pub mod bounds;
pub mod error;
pub mod hierarchy;
pub mod problems;
pub mod solver;
pub mod step;
pub mod trace;
pub mod weights;

pub use error::{MoffoError, Result};
pub use hierarchy::{LevelHierarchy, NoiseModel, Objective, TransferOperator};
pub use solver::{
    solve, solve_monitored, Floors, InvariantReport, SolveOutcome, SolveStatus, SolverConfig,
    TopMonitor,
};
pub use trace::{CostLedger, IterationRecord, StepKind};
pub use weights::{WeightKind, WeightState};
