//! Executes one concrete scenario: provisioning, training, testing and
//! fixtures, producing measurement records.

pub mod external;
pub mod knn;
pub mod linear;
pub mod mlp;
pub mod perm_sum;
pub mod solver;

pub use solver::{Head, Solver, SolverError, SolverFactory, SolverRegistry, SolverSpec, TaskIo, TrainState};
pub mod run;

pub use run::{provision, run_scenario, ClockMode, PodEnv, PodError, PodOutput, Provisioned, TestOutcome};
