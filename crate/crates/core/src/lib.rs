//! Benchmark harness for SAIL module definitions: parsing, dry-run
//! discovery of feasible scenarios, scheduling, execution and ranking.

pub mod sail;
pub mod types;
pub mod value;
pub mod data;
pub mod eval;
pub mod repo;
pub mod planner;
pub mod pod;
pub mod metrics;
pub mod ranking;
pub mod orchestrator;
pub mod pipeline;
pub mod report;
