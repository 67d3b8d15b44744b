//! Multi-agent code generation grounded in sandboxed execution.

pub mod agents;
pub mod analysis;
pub mod config;
pub mod diff;
pub mod eval;
pub mod mdp;
pub mod orchestrator;
pub mod retrieval;
pub mod sandbox;
pub mod types;
