//! Distributed second-order optimization over communication graphs: the
//! DOBOC / DOBOC-K methods and a DGD baseline, run on a synchronous
//! message-passing simulator.

pub mod algorithms;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod objectives;
pub mod simulator;
pub mod verify;

pub use algorithms::{AlgoConfig, Algorithm};
pub use error::{Error, Result};
pub use graph::CommGraph;
pub use objectives::{LocalObjective, PenaltyProblem, StackedVector};
pub use simulator::{RunTrace, Simulator};
