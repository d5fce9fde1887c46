//! Small reference problems shared by the verification suite and tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::graph::CommGraph;
use crate::objectives::{
    logistic_family, random_quadratic_family, synthetic_logistic_data, PenaltyProblem, Quadratic, SharedObjective,
};

pub const RING_SEED: u64 = 2024;
pub const STAR_SEED: u64 = 7;
pub const SINGLE_SEED: u64 = 11;

/// Two agents, `f₁ = ½(y − 1)²`, `f₂ = ½(y + 1)²`, `W = [[½, ½], [½, ½]]`.
pub fn fixture_a(lambda: f64) -> PenaltyProblem {
    let graph = CommGraph::metropolis(2, &[(0, 1)]).expect("edge graph");
    let locals = vec![shifted_unit(-1.0), shifted_unit(1.0)];
    PenaltyProblem::new(graph, locals, lambda).expect("fixture A")
}

/// `½(y + b)²` as `½y² + by + ½b²`.
fn shifted_unit(b: f64) -> SharedObjective {
    let q = Quadratic::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, b)).expect("unit quadratic");
    Arc::new(q.with_offset(0.5 * b * b))
}

/// One agent with `f₁ = ½(y − 1)²`.
pub fn fixture_a_single() -> PenaltyProblem {
    let graph = CommGraph::metropolis(1, &[]).expect("single agent");
    PenaltyProblem::new(graph, vec![shifted_unit(-1.0)], 1.0).expect("single fixture")
}

/// One agent, `p = 2`, `f₁(y) = ½yᵀdiag(1, 2)y + (−1, −½)ᵀy`. Every
/// quantity here is a short dyadic rational, so inner recursions with
/// `η = 1/M = ½` are computed without rounding.
pub fn single_agent_dyadic() -> PenaltyProblem {
    let graph = CommGraph::metropolis(1, &[]).expect("single agent");
    let q = Quadratic::new(
        DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 2.0])),
        DVector::from_column_slice(&[-1.0, -0.5]),
    )
    .expect("diagonal quadratic");
    PenaltyProblem::new(graph, vec![Arc::new(q) as SharedObjective], 1.0).expect("dyadic fixture")
}

/// One agent, `p = 3`, quadratic with Hessian spectrum `[1, 10]`.
pub fn single_agent(lambda: f64) -> PenaltyProblem {
    let graph = CommGraph::metropolis(1, &[]).expect("single agent");
    let locals = random_quadratic_family(1, 3, (1.0, 10.0), SINGLE_SEED).expect("quadratic");
    PenaltyProblem::new(graph, locals, lambda).expect("single agent fixture")
}

pub fn ring_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, (i + 1) % n)).collect()
}

/// Five-agent ring, `p = 3`, quadratics with spectrum `[1, 10]`, `λ = 1`.
pub fn ring_quadratic() -> PenaltyProblem {
    let graph = CommGraph::metropolis(5, &ring_edges(5)).expect("ring");
    let locals = random_quadratic_family(5, 3, (1.0, 10.0), RING_SEED).expect("quadratics");
    PenaltyProblem::new(graph, locals, 1.0).expect("ring fixture")
}

/// Four-agent star centered on agent 1, `p = 2`, regularized logistic losses
/// with 8 samples per agent, `μ = 0.5`, `λ = 1`.
pub fn star_logistic() -> PenaltyProblem {
    let graph = CommGraph::metropolis(4, &[(0, 1), (0, 2), (0, 3)]).expect("star");
    let data = synthetic_logistic_data(4, 2, 8, STAR_SEED);
    let locals = logistic_family(2, data, 0.5).expect("logistic");
    PenaltyProblem::new(graph, locals, 1.0).expect("star fixture")
}

/// The three fixtures used by the oracle, spectral and consistency checks.
pub fn standard() -> Vec<(&'static str, PenaltyProblem)> {
    vec![
        ("fixture-a", fixture_a(1.0)),
        ("ring-quadratic", ring_quadratic()),
        ("star-logistic", star_logistic()),
    ]
}
