//! Per-agent update rules for DGD, DOBOC and DOBOC-K, plus centralized
//! reference methods.
//!
//! Every distributed rule reads only an [`AgentView`]: the agent's own state,
//! the messages it received from its neighbors this round, and its row of `W`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::weighted_sum;
use crate::objectives::{disagreement, penalty_gradient_block, LocalObjective, PenaltyProblem, StackedVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dgd,
    Doboc,
    DobocK,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Dgd => "dgd",
            Algorithm::Doboc => "doboc",
            Algorithm::DobocK => "doboc-k",
        }
    }

    /// Number of inner `ĝ` updates performed in outer iteration `k`.
    pub fn inner_updates(self, k: usize, cfg: &AlgoConfig) -> usize {
        match self {
            Algorithm::Dgd => 0,
            Algorithm::Doboc => k,
            Algorithm::DobocK => cfg.k_budget.unwrap_or(1) - 1,
        }
    }

    /// Communication rounds in outer iteration `k`: one `x` broadcast plus one
    /// round per inner update.
    pub fn rounds(self, k: usize, cfg: &AlgoConfig) -> usize {
        1 + self.inner_updates(k, cfg)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgd" => Ok(Algorithm::Dgd),
            "doboc" => Ok(Algorithm::Doboc),
            "doboc-k" => Ok(Algorithm::DobocK),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?}; expected dgd, doboc or doboc-k"
            ))),
        }
    }
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoConfig {
    /// Inner step size `η`.
    pub eta: f64,
    /// Penalty coefficient `λ`; must match the problem's.
    pub lambda: f64,
    /// Communication budget `K` per outer iteration (DOBOC-K only).
    pub k_budget: Option<usize>,
    pub max_iter: usize,
    /// Stop once `‖∇F(x_k)‖ ≤ tol`.
    pub tol: f64,
    /// Mutation hook for the verification suite: flips the sign of the
    /// Hessian term in the inner recursion.
    #[doc(hidden)]
    pub inject_sign_flip: bool,
}

impl AlgoConfig {
    pub fn new(eta: f64, lambda: f64) -> Self {
        Self {
            eta,
            lambda,
            k_budget: None,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            inject_sign_flip: false,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k_budget = Some(k);
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self, algo: Algorithm) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be nonnegative, got {}", self.tol)));
        }
        match (algo, self.k_budget) {
            (Algorithm::DobocK, None) => Err(Error::InvalidParameter("doboc-k requires K".into())),
            (Algorithm::DobocK, Some(0)) => Err(Error::InvalidParameter("K must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// What agent `i` can see during one round.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub agent: usize,
    pub round: usize,
    pub own_x: &'a [f64],
    pub neighbor_x: &'a BTreeMap<usize, Vec<f64>>,
    pub own_g: Option<&'a [f64]>,
    pub neighbor_g: Option<&'a BTreeMap<usize, Vec<f64>>>,
    /// Row of `W` over `N_i ∪ {i}`, ascending.
    pub weights: &'a [(usize, f64)],
    pub local: &'a dyn LocalObjective,
}

impl<'a> AgentView<'a> {
    fn missing(&self, j: usize, what: &str) -> Error {
        Error::Protocol {
            agent: self.agent + 1,
            round: self.round,
            detail: format!("missing {what} message from agent {}", j + 1),
        }
    }

    fn fetch_x(&self, j: usize) -> Result<&'a [f64]> {
        if j == self.agent {
            return Ok(self.own_x);
        }
        self.neighbor_x
            .get(&j)
            .map(Vec::as_slice)
            .ok_or_else(|| self.missing(j, "x"))
    }

    fn fetch_g(&self, j: usize) -> Result<&'a [f64]> {
        if j == self.agent {
            return self.own_g.ok_or_else(|| self.missing(j, "own ĝ"));
        }
        self.neighbor_g
            .and_then(|m| m.get(&j))
            .map(Vec::as_slice)
            .ok_or_else(|| self.missing(j, "ĝ"))
    }

    /// Block `i` of `∇F(x_k)` from local information.
    pub fn penalty_gradient(&self, lambda: f64) -> Result<Vec<f64>> {
        let dis = disagreement(self.weights, self.agent, self.own_x, |j| self.fetch_x(j))?;
        let grad_f = self.local.gradient(self.own_x);
        Ok(penalty_gradient_block(&grad_f, &dis, lambda))
    }
}

/// Quantities that stay fixed across the inner rounds of one outer iteration:
/// `η·[∇F(x_k)]_i` and `∇²f_i(x_k^i)`.
#[derive(Debug, Clone)]
pub struct AgentFrame {
    drive: Vec<f64>,
    hessian: Option<DMatrix<f64>>,
    eta: f64,
    lambda: f64,
    flip: bool,
}

impl AgentFrame {
    pub fn prepare(view: &AgentView<'_>, cfg: &AlgoConfig, with_hessian: bool) -> Result<Self> {
        let grad = view.penalty_gradient(cfg.lambda)?;
        let drive = grad.iter().map(|g| cfg.eta * g).collect();
        let hessian = with_hessian.then(|| view.local.hessian(view.own_x));
        Ok(Self {
            drive,
            hessian,
            eta: cfg.eta,
            lambda: cfg.lambda,
            flip: cfg.inject_sign_flip,
        })
    }

    /// `ĝ_0^i`.
    pub fn init(&self) -> Vec<f64> {
        self.drive.clone()
    }

    /// `ĝ_{l+1}^i` from the round-`l` values of the agent and its neighbors.
    pub fn inner_step(&self, view: &AgentView<'_>) -> Result<Vec<f64>> {
        let own_g = view.fetch_g(view.agent)?;
        let mixed = weighted_sum(view.weights, own_g.len(), |j| view.fetch_g(j))?;
        let hg: Vec<f64> = match &self.hessian {
            Some(h) => (h * DVector::from_column_slice(own_g)).as_slice().to_vec(),
            None => view.local.hessian_vec(view.own_x, own_g),
        };
        let keep = 1.0 - self.eta / self.lambda;
        let blend = self.eta / self.lambda;
        let sign = if self.flip { -1.0 } else { 1.0 };
        Ok(self
            .drive
            .iter()
            .zip(own_g)
            .zip(&hg)
            .zip(&mixed)
            .map(|(((d, g), hg), mg)| d + keep * g - sign * self.eta * hg + blend * mg)
            .collect())
    }
}

/// `x_{k+1}^i = Σ_j w_ij x_k^j − λ∇f_i(x_k^i)`, evaluated as
/// `x_k^i − λ[∇F(x_k)]_i`.
pub fn dgd_step(view: &AgentView<'_>, cfg: &AlgoConfig) -> Result<Vec<f64>> {
    let grad = view.penalty_gradient(cfg.lambda)?;
    Ok(view
        .own_x
        .iter()
        .zip(&grad)
        .map(|(x, g)| x - cfg.lambda * g)
        .collect())
}

/// `ĝ_0^i = η[∇f_i(x_k^i) + (1/λ)(x_k^i − Σ_j w_ij x_k^j)]`.
pub fn doboc_inner_init(view: &AgentView<'_>, cfg: &AlgoConfig) -> Result<Vec<f64>> {
    Ok(AgentFrame::prepare(view, cfg, false)?.init())
}

/// One inner update of the DOBOC recursion for a single agent.
pub fn doboc_inner_step(view: &AgentView<'_>, cfg: &AlgoConfig) -> Result<Vec<f64>> {
    AgentFrame::prepare(view, cfg, true)?.inner_step(view)
}

pub fn doboc_outer_update(x: &[f64], g_final: &[f64]) -> Vec<f64> {
    x.iter().zip(g_final).map(|(a, b)| a - b).collect()
}

/// `x − step·∇F(x)`.
pub fn centralized_gd_step(prob: &PenaltyProblem, x: &StackedVector, step: f64) -> Result<StackedVector> {
    let grad = prob.gradient(x)?;
    let data = x.as_slice().iter().zip(grad.as_slice()).map(|(a, g)| a - step * g).collect();
    StackedVector::from_flat(x.n(), x.p(), data)
}

pub const NEWTON_MAX_ITER: usize = 200;
pub const NEWTON_TOL: f64 = 1e-12;

/// Damped Newton with Armijo backtracking on a dense Hessian.
pub(crate) fn newton_minimize(
    value: impl Fn(&DVector<f64>) -> Result<f64>,
    gradient: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    hessian: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
    x0: DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let mut x = x0;
    let mut g = gradient(&x)?;
    for _ in 0..NEWTON_MAX_ITER {
        if g.norm() <= tol {
            return Ok(x);
        }
        let h = hessian(&x)?;
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => h.lu().solve(&g).ok_or_else(|| Error::NoConvergence {
                iters: 0,
                grad_norm: g.norm(),
            })?,
        };
        let fx = value(&x)?;
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut candidate = &x - &step;
        while value(&candidate)? > fx - 1e-4 * t * slope && t > 1e-10 {
            t *= 0.5;
            candidate = &x - &step * t;
        }
        if t <= 1e-10 {
            // Armijo cannot resolve descent below rounding; take the full step.
            candidate = &x - &step;
        }
        x = candidate;
        g = gradient(&x)?;
    }
    if g.norm() <= tol {
        return Ok(x);
    }
    Err(Error::NoConvergence {
        iters: NEWTON_MAX_ITER,
        grad_norm: g.norm(),
    })
}

/// Minimizer of `F` by damped Newton on the dense `∇²F`.
pub fn centralized_newton_solve(prob: &PenaltyProblem, x0: &StackedVector, tol: f64) -> Result<StackedVector> {
    let (n, p) = (prob.n(), prob.p());
    let wrap = |v: &DVector<f64>| StackedVector::from_dvector(n, p, v);
    let x = newton_minimize(
        |v| prob.value(&wrap(v)?),
        |v| Ok(prob.gradient(&wrap(v)?)?.to_dvector()),
        |v| prob.dense_hessian(&wrap(v)?),
        x0.to_dvector(),
        tol,
    )?;
    StackedVector::from_dvector(n, p, &x)
}

/// Minimizer `y*` of `f(y) = Σ_i f_i(y)`.
pub fn consensus_newton_solve(prob: &PenaltyProblem, tol: f64) -> Result<Vec<f64>> {
    let y = newton_minimize(
        |v| Ok(prob.sum_value(v.as_slice())),
        |v| Ok(DVector::from_vec(prob.sum_gradient(v.as_slice()))),
        |v| Ok(prob.sum_hessian(v.as_slice())),
        DVector::zeros(prob.p()),
        tol,
    )?;
    Ok(y.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn views_for<'a>(
        prob: &'a PenaltyProblem,
        x: &'a StackedVector,
        inbox_x: &'a [BTreeMap<usize, Vec<f64>>],
        g: Option<(&'a StackedVector, &'a [BTreeMap<usize, Vec<f64>>])>,
    ) -> Vec<AgentView<'a>> {
        (0..prob.n())
            .map(|i| AgentView {
                agent: i,
                round: 0,
                own_x: x.block(i),
                neighbor_x: &inbox_x[i],
                own_g: g.map(|(gv, _)| gv.block(i)),
                neighbor_g: g.map(|(_, inbox)| &inbox[i]),
                weights: prob.graph().row(i),
                local: prob.local(i),
            })
            .collect()
    }

    fn inbox(prob: &PenaltyProblem, x: &StackedVector) -> Vec<BTreeMap<usize, Vec<f64>>> {
        (0..prob.n())
            .map(|i| {
                prob.graph()
                    .neighbors(i)
                    .iter()
                    .map(|&j| (j, x.block(j).to_vec()))
                    .collect()
            })
            .collect()
    }

    fn sv(v: &[f64]) -> StackedVector {
        StackedVector::from_blocks(v.iter().map(|&a| vec![a]).collect()).unwrap()
    }

    fn stack(v: Vec<Vec<f64>>) -> StackedVector {
        StackedVector::from_blocks(v).unwrap()
    }

    #[test]
    fn dgd_fixture_a() {
        let prob = fixtures::fixture_a(1.0);
        let cfg = AlgoConfig::new(1.0, 1.0);
        let x = sv(&[1.0, 0.0]);
        let ib = inbox(&prob, &x);
        let out: Vec<Vec<f64>> = views_for(&prob, &x, &ib, None)
            .iter()
            .map(|v| dgd_step(v, &cfg).unwrap())
            .collect();
        assert_eq!(stack(out.clone()), sv(&[0.5, -0.5]));
        assert_eq!(stack(out), centralized_gd_step(&prob, &x, 1.0).unwrap());

        let star = sv(&[0.5, -0.5]);
        let ib = inbox(&prob, &star);
        let out: Vec<Vec<f64>> = views_for(&prob, &star, &ib, None)
            .iter()
            .map(|v| dgd_step(v, &cfg).unwrap())
            .collect();
        assert_eq!(stack(out), star);
    }

    #[test]
    fn dgd_single_agent_is_gradient_step() {
        let prob = fixtures::single_agent(1.0);
        let cfg = AlgoConfig::new(0.1, 1.0);
        let x = stack(vec![vec![0.3, -0.2, 1.0]]);
        let ib = inbox(&prob, &x);
        let v = views_for(&prob, &x, &ib, None);
        let got = dgd_step(&v[0], &cfg).unwrap();
        let g = prob.local(0).gradient(x.block(0));
        for r in 0..3 {
            assert!((got[r] - (x.block(0)[r] - g[r])).abs() < 1e-15);
        }
    }

    #[test]
    fn inner_init_and_step_fixture_a() {
        let prob = fixtures::fixture_a(1.0);
        let cfg = AlgoConfig::new(0.5, 1.0);

        let x = sv(&[0.0, 0.0]);
        let ib = inbox(&prob, &x);
        let g0: Vec<Vec<f64>> = views_for(&prob, &x, &ib, None)
            .iter()
            .map(|v| doboc_inner_init(v, &cfg).unwrap())
            .collect();
        assert_eq!(stack(g0.clone()), sv(&[-0.5, 0.5]));
        let g0 = stack(g0);
        let gib = inbox(&prob, &g0);
        let g1: Vec<Vec<f64>> = views_for(&prob, &x, &ib, Some((&g0, &gib)))
            .iter()
            .map(|v| doboc_inner_step(v, &cfg).unwrap())
            .collect();
        assert_eq!(stack(g1), sv(&[-0.5, 0.5]));
        let x1: Vec<Vec<f64>> = (0..2).map(|i| doboc_outer_update(x.block(i), g0.block(i))).collect();
        assert_eq!(stack(x1), sv(&[0.5, -0.5]));

        let x = sv(&[1.0, 0.0]);
        let ib = inbox(&prob, &x);
        let g0: Vec<Vec<f64>> = views_for(&prob, &x, &ib, None)
            .iter()
            .map(|v| doboc_inner_init(v, &cfg).unwrap())
            .collect();
        let g0 = stack(g0);
        assert_eq!(g0, sv(&[0.25, 0.25]));
        let gib = inbox(&prob, &g0);
        let g1: Vec<Vec<f64>> = views_for(&prob, &x, &ib, Some((&g0, &gib)))
            .iter()
            .map(|v| doboc_inner_step(v, &cfg).unwrap())
            .collect();
        assert_eq!(stack(g1), sv(&[0.375, 0.375]));
    }

    #[test]
    fn zero_at_stationary_point() {
        let prob = fixtures::fixture_a(1.0);
        let cfg = AlgoConfig::new(0.5, 1.0);
        let x = sv(&[0.5, -0.5]);
        let ib = inbox(&prob, &x);
        let views = views_for(&prob, &x, &ib, None);
        let g0 = stack(views.iter().map(|v| doboc_inner_init(v, &cfg).unwrap()).collect());
        assert_eq!(g0, sv(&[0.0, 0.0]));
        let gib = inbox(&prob, &g0);
        for v in views_for(&prob, &x, &ib, Some((&g0, &gib))) {
            assert_eq!(doboc_inner_step(&v, &cfg).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn outer_update() {
        assert_eq!(doboc_outer_update(&[1.0], &[0.375]), vec![0.625]);
        assert_eq!(doboc_outer_update(&[1.0, 2.0], &[0.0, 0.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn missing_neighbor_is_protocol_violation() {
        let prob = fixtures::fixture_a(1.0);
        let cfg = AlgoConfig::new(0.5, 1.0);
        let x = sv(&[1.0, 0.0]);
        let empty = vec![BTreeMap::new(), BTreeMap::new()];
        let views = views_for(&prob, &x, &empty, None);
        match dgd_step(&views[0], &cfg) {
            Err(Error::Protocol { agent, round, detail }) => {
                assert_eq!((agent, round), (1, 0));
                assert!(detail.contains("agent 2"), "{detail}");
            }
            other => panic!("expected protocol violation, got {other:?}"),
        }
        assert!(doboc_inner_step(&views[1], &cfg).is_err());
    }

    #[test]
    fn centralized_gd_degenerate_and_fixed() {
        let prob = fixtures::fixture_a(1.0);
        let x = sv(&[0.3, 0.9]);
        assert_eq!(centralized_gd_step(&prob, &x, 0.0).unwrap(), x);
        let star = sv(&[0.5, -0.5]);
        assert_eq!(centralized_gd_step(&prob, &star, 1.0).unwrap(), star);
    }

    #[test]
    fn newton_solutions() {
        let prob = fixtures::fixture_a(1.0);
        let xs = centralized_newton_solve(&prob, &StackedVector::zeros(2, 1), NEWTON_TOL).unwrap();
        assert!((xs.block(0)[0] - 0.5).abs() < 1e-14 && (xs.block(1)[0] + 0.5).abs() < 1e-14);

        let single = fixtures::fixture_a_single();
        let xs = centralized_newton_solve(&single, &StackedVector::zeros(1, 1), NEWTON_TOL).unwrap();
        assert!((xs.block(0)[0] - 1.0).abs() < 1e-15);

        let y = consensus_newton_solve(&prob, NEWTON_TOL).unwrap();
        assert!(y[0].abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let cfg = AlgoConfig::new(0.5, 1.0);
        assert!(cfg.validate(Algorithm::Doboc).is_ok());
        assert!(cfg.validate(Algorithm::DobocK).is_err());
        assert!(cfg.clone().with_k(0).validate(Algorithm::DobocK).is_err());
        assert!(AlgoConfig::new(-1.0, 1.0).validate(Algorithm::Dgd).is_err());
        assert!(AlgoConfig::new(1.0, 0.0).validate(Algorithm::Dgd).is_err());
        assert_eq!("doboc-k".parse::<Algorithm>().unwrap(), Algorithm::DobocK);
        assert!("newton".parse::<Algorithm>().is_err());
    }

    #[test]
    fn round_counts() {
        let cfg = AlgoConfig::new(0.5, 1.0).with_k(4);
        assert_eq!(Algorithm::Dgd.rounds(7, &cfg), 1);
        assert_eq!(Algorithm::Doboc.rounds(7, &cfg), 8);
        assert_eq!(Algorithm::DobocK.rounds(7, &cfg), 4);
    }
}
