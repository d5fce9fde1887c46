//! Synchronous message-passing execution of the distributed algorithms.
//!
//! Each round every agent broadcasts one payload to its neighbors through a
//! [`RoundMailbox`]. The mailbox rejects deliveries along non-edges and the
//! barrier ([`RoundMailbox::seal`]) refuses to release a round until every
//! agent holds a message from each of its neighbors. Agent step functions
//! only ever see their own inbox.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::algorithms::{
    centralized_newton_solve, consensus_newton_solve, dgd_step, doboc_outer_update, AgentFrame, AgentView,
    AlgoConfig, Algorithm, NEWTON_TOL,
};
use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::objectives::{norm, sub, PenaltyProblem, StackedVector};

/// Env var capping the worker count.
pub const THREADS_ENV: &str = "DOBOC_THREADS";

pub type Inbox = BTreeMap<usize, Vec<f64>>;

/// Messages in flight during one synchronous round.
#[derive(Debug)]
pub struct RoundMailbox<'g> {
    graph: &'g CommGraph,
    round: usize,
    inboxes: Vec<Inbox>,
    scalars: usize,
}

impl<'g> RoundMailbox<'g> {
    pub fn new(graph: &'g CommGraph, round: usize) -> Self {
        Self {
            graph,
            round,
            inboxes: vec![BTreeMap::new(); graph.n()],
            scalars: 0,
        }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn deliver(&mut self, from: usize, to: usize, payload: Vec<f64>) -> Result<()> {
        let n = self.graph.n();
        if from >= n || to >= n || !self.graph.is_edge(from, to) {
            return Err(Error::Protocol {
                agent: to + 1,
                round: self.round,
                detail: format!("message from non-neighbor agent {}", from + 1),
            });
        }
        let len = payload.len();
        if self.inboxes[to].insert(from, payload).is_some() {
            return Err(Error::Protocol {
                agent: to + 1,
                round: self.round,
                detail: format!("duplicate message from agent {}", from + 1),
            });
        }
        self.scalars += len;
        Ok(())
    }

    /// Every agent broadcasts its block of `payload` to all neighbors.
    pub fn broadcast(&mut self, payload: &StackedVector) -> Result<()> {
        let graph = self.graph;
        for i in 0..graph.n() {
            for &j in graph.neighbors(i) {
                self.deliver(i, j, payload.block(i).to_vec())?;
            }
        }
        Ok(())
    }

    /// Scalars delivered so far this round.
    pub fn scalars(&self) -> usize {
        self.scalars
    }

    /// Barrier: every agent must hold exactly one message per neighbor.
    pub fn seal(self) -> Result<Vec<Inbox>> {
        for (i, inbox) in self.inboxes.iter().enumerate() {
            if let Some(&j) = self.graph.neighbors(i).iter().find(|j| !inbox.contains_key(j)) {
                return Err(Error::Protocol {
                    agent: i + 1,
                    round: self.round,
                    detail: format!("missing message from agent {}", j + 1),
                });
            }
        }
        Ok(self.inboxes)
    }
}

/// Communication spent so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub rounds: usize,
    pub scalars: usize,
}

/// Penalty minimizer, its value, and the original problem's minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x_star: StackedVector,
    pub f_star: f64,
    pub y_star: Vec<f64>,
}

pub fn compute_reference(prob: &PenaltyProblem) -> Result<Reference> {
    let x_star = centralized_newton_solve(prob, &StackedVector::zeros(prob.n(), prob.p()), NEWTON_TOL)?;
    let f_star = prob.value(&x_star)?;
    let y_star = consensus_newton_solve(prob, NEWTON_TOL)?;
    Ok(Reference { x_star, f_star, y_star })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub rounds: usize,
    pub messages: usize,
    pub f_gap: f64,
    pub grad_norm: f64,
    pub consensus_err: f64,
    pub err_x: f64,
    pub err_ybar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub algorithm: Algorithm,
    pub eta: f64,
    /// State before the first iteration (`iter = 0`, no communication).
    pub initial: TraceRow,
    /// One row per completed outer iteration.
    pub rows: Vec<TraceRow>,
    pub status: RunStatus,
    pub final_x: StackedVector,
}

pub const TRACE_HEADER: &str = "iter,rounds,messages,f_gap,grad_norm,consensus_err,err_x,err_ybar";

impl RunTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().unwrap_or(&self.initial)
    }

    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    /// Initial row followed by every iteration row.
    pub fn all_rows(&self) -> impl Iterator<Item = &TraceRow> {
        std::iter::once(&self.initial).chain(&self.rows)
    }

    /// CSV with [`TRACE_HEADER`]; floats carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in self.all_rows() {
            writeln!(
                out,
                "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.iter, r.rounds, r.messages, r.f_gap, r.grad_norm, r.consensus_err, r.err_x, r.err_ybar
            )?;
        }
        Ok(())
    }
}

/// Worker count from `DOBOC_THREADS`, defaulting to the available parallelism.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub struct Simulator<'p> {
    prob: &'p PenaltyProblem,
    pool: ThreadPool,
    reference: OnceLock<Reference>,
}

impl<'p> Simulator<'p> {
    pub fn new(prob: &'p PenaltyProblem, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        Ok(Self {
            prob,
            pool,
            reference: OnceLock::new(),
        })
    }

    pub fn problem(&self) -> &'p PenaltyProblem {
        self.prob
    }

    /// Cached [`compute_reference`].
    pub fn reference(&self) -> Result<&Reference> {
        if let Some(r) = self.reference.get() {
            return Ok(r);
        }
        let r = compute_reference(self.prob)?;
        Ok(self.reference.get_or_init(|| r))
    }

    /// Evaluate `f` for every agent on the pool, keeping agent order. The
    /// first failing agent (lowest index) determines the error.
    fn per_agent<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        let n = self.prob.n();
        let results: Vec<Result<T>> = self.pool.install(|| (0..n).into_par_iter().map(&f).collect());
        results.into_iter().collect()
    }

    fn view<'a>(
        &'a self,
        i: usize,
        round: usize,
        x: &'a StackedVector,
        inbox_x: &'a [Inbox],
        g: Option<(&'a StackedVector, &'a [Inbox])>,
    ) -> AgentView<'a> {
        AgentView {
            agent: i,
            round,
            own_x: x.block(i),
            neighbor_x: &inbox_x[i],
            own_g: g.map(|(gv, _)| gv.block(i)),
            neighbor_g: g.map(|(_, inbox)| &inbox[i]),
            weights: self.prob.graph().row(i),
            local: self.prob.local(i),
        }
    }

    fn exchange(&self, payload: &StackedVector, round: usize, stats: &mut CommStats) -> Result<Vec<Inbox>> {
        let mut mailbox = RoundMailbox::new(self.prob.graph(), round);
        mailbox.broadcast(payload)?;
        stats.rounds += 1;
        stats.scalars += mailbox.scalars();
        mailbox.seal()
    }

    fn check_shape(&self, x: &StackedVector) -> Result<()> {
        if x.n() != self.prob.n() || x.p() != self.prob.p() {
            return Err(Error::Dimension(format!(
                "expected {} blocks of dimension {}, got {} blocks of dimension {}",
                self.prob.n(),
                self.prob.p(),
                x.n(),
                x.p()
            )));
        }
        Ok(())
    }

    /// Distributed `ĝ` after `inner_updates` inner rounds at the point `x`
    /// (`ĝ_k(x)` of the DOBOC recursion for `inner_updates = k`).
    pub fn inner_direction(
        &self,
        x: &StackedVector,
        cfg: &AlgoConfig,
        inner_updates: usize,
    ) -> Result<(StackedVector, CommStats)> {
        let mut stats = CommStats::default();
        let g = self.direction_from(x, cfg, inner_updates, 0, &mut stats)?;
        Ok((g, stats))
    }

    fn direction_from(
        &self,
        x: &StackedVector,
        cfg: &AlgoConfig,
        inner_updates: usize,
        first_round: usize,
        stats: &mut CommStats,
    ) -> Result<StackedVector> {
        self.check_shape(x)?;
        let (n, p) = (self.prob.n(), self.prob.p());
        let inbox_x = self.exchange(x, first_round, stats)?;
        let frames = self.per_agent(|i| {
            AgentFrame::prepare(&self.view(i, first_round, x, &inbox_x, None), cfg, inner_updates > 0)
        })?;
        let mut g = StackedVector::from_flat(n, p, frames.iter().flat_map(AgentFrame::init).collect())?;
        for l in 0..inner_updates {
            let round = first_round + 1 + l;
            let inbox_g = self.exchange(&g, round, stats)?;
            let next = self.per_agent(|i| {
                frames[i].inner_step(&self.view(i, round, x, &inbox_x, Some((&g, &inbox_g))))
            })?;
            g = StackedVector::from_flat(n, p, next.concat())?;
        }
        Ok(g)
    }

    /// One outer iteration `k` from `x`.
    pub fn step(
        &self,
        algo: Algorithm,
        cfg: &AlgoConfig,
        k: usize,
        x: &StackedVector,
        stats: &mut CommStats,
    ) -> Result<StackedVector> {
        let (n, p) = (self.prob.n(), self.prob.p());
        match algo {
            Algorithm::Dgd => {
                self.check_shape(x)?;
                let round = stats.rounds;
                let inbox_x = self.exchange(x, round, stats)?;
                let next = self.per_agent(|i| dgd_step(&self.view(i, round, x, &inbox_x, None), cfg))?;
                StackedVector::from_flat(n, p, next.concat())
            }
            Algorithm::Doboc | Algorithm::DobocK => {
                let inner = algo.inner_updates(k, cfg);
                let g = self.direction_from(x, cfg, inner, stats.rounds, stats)?;
                let next: Vec<f64> = (0..n)
                    .flat_map(|i| doboc_outer_update(x.block(i), g.block(i)))
                    .collect();
                StackedVector::from_flat(n, p, next)
            }
        }
    }

    fn row(&self, iter: usize, stats: CommStats, x: &StackedVector) -> Result<TraceRow> {
        let r = self.reference()?;
        let mean = x.mean_block();
        Ok(TraceRow {
            iter,
            rounds: stats.rounds,
            messages: stats.scalars,
            f_gap: self.prob.value(x)? - r.f_star,
            grad_norm: self.prob.gradient(x)?.norm(),
            consensus_err: x.consensus_error(),
            err_x: x.sub(&r.x_star).norm(),
            err_ybar: norm(&sub(&mean, &r.y_star)),
        })
    }

    /// Execute `algo` until `‖∇F(x_k)‖ ≤ cfg.tol` or `cfg.max_iter` iterations.
    pub fn run(&self, algo: Algorithm, cfg: &AlgoConfig, x0: &StackedVector) -> Result<RunTrace> {
        cfg.validate(algo)?;
        if cfg.lambda != self.prob.lambda() {
            return Err(Error::InvalidParameter(format!(
                "config lambda {} differs from problem lambda {}",
                cfg.lambda,
                self.prob.lambda()
            )));
        }
        self.check_shape(x0)?;
        let mut stats = CommStats::default();
        let initial = self.row(0, stats, x0)?;
        let mut rows = Vec::new();
        let mut x = x0.clone();
        let mut status = if initial.grad_norm <= cfg.tol {
            RunStatus::Converged
        } else {
            RunStatus::BudgetExhausted
        };
        if status == RunStatus::BudgetExhausted {
            for k in 0..cfg.max_iter {
                x = self.step(algo, cfg, k, &x, &mut stats)?;
                if let Some(agent) = x.first_non_finite_block() {
                    return Err(Error::NonFinite {
                        agent: agent + 1,
                        iter: k + 1,
                    });
                }
                let row = self.row(k + 1, stats, &x)?;
                rows.push(row);
                if row.grad_norm <= cfg.tol {
                    status = RunStatus::Converged;
                    break;
                }
            }
        }
        Ok(RunTrace {
            algorithm: algo,
            eta: cfg.eta,
            initial,
            rows,
            status,
            final_x: x,
        })
    }
}

/// Run with the worker count taken from `DOBOC_THREADS`.
pub fn run(prob: &PenaltyProblem, algo: Algorithm, cfg: &AlgoConfig, x0: &StackedVector) -> Result<RunTrace> {
    Simulator::new(prob, threads_from_env())?.run(algo, cfg, x0)
}
