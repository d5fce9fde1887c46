//! Experiment configs and the `run`, `bounds` and `verify` subcommands.
//!
//! Configs are strict JSON: unknown keys are rejected. Agent indices are
//! 1-based. A minimal config:
//!
//! ```json
//! {
//!   "graph": {"type": "metropolis", "n": 2, "edges": [[1, 2]]},
//!   "problem": {"type": "quadratic", "spec": {"kind": "explicit",
//!               "a": [[[1.0]], [[1.0]]], "b": [[-1.0], [1.0]]}},
//!   "lambda": 1.0,
//!   "algorithm": "doboc",
//!   "eta": 0.5
//! }
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgoConfig, Algorithm, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::analysis::{compute_bounds_with, BoundReport};
use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::objectives::{
    load_logistic_csv, logistic_family, quadratic_family, random_quadratic_family, PenaltyProblem, StackedVector,
};
use crate::simulator::{RunStatus, RunTrace, Simulator};
use crate::verify::{run_suite, Scale, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum GraphSpec {
    Metropolis { n: usize, edges: Vec<[usize; 2]> },
    Explicit { weights: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum QuadraticSpec {
    /// Per-agent `A_i` (p×p, row-major nested lists) and `b_i`.
    Explicit { a: Vec<Vec<Vec<f64>>>, b: Vec<Vec<f64>> },
    /// Seeded family with Hessian spectra in `spectrum`. Falls back to the
    /// top-level seed when `seed` is absent.
    Random {
        p: usize,
        spectrum: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic { spec: QuadraticSpec },
    /// `data` is a CSV path, resolved relative to the config file.
    Logistic { mu: f64, data: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AutoEta {
    #[serde(rename = "auto-thm1")]
    Superlinear,
    #[serde(rename = "auto-thm2")]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Value(f64),
    Auto(AutoEta),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum X0Name {
    #[default]
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum X0Spec {
    Named(X0Name),
    Explicit(Vec<Vec<f64>>),
}

impl Default for X0Spec {
    fn default() -> Self {
        X0Spec::Named(X0Name::Zeros)
    }
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSpec,
    pub problem: ProblemSpec,
    pub lambda: f64,
    pub algorithm: Algorithm,
    pub eta: EtaSpec,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub x0: X0Spec,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (self.algorithm, self.k) {
            (Algorithm::DobocK, None) => {
                return Err(Error::Config(
                    "missing field `K` (required by algorithm \"doboc-k\")".into(),
                ))
            }
            (Algorithm::DobocK, Some(0)) => return Err(Error::Config("field `K` must be at least 1".into())),
            (algo, Some(_)) if algo != Algorithm::DobocK => {
                return Err(Error::Config(format!(
                    "field `K` is only valid with algorithm \"doboc-k\", not \"{algo}\""
                )))
            }
            _ => {}
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("field `lambda` must be positive, got {}", self.lambda)));
        }
        if let EtaSpec::Value(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!("field `eta` must be positive, got {eta}")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("field `tol` must be nonnegative, got {}", self.tol)));
        }
        Ok(())
    }

    pub fn k_or_one(&self) -> usize {
        self.k.unwrap_or(1)
    }
}

/// A config resolved into runnable objects.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: PenaltyProblem,
    pub x0: StackedVector,
}

impl Experiment {
    pub fn build(config: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        let graph = match &config.graph {
            GraphSpec::Metropolis { n, edges } => {
                let edges: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                CommGraph::metropolis_one_based(*n, &edges)?
            }
            GraphSpec::Explicit { weights } => CommGraph::from_weights(weights)?,
        };
        let n = graph.n();
        let locals = match &config.problem {
            ProblemSpec::Quadratic {
                spec: QuadraticSpec::Explicit { a, b },
            } => {
                if a.len() != n || b.len() != n {
                    return Err(Error::Config(format!(
                        "quadratic spec lists {} matrices and {} vectors for {n} agents",
                        a.len(),
                        b.len()
                    )));
                }
                let specs = a
                    .iter()
                    .zip(b)
                    .enumerate()
                    .map(|(i, (ai, bi))| {
                        let p = bi.len();
                        if ai.len() != p || ai.iter().any(|r| r.len() != p) {
                            return Err(Error::Config(format!("agent {}: A must be {p}x{p}", i + 1)));
                        }
                        Ok((
                            DMatrix::from_row_iterator(p, p, ai.iter().flatten().copied()),
                            DVector::from_column_slice(bi),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                quadratic_family(specs)?
            }
            ProblemSpec::Quadratic {
                spec: QuadraticSpec::Random { p, spectrum, seed },
            } => random_quadratic_family(n, *p, (spectrum[0], spectrum[1]), seed.unwrap_or(config.seed))?,
            ProblemSpec::Logistic { mu, data } => {
                let path = if data.is_absolute() { data.clone() } else { base_dir.join(data) };
                let (p, samples) = load_logistic_csv(&path, n)?;
                logistic_family(p, samples, *mu)?
            }
        };
        let problem = PenaltyProblem::new(graph, locals, config.lambda)?;
        let x0 = match &config.x0 {
            X0Spec::Named(X0Name::Zeros) => StackedVector::zeros(n, problem.p()),
            X0Spec::Explicit(blocks) => {
                let x0 = StackedVector::from_blocks(blocks.clone())?;
                if x0.n() != n || x0.p() != problem.p() {
                    return Err(Error::Config(format!(
                        "x0 must have {n} blocks of dimension {}",
                        problem.p()
                    )));
                }
                x0
            }
        };
        Ok(Self { config, problem, x0 })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::build(config, base)
    }

    /// Numeric `η`, resolving `auto-thm1` to `1/a` and `auto-thm2` to
    /// `0.99 · eta_thm2_max`.
    pub fn resolve_eta(&self, sim: &Simulator<'_>) -> Result<f64> {
        match self.config.eta {
            EtaSpec::Value(v) => Ok(v),
            EtaSpec::Auto(AutoEta::Superlinear) => Ok(1.0 / self.problem.upper_bound()),
            EtaSpec::Auto(AutoEta::Linear) => {
                let b = compute_bounds_with(&self.problem, sim.reference()?, 1.0, self.config.k_or_one(), &self.x0)?;
                Ok(0.99 * b.eta_thm2_max)
            }
        }
    }

    pub fn algo_config(&self, eta: f64) -> AlgoConfig {
        AlgoConfig {
            eta,
            lambda: self.config.lambda,
            k_budget: self.config.k,
            max_iter: self.config.max_iter,
            tol: self.config.tol,
            inject_sign_flip: false,
        }
    }

    pub fn run(&self, threads: usize) -> Result<RunTrace> {
        let sim = Simulator::new(&self.problem, threads)?;
        let eta = self.resolve_eta(&sim)?;
        sim.run(self.config.algorithm, &self.algo_config(eta), &self.x0)
    }

    pub fn bounds(&self) -> Result<BoundReport> {
        let sim = Simulator::new(&self.problem, 1)?;
        let eta = self.resolve_eta(&sim)?;
        compute_bounds_with(&self.problem, sim.reference()?, eta, self.config.k_or_one(), &self.x0)
    }
}

pub fn summary_line(trace: &RunTrace) -> String {
    let last = trace.last();
    let status = match trace.status {
        RunStatus::Converged => "converged",
        RunStatus::BudgetExhausted => "max_iter reached",
    };
    format!(
        "algorithm={} eta={:e} status={status} iterations={} rounds={} messages={} final_f_gap={:.6e} grad_norm={:.6e}",
        trace.algorithm,
        trace.eta,
        trace.iterations(),
        last.rounds,
        last.messages,
        last.f_gap,
        last.grad_norm
    )
}

fn write_trace(trace: &RunTrace, out: &Path) -> Result<()> {
    let file = File::create(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `run --config <path> --out <path>`.
pub fn cmd_run(config: &Path, out: &Path, threads: usize) -> i32 {
    let result = Experiment::from_path(config).and_then(|exp| {
        let trace = exp.run(threads)?;
        write_trace(&trace, out)?;
        Ok(trace)
    });
    match result {
        Ok(trace) => {
            println!("{}", summary_line(&trace));
            match trace.status {
                RunStatus::Converged => EXIT_OK,
                RunStatus::BudgetExhausted => EXIT_BUDGET,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// `bounds --config <path>`.
pub fn cmd_bounds(config: &Path) -> i32 {
    match Experiment::from_path(config).and_then(|exp| exp.bounds()) {
        Ok(report) => {
            print!("{}", report.table());
            println!("{}", report.to_json());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// `verify [--scale tiny|default|full]`.
pub fn cmd_verify(scale: Scale, opts: VerifyOptions) -> i32 {
    let results = run_suite(scale, opts);
    for r in &results {
        println!("{r}");
    }
    match results.iter().find(|r| !r.passed) {
        Some(first) => {
            let ce = first.counterexample.as_deref().unwrap_or("{}");
            println!("first counterexample ({}): {ce}", first.name);
            EXIT_VERIFY_FAILED
        }
        None => {
            println!("all {} checks passed", results.len());
            EXIT_OK
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE_A: &str = r#"{
        "graph": {"type": "metropolis", "n": 2, "edges": [[1, 2]]},
        "problem": {"type": "quadratic", "spec": {"kind": "explicit", "a": [[[1.0]], [[1.0]]], "b": [[-1.0], [1.0]]}},
        "lambda": 1.0,
        "algorithm": "doboc",
        "eta": 0.5
    }"#;

    fn with(field: &str, value: &str) -> String {
        let mut v: serde_json::Value = serde_json::from_str(FIXTURE_A).unwrap();
        v[field] = serde_json::from_str(value).unwrap();
        v.to_string()
    }

    #[test]
    fn parses_fixture_a() {
        let cfg = ExperimentConfig::parse(FIXTURE_A).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Doboc);
        assert_eq!(cfg.eta, EtaSpec::Value(0.5));
        assert_eq!(cfg.x0, X0Spec::Named(X0Name::Zeros));
        assert_eq!(cfg.max_iter, DEFAULT_MAX_ITER);
        let exp = Experiment::build(cfg, Path::new(".")).unwrap();
        let trace = exp.run(1).unwrap();
        assert_eq!(trace.status, RunStatus::Converged);
        assert!(trace.last().f_gap.abs() <= 1e-12);
    }

    #[test]
    fn missing_k_is_named() {
        let err = ExperimentConfig::parse(&with("algorithm", "\"doboc-k\"")).unwrap_err();
        assert!(err.to_string().contains("`K`"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse(&with("speed", "3")).is_err());
        let bad_graph = with("graph", r#"{"type": "metropolis", "n": 2, "edges": [[1, 2]], "extra": 1}"#);
        assert!(ExperimentConfig::parse(&bad_graph).is_err());
    }

    #[test]
    fn syntax_errors_report_position() {
        let err = ExperimentConfig::parse("{\n  \"graph\": }").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn auto_eta_superlinear() {
        let cfg = ExperimentConfig::parse(&with("eta", "\"auto-thm1\"")).unwrap();
        let exp = Experiment::build(cfg, Path::new(".")).unwrap();
        let sim = Simulator::new(&exp.problem, 1).unwrap();
        assert_eq!(exp.resolve_eta(&sim).unwrap(), 0.5);
        assert_eq!(exp.run(1).unwrap().eta, 0.5);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let texts = [
            FIXTURE_A.to_string(),
            with("eta", "\"auto-thm2\""),
            with("x0", "[[1.0], [2.0]]"),
            with(
                "problem",
                r#"{"type": "quadratic", "spec": {"kind": "random", "p": 3, "spectrum": [1, 10]}}"#,
            ),
        ];
        for text in texts {
            let cfg = ExperimentConfig::parse(&text).unwrap();
            let again = ExperimentConfig::parse(&cfg.to_json()).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(cfg.to_json(), again.to_json());
        }
    }

    #[test]
    fn bounds_for_fixture_a() {
        let exp = Experiment::build(ExperimentConfig::parse(FIXTURE_A).unwrap(), Path::new(".")).unwrap();
        let b = exp.bounds().unwrap();
        assert_eq!(b.a, 2.0);
        assert_eq!(b.eta_thm1_max, 1.0);
    }

    #[test]
    fn rejects_bad_x0_and_k_for_doboc() {
        let cfg = ExperimentConfig::parse(&with("x0", "[[1.0]]")).unwrap();
        assert!(Experiment::build(cfg, Path::new(".")).is_err());
        assert!(ExperimentConfig::parse(&with("K", "3")).is_err());
        assert!(ExperimentConfig::parse(&with("eta", "-1")).is_err());
    }
}
