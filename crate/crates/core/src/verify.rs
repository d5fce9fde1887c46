//! Invariant suite behind `doboc verify`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::algorithms::{AlgoConfig, Algorithm};
use crate::analysis::{
    closed_form_ghat, compute_bounds_with, estimate_rates, hessian_eigenvalues, sample_pairs,
    verify_cubic_bound,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::objectives::{PenaltyProblem, StackedVector};
use crate::simulator::{compute_reference, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Tiny,
    Default,
    Full,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "default" => Ok(Scale::Default),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!("unknown scale {other:?}"))),
        }
    }
}

struct Budget {
    points: usize,
    max_k: usize,
    fixtures: usize,
    dgd_iters: usize,
    cubic_pairs: usize,
}

impl Scale {
    fn budget(self) -> Budget {
        match self {
            Scale::Tiny => Budget {
                points: 2,
                max_k: 4,
                fixtures: 2,
                dgd_iters: 10,
                cubic_pairs: 20,
            },
            Scale::Default => Budget {
                points: 10,
                max_k: 10,
                fixtures: 3,
                dgd_iters: 50,
                cubic_pairs: 100,
            },
            Scale::Full => Budget {
                points: 25,
                max_k: 20,
                fixtures: 3,
                dgd_iters: 200,
                cubic_pairs: 500,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Serialized first counterexample when the check fails.
    pub counterexample: Option<String>,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {:<24} {}", self.name, self.detail)
    }
}

fn outcome(name: &'static str, failure: Option<String>, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed: failure.is_none(),
        detail,
        counterexample: failure,
    }
}

pub const POINT_SEED: u64 = 1000;

/// Seeded evaluation points with entries uniform in `[-2, 2]`.
pub fn random_points(prob: &PenaltyProblem, count: usize, seed: u64) -> Vec<StackedVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let data = (0..prob.dim()).map(|_| rng.random_range(-2.0..=2.0)).collect();
            StackedVector::from_flat(prob.n(), prob.p(), data).expect("sized")
        })
        .collect()
}

fn max_abs_diff(a: &StackedVector, b: &StackedVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn oracle_equivalence(budget: &Budget, flip: bool) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (idx, (name, prob)) in fixtures::standard().into_iter().take(budget.fixtures).enumerate() {
        let sim = Simulator::new(&prob, 1)?;
        let a = prob.upper_bound();
        let seed = POINT_SEED + idx as u64;
        for (pi, x) in random_points(&prob, budget.points, seed).iter().enumerate() {
            for factor in [0.1, 1.0, 1.9] {
                let mut cfg = AlgoConfig::new(factor / a, prob.lambda());
                cfg.inject_sign_flip = flip;
                for k in 0..=budget.max_k {
                    let (dist, _) = sim.inner_direction(x, &cfg, k)?;
                    let oracle = closed_form_ghat(&prob, x, cfg.eta, k)?;
                    let diff = max_abs_diff(&dist, &oracle);
                    worst = worst.max(diff);
                    cases += 1;
                    if !(diff <= 1e-10) {
                        let ce = format!(
                            "{{\"fixture\":\"{name}\",\"seed\":{seed},\"point\":{pi},\"x\":{:?},\"eta\":{:e},\"k\":{k},\"max_diff\":{diff:e}}}",
                            x.as_slice(),
                            cfg.eta
                        );
                        return Ok(outcome("oracle_equivalence", Some(ce), format!("max diff {diff:e}")));
                    }
                }
            }
        }
    }
    Ok(outcome(
        "oracle_equivalence",
        None,
        format!("{cases} cases, max diff {worst:.3e}"),
    ))
}

fn superlinear_envelope() -> Result<CheckResult> {
    let prob = fixtures::ring_quadratic();
    let sim = Simulator::new(&prob, 1)?;
    let reference = sim.reference()?.clone();
    let eta = 1.0 / prob.upper_bound();
    let x0 = StackedVector::zeros(prob.n(), prob.p());
    let bounds = compute_bounds_with(&prob, &reference, eta, 1, &x0)?;
    let cfg = AlgoConfig::new(eta, prob.lambda()).with_tol(0.0).with_max_iter(60);
    let trace = sim.run(Algorithm::Doboc, &cfg, &x0)?;
    let rates = estimate_rates(&trace)?;
    let excess = rates.superlinear_excess(bounds.c);
    let failure = if excess > 1e-12 {
        Some(format!("{{\"fixture\":\"ring-quadratic\",\"c\":{:e},\"excess\":{excess:e}}}", bounds.c))
    } else if !rates.superlinear {
        Some(format!("{{\"fixture\":\"ring-quadratic\",\"ratios\":{:?}}}", rates.ratios))
    } else {
        None
    };
    Ok(outcome(
        "superlinear_envelope",
        failure,
        format!("c = {:.4}, {} ratios, excess {excess:.3e}", bounds.c, rates.ratios.len()),
    ))
}

fn linear_envelope() -> Result<CheckResult> {
    let prob = fixtures::ring_quadratic();
    let sim = Simulator::new(&prob, 1)?;
    let reference = sim.reference()?.clone();
    let x0 = StackedVector::zeros(prob.n(), prob.p());
    let mut detail = Vec::new();
    for k in [2usize, 5] {
        let probe = compute_bounds_with(&prob, &reference, 1.0, k, &x0)?;
        let eta = 0.99 * probe.eta_thm2_max;
        let bounds = compute_bounds_with(&prob, &reference, eta, k, &x0)?;
        let cfg = AlgoConfig::new(eta, prob.lambda())
            .with_k(k)
            .with_tol(0.0)
            .with_max_iter(100);
        let trace = sim.run(Algorithm::DobocK, &cfg, &x0)?;
        let rates = estimate_rates(&trace)?;
        let excess = rates.linear_excess(bounds.epsilon);
        if !(bounds.epsilon > 0.0) || excess > 1e-9 {
            let ce = format!(
                "{{\"fixture\":\"ring-quadratic\",\"K\":{k},\"eta\":{eta:e},\"epsilon\":{:e},\"excess\":{excess:e}}}",
                bounds.epsilon
            );
            return Ok(outcome("linear_envelope", Some(ce), format!("K = {k} failed")));
        }
        detail.push(format!("K={k}: eps={:.3e}", bounds.epsilon));
    }
    Ok(outcome("linear_envelope", None, detail.join(", ")))
}

fn all_fixtures() -> Vec<(&'static str, PenaltyProblem)> {
    let mut v = fixtures::standard();
    v.push(("single-agent", fixtures::single_agent(1.0)));
    v
}

fn dgd_recovery(budget: &Budget) -> Result<CheckResult> {
    for (name, prob) in all_fixtures() {
        let sim = Simulator::new(&prob, 1)?;
        let cfg = AlgoConfig::new(prob.lambda(), prob.lambda())
            .with_k(1)
            .with_tol(0.0)
            .with_max_iter(budget.dgd_iters);
        let mut x_dgd = StackedVector::zeros(prob.n(), prob.p());
        let mut x_k1 = x_dgd.clone();
        let (mut s1, mut s2) = Default::default();
        for k in 0..budget.dgd_iters {
            x_dgd = sim.step(Algorithm::Dgd, &cfg, k, &x_dgd, &mut s1)?;
            x_k1 = sim.step(Algorithm::DobocK, &cfg, k, &x_k1, &mut s2)?;
            if x_dgd != x_k1 {
                let ce = format!("{{\"fixture\":\"{name}\",\"iteration\":{}}}", k + 1);
                return Ok(outcome("dgd_recovery", Some(ce), "iterates diverged".into()));
            }
        }
    }
    Ok(outcome(
        "dgd_recovery",
        None,
        format!("bitwise equal for {} iterations", budget.dgd_iters),
    ))
}

fn newton_limit() -> Result<CheckResult> {
    let prob = fixtures::single_agent_dyadic();
    let sim = Simulator::new(&prob, 1)?;
    let eta = 1.0 / prob.big_m();
    let m = prob.m();
    let cfg = AlgoConfig::new(eta, prob.lambda());
    let x = StackedVector::from_blocks(vec![vec![0.0, 0.5]])?;
    let g = prob.gradient(&x)?.to_dvector();
    let step = prob
        .dense_hessian(&x)?
        .lu()
        .solve(&g)
        .ok_or_else(|| Error::InvalidParameter("Hessian is singular".into()))?;
    let newton = StackedVector::from_dvector(prob.n(), prob.p(), &step)?;
    let mut prev: Option<f64> = None;
    let mut last = f64::NAN;
    for k in 0..=200 {
        let (g, _) = sim.inner_direction(&x, &cfg, k)?;
        let dev = g.sub(&newton).norm();
        if let Some(p) = prev {
            if dev > (1.0 - eta * m + 1e-12) * p {
                let ce = format!("{{\"fixture\":\"single-agent\",\"k\":{k},\"ratio\":{:e}}}", dev / p);
                return Ok(outcome("newton_limit", Some(ce), "contraction factor exceeded".into()));
            }
        }
        prev = Some(dev);
        last = dev / newton.norm();
    }
    let failure = (last > 1e-8).then(|| format!("{{\"fixture\":\"single-agent\",\"relative_dev\":{last:e}}}"));
    Ok(outcome("newton_limit", failure, format!("relative deviation at k=200: {last:.3e}")))
}

fn spectral_sandwich(budget: &Budget) -> Result<CheckResult> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (idx, (name, prob)) in fixtures::standard().into_iter().take(budget.fixtures).enumerate() {
        let (m, a) = (prob.m(), prob.upper_bound());
        for (pi, x) in random_points(&prob, budget.points, POINT_SEED + idx as u64).iter().enumerate() {
            let eig = hessian_eigenvalues(&prob, x)?;
            let (emin, emax) = (eig[0], eig[eig.len() - 1]);
            lo = lo.min(emin - m);
            hi = hi.max(emax - a);
            if emin < m - 1e-9 || emax > a + 1e-9 {
                let ce = format!(
                    "{{\"fixture\":\"{name}\",\"point\":{pi},\"min_eig\":{emin:e},\"max_eig\":{emax:e},\"m\":{m:e},\"a\":{a:e}}}"
                );
                return Ok(outcome("spectral_sandwich", Some(ce), "eigenvalue outside [m, a]".into()));
            }
        }
    }
    Ok(outcome(
        "spectral_sandwich",
        None,
        format!("min(eig - m) = {lo:.3e}, max(eig - a) = {hi:.3e}"),
    ))
}

/// Relative errors of `∇F` against central differences of `F` and of `∇²F v`
/// against central differences of `∇F`.
pub fn derivative_errors(prob: &PenaltyProblem, x: &StackedVector, v: &StackedVector) -> Result<(f64, f64)> {
    let h = 1e-5;
    let g = prob.gradient(x)?;
    let mut fd = Vec::with_capacity(prob.dim());
    for r in 0..prob.dim() {
        let mut xp = x.as_slice().to_vec();
        let mut xm = xp.clone();
        xp[r] += h;
        xm[r] -= h;
        let fp = prob.value(&StackedVector::from_flat(prob.n(), prob.p(), xp)?)?;
        let fm = prob.value(&StackedVector::from_flat(prob.n(), prob.p(), xm)?)?;
        fd.push((fp - fm) / (2.0 * h));
    }
    let fd = StackedVector::from_flat(prob.n(), prob.p(), fd)?;
    let grad_rel = fd.sub(&g).norm() / g.norm().max(f64::MIN_POSITIVE);

    let hv = prob.hessian_vec(x, v)?;
    let gp = prob.gradient(&x.add_scaled(h, v))?;
    let gm = prob.gradient(&x.add_scaled(-h, v))?;
    let fd_hv = gp.sub(&gm).scaled(1.0 / (2.0 * h));
    let hess_rel = fd_hv.sub(&hv).norm() / hv.norm().max(f64::MIN_POSITIVE);
    Ok((grad_rel, hess_rel))
}

fn derivative_consistency(budget: &Budget) -> Result<CheckResult> {
    let (mut wg, mut wh) = (0.0f64, 0.0f64);
    for (idx, (name, prob)) in fixtures::standard().into_iter().take(budget.fixtures).enumerate() {
        let seed = POINT_SEED + idx as u64;
        let points = random_points(&prob, budget.points, seed);
        let dirs = random_points(&prob, budget.points, seed + 500);
        for (pi, (x, v)) in points.iter().zip(&dirs).enumerate() {
            let (g, h) = derivative_errors(&prob, x, v)?;
            wg = wg.max(g);
            wh = wh.max(h);
            if g > 1e-6 || h > 1e-5 {
                let ce = format!("{{\"fixture\":\"{name}\",\"point\":{pi},\"grad_rel\":{g:e},\"hess_rel\":{h:e}}}");
                return Ok(outcome("derivative_consistency", Some(ce), "finite differences disagree".into()));
            }
        }
    }
    Ok(outcome(
        "derivative_consistency",
        None,
        format!("grad rel {wg:.2e}, hessian-vec rel {wh:.2e}"),
    ))
}

fn communication_accounting() -> Result<CheckResult> {
    let prob = fixtures::ring_quadratic();
    let sim = Simulator::new(&prob, 1)?;
    let x0 = StackedVector::zeros(prob.n(), prob.p());
    let per_round = prob.graph().directed_edge_count() * prob.p();
    let eta = 1.0 / prob.upper_bound();
    let t = 10;
    let mut runs = vec![(
        "doboc",
        sim.run(Algorithm::Doboc, &AlgoConfig::new(eta, 1.0).with_tol(0.0).with_max_iter(t), &x0)?,
        t * (t + 1) / 2,
    )];
    for k in [2usize, 5] {
        let cfg = AlgoConfig::new(eta, 1.0).with_k(k).with_tol(0.0).with_max_iter(t);
        runs.push(("doboc-k", sim.run(Algorithm::DobocK, &cfg, &x0)?, k * t));
    }
    for (name, trace, expected) in &runs {
        let last = trace.last();
        if last.rounds != *expected || last.messages != expected * per_round {
            let ce = format!(
                "{{\"algorithm\":\"{name}\",\"rounds\":{},\"expected_rounds\":{expected},\"messages\":{}}}",
                last.rounds, last.messages
            );
            return Ok(outcome("communication_accounting", Some(ce), "counter mismatch".into()));
        }
    }
    Ok(outcome(
        "communication_accounting",
        None,
        format!("T = {t}: doboc 55 rounds, {per_round} scalars per round"),
    ))
}

fn cubic_remainder(budget: &Budget) -> Result<CheckResult> {
    let mut worst = f64::NEG_INFINITY;
    for (name, prob) in [("star-logistic", fixtures::star_logistic()), ("ring-quadratic", fixtures::ring_quadratic())] {
        let pairs = sample_pairs(&prob, budget.cubic_pairs, 77, 3.0);
        let r = verify_cubic_bound(&prob, &pairs)?;
        worst = worst.max(r.max_violation);
        if !r.holds {
            let ce = format!("{{\"fixture\":\"{name}\",\"max_violation\":{:e}}}", r.max_violation);
            return Ok(outcome("cubic_remainder_bound", Some(ce), "bound violated".into()));
        }
    }
    Ok(outcome("cubic_remainder_bound", None, format!("max lhs - rhs = {worst:.3e}")))
}

fn determinism() -> Result<CheckResult> {
    let prob = fixtures::star_logistic();
    let x0 = StackedVector::zeros(prob.n(), prob.p());
    let cfg = AlgoConfig::new(1.0 / prob.upper_bound(), 1.0).with_max_iter(25);
    let mut traces = Vec::new();
    for threads in [1usize, 4, 4] {
        let sim = Simulator::new(&prob, threads)?;
        traces.push(sim.run(Algorithm::Doboc, &cfg, &x0)?);
    }
    let failure = traces
        .windows(2)
        .any(|w| w[0] != w[1])
        .then(|| "{\"fixture\":\"star-logistic\",\"threads\":[1,4]}".to_string());
    Ok(outcome("determinism", failure, "traces bitwise identical across 1 and 4 workers".into()))
}

fn reference_quality() -> Result<CheckResult> {
    for (name, prob) in all_fixtures() {
        let r = compute_reference(&prob)?;
        let g = prob.gradient(&r.x_star)?.norm();
        if g > 1e-12 {
            let ce = format!("{{\"fixture\":\"{name}\",\"grad_norm\":{g:e}}}");
            return Ok(outcome("reference_solution", Some(ce), "x* not stationary".into()));
        }
    }
    Ok(outcome("reference_solution", None, "|grad F(x*)| <= 1e-12 on all fixtures".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyOptions {
    pub inject_sign_flip: bool,
}

/// Run every check at `scale`. An error inside a check is reported as a
/// failure of that check.
pub fn run_suite(scale: Scale, opts: VerifyOptions) -> Vec<CheckResult> {
    let budget = scale.budget();
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<CheckResult>>)> = vec![
        ("reference_solution", Box::new(reference_quality)),
        (
            "oracle_equivalence",
            Box::new(|| oracle_equivalence(&budget, opts.inject_sign_flip)),
        ),
        ("superlinear_envelope", Box::new(superlinear_envelope)),
        ("linear_envelope", Box::new(linear_envelope)),
        ("dgd_recovery", Box::new(|| dgd_recovery(&budget))),
        ("newton_limit", Box::new(newton_limit)),
        ("spectral_sandwich", Box::new(|| spectral_sandwich(&budget))),
        ("derivative_consistency", Box::new(|| derivative_consistency(&budget))),
        ("communication_accounting", Box::new(communication_accounting)),
        ("cubic_remainder_bound", Box::new(|| cubic_remainder(&budget))),
        ("determinism", Box::new(determinism)),
    ];
    checks
        .into_iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let mut r = check().unwrap_or_else(|e| CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
                counterexample: Some(format!("{{\"error\":{:?}}}", e.to_string())),
            });
            r.detail = format!("{} ({:.2}s)", r.detail, start.elapsed().as_secs_f64());
            r
        })
        .collect()
}
