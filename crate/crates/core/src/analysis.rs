//! Step-size bounds, the dense closed-form oracle for `ĝ_k`, and rate
//! estimators over run traces.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::{PenaltyProblem, StackedVector};
use crate::simulator::{compute_reference, Reference, RunTrace};

/// Largest `np` for which dense oracles are evaluated.
pub const DENSE_LIMIT: usize = 1000;

/// Errors below this are treated as converged by the rate estimators.
pub const ERROR_FLOOR: f64 = 1e-13;

fn dense_guard(prob: &PenaltyProblem) -> Result<()> {
    if prob.dim() > DENSE_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "dense oracle is desk-scale only: n*p = {} exceeds {DENSE_LIMIT}",
            prob.dim()
        )));
    }
    Ok(())
}

/// Eigenvalues of the dense `∇²F(x)`, ascending.
pub fn hessian_eigenvalues(prob: &PenaltyProblem, x: &StackedVector) -> Result<Vec<f64>> {
    dense_guard(prob)?;
    let eig = SymmetricEigen::new(prob.dense_hessian(x)?);
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `∇²F(x)⁻¹ ∇F(x)`.
pub fn newton_step(prob: &PenaltyProblem, x: &StackedVector) -> Result<StackedVector> {
    dense_guard(prob)?;
    let h = prob.dense_hessian(x)?;
    let g = prob.gradient(x)?.to_dvector();
    let s = solve_spd(h, &g)?;
    StackedVector::from_dvector(prob.n(), prob.p(), &s)
}

fn solve_spd(h: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    match h.clone().cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => h
            .lu()
            .solve(rhs)
            .ok_or_else(|| Error::InvalidParameter("Hessian is singular".into())),
    }
}

/// `ĝ_k(x) = [I − (I − η∇²F(x))^{k+1}] ∇²F(x)⁻¹ ∇F(x)`, evaluated densely.
/// The matrix power is formed by repeated multiplication.
pub fn closed_form_ghat(prob: &PenaltyProblem, x: &StackedVector, eta: f64, k: usize) -> Result<StackedVector> {
    dense_guard(prob)?;
    let h = prob.dense_hessian(x)?;
    let dim = h.nrows();
    let g = prob.gradient(x)?.to_dvector();
    let s = solve_spd(h.clone(), &g)?;
    let contraction = DMatrix::identity(dim, dim) - &h * eta;
    let mut power = contraction.clone();
    for _ in 0..k {
        power = &power * &contraction;
    }
    let out = &s - power * &s;
    StackedVector::from_dvector(prob.n(), prob.p(), &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Preconditions {
    pub eta_positive: bool,
    /// `0 < η < 2/a`.
    pub superlinear_step: bool,
    /// `η < min{1, 1/a, 2m/(a²K²)}`.
    pub descent_step: bool,
    /// `η < eta_thm2_max`.
    pub linear_step: bool,
    /// `0 < ε < 1`.
    pub epsilon_valid: bool,
    /// `K = 1` and `η = λ`: DOBOC-K reduces to DGD.
    pub dgd_equivalent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub m: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub w_min: f64,
    pub lambda: f64,
    pub eta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    /// `a = M + 2(1 − w_min)/λ`.
    pub a: f64,
    pub eta_thm1_max: f64,
    /// `c = ‖I − η∇²F(x*)‖`.
    pub c: f64,
    pub eta_descent_max: f64,
    pub eta_thm2_max: f64,
    pub initial_gap: f64,
    /// Raw value; see `preconditions.epsilon_valid`.
    pub epsilon: f64,
    pub preconditions: Preconditions,
}

impl BoundReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bound report serializes")
    }

    pub fn table(&self) -> String {
        let rows: [(&str, String); 15] = [
            ("m", fmt(self.m)),
            ("M", fmt(self.big_m)),
            ("L", fmt(self.lipschitz)),
            ("w_min", fmt(self.w_min)),
            ("lambda", fmt(self.lambda)),
            ("eta", fmt(self.eta)),
            ("K", self.k.to_string()),
            ("a", fmt(self.a)),
            ("eta_thm1_max", fmt(self.eta_thm1_max)),
            ("c", fmt(self.c)),
            ("eta_descent_max", fmt(self.eta_descent_max)),
            ("eta_thm2_max", fmt(self.eta_thm2_max)),
            ("F(x0) - F*", fmt(self.initial_gap)),
            ("epsilon", fmt(self.epsilon)),
            ("dgd_equivalent", self.preconditions.dgd_equivalent.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<16} {v}\n"));
        }
        let p = &self.preconditions;
        out.push_str(&format!(
            "{:<16} superlinear_step={} descent_step={} linear_step={} epsilon_valid={}\n",
            "preconditions", p.superlinear_step, p.descent_step, p.linear_step, p.epsilon_valid
        ));
        if p.dgd_equivalent {
            out.push_str("note: K = 1 and eta = lambda, DOBOC-K coincides with DGD\n");
        }
        out
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

/// Evaluate every constant and step-size bound for `(η, K)` at `x0`.
pub fn compute_bounds(prob: &PenaltyProblem, eta: f64, k: usize, x0: &StackedVector) -> Result<BoundReport> {
    let reference = compute_reference(prob)?;
    compute_bounds_with(prob, &reference, eta, k, x0)
}

pub fn compute_bounds_with(
    prob: &PenaltyProblem,
    reference: &Reference,
    eta: f64,
    k: usize,
    x0: &StackedVector,
) -> Result<BoundReport> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let m = prob.m();
    let big_m = prob.big_m();
    let lipschitz = prob.lipschitz();
    let w_min = prob.graph().w_min();
    let lambda = prob.lambda();
    let a = prob.upper_bound();
    let kf = k as f64;

    let eig = hessian_eigenvalues(prob, &reference.x_star)?;
    let c = eig.iter().map(|mu| (1.0 - eta * mu).abs()).fold(0.0, f64::max);

    let eta_descent_max = 1.0_f64.min(1.0 / a).min(2.0 * m / (a * a * kf * kf));
    let initial_gap = (prob.value(x0)? - reference.f_star).max(0.0);
    let cubic_coef = a.powi(3) * (2.0 * a).powf(1.5) * kf.powi(3) * lipschitz / (6.0 * m.powi(3));
    let cubic_limit = if lipschitz == 0.0 || initial_gap == 0.0 {
        f64::INFINITY
    } else {
        (6.0 * m.powi(5) / (a.powi(4) * (2.0 * a).powf(1.5) * kf.powi(3) * lipschitz * initial_gap.sqrt()))
            .sqrt()
    };
    let eta_thm2_max = eta_descent_max.min(m / (a * a * kf * kf)).min(cubic_limit);
    let epsilon = (2.0 * m * m * eta - m * a * a * eta * eta * kf * kf) / a
        - cubic_coef * eta.powi(3) * initial_gap.sqrt();

    let preconditions = Preconditions {
        eta_positive: eta > 0.0,
        superlinear_step: eta > 0.0 && eta < 2.0 / a,
        descent_step: eta > 0.0 && eta < eta_descent_max,
        linear_step: eta > 0.0 && eta < eta_thm2_max,
        epsilon_valid: epsilon > 0.0 && epsilon < 1.0,
        dgd_equivalent: k == 1 && eta == lambda,
    };
    Ok(BoundReport {
        m,
        big_m,
        lipschitz,
        w_min,
        lambda,
        eta,
        k,
        a,
        eta_thm1_max: 2.0 / a,
        c,
        eta_descent_max,
        eta_thm2_max,
        initial_gap,
        epsilon,
        preconditions,
    })
}

/// Convergence-rate summary of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// `‖x_k − x*‖` for `k = 0, 1, …`.
    pub err_x: Vec<f64>,
    /// `F(x_k) − F*` for `k = 0, 1, …`.
    pub f_gap: Vec<f64>,
    /// `(k, err_{k+1}/err_k)` for every `k` with both errors above [`ERROR_FLOOR`].
    pub ratios: Vec<(usize, f64)>,
    /// Ratios strictly decreasing.
    pub superlinear: bool,
    /// Geometric mean of consecutive positive F-gap ratios.
    pub fitted_linear_rate: f64,
}

impl RateReport {
    /// `max_k (err_{k+1} − c^{k+1} err_k)` over iterations with `err_k ≥` floor.
    /// Nonpositive means the superlinear envelope holds.
    pub fn superlinear_excess(&self, c: f64) -> f64 {
        self.err_x
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] >= ERROR_FLOOR)
            .map(|(k, w)| w[1] - c.powi(k as i32 + 1) * w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_k gap_k / ((1 − ε)^k gap_0) − 1`. Nonpositive means the linear
    /// envelope holds.
    pub fn linear_excess(&self, epsilon: f64) -> f64 {
        let gap0 = self.f_gap[0];
        self.f_gap
            .iter()
            .enumerate()
            .map(|(k, g)| g / ((1.0 - epsilon).powi(k as i32) * gap0) - 1.0)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn estimate_rates(trace: &RunTrace) -> Result<RateReport> {
    let err_x: Vec<f64> = trace.all_rows().map(|r| r.err_x).collect();
    let f_gap: Vec<f64> = trace.all_rows().map(|r| r.f_gap).collect();
    let informative = err_x.iter().filter(|&&e| e > f64::EPSILON).count();
    if err_x.len() < 3 || informative < 3 {
        return Err(Error::Trace(format!(
            "need at least 3 iterates with nonzero error, got {informative} of {}",
            err_x.len()
        )));
    }
    let ratios: Vec<(usize, f64)> = err_x
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] >= ERROR_FLOOR && w[1] >= ERROR_FLOOR)
        .map(|(k, w)| (k, w[1] / w[0]))
        .collect();
    let superlinear = ratios.len() >= 2 && ratios.windows(2).all(|w| w[1].1 < w[0].1);

    let log_ratios: Vec<f64> = f_gap
        .windows(2)
        .take_while(|w| w[0] > 0.0 && w[1] > 0.0)
        .map(|w| (w[1] / w[0]).ln())
        .collect();
    let fitted_linear_rate = if log_ratios.is_empty() {
        f64::NAN
    } else {
        (log_ratios.iter().sum::<f64>() / log_ratios.len() as f64).exp()
    };
    Ok(RateReport {
        err_x,
        f_gap,
        ratios,
        superlinear,
        fitted_linear_rate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubicBoundReport {
    pub pairs: usize,
    /// Largest `lhs − rhs`; negative when every pair satisfies the bound.
    pub max_violation: f64,
    pub holds: bool,
}

pub const CUBIC_BOUND_SLACK: f64 = 1e-9;

/// Seeded pairs `(x, y)` with entries uniform in `[-radius, radius]`.
pub fn sample_pairs(prob: &PenaltyProblem, count: usize, seed: u64, radius: f64) -> Vec<(StackedVector, StackedVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let data = (0..prob.dim()).map(|_| rng.random_range(-radius..=radius)).collect();
        StackedVector::from_flat(prob.n(), prob.p(), data).expect("sized")
    };
    (0..count)
        .map(|_| {
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            (x, y)
        })
        .collect()
}

/// `F(y) ≤ F(x) + ∇F(x)ᵀ(y−x) + ½(y−x)ᵀ∇²F(x)(y−x) + (L/6)‖y−x‖³` on each pair.
pub fn verify_cubic_bound(prob: &PenaltyProblem, pairs: &[(StackedVector, StackedVector)]) -> Result<CubicBoundReport> {
    let lipschitz = prob.lipschitz();
    let mut worst = f64::NEG_INFINITY;
    for (x, y) in pairs {
        let d = y.sub(x);
        let hd = prob.hessian_vec(x, &d)?;
        let rhs = prob.value(x)?
            + prob.gradient(x)?.dot(&d)
            + 0.5 * d.dot(&hd)
            + lipschitz / 6.0 * d.norm().powi(3);
        worst = worst.max(prob.value(y)? - rhs);
    }
    Ok(CubicBoundReport {
        pairs: pairs.len(),
        max_violation: worst,
        holds: worst <= CUBIC_BOUND_SLACK,
    })
}
