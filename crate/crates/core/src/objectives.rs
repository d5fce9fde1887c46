//! Local objectives and the penalty problem
//! `F(x) = Σ_i f_i(x^i) + (1/2λ) xᵀ(I − Z)x`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::CommGraph;

/// Block vector `x = (x^1, …, x^n) ∈ R^{np}` stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedVector {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl StackedVector {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            data: vec![0.0; n * p],
        }
    }

    /// Every block equal to `v`.
    pub fn consensus(n: usize, v: &[f64]) -> Self {
        let mut data = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            data.extend_from_slice(v);
        }
        Self { n, p: v.len(), data }
    }

    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Result<Self> {
        let n = blocks.len();
        if n == 0 {
            return Err(Error::Dimension("stacked vector needs at least one block".into()));
        }
        let p = blocks[0].len();
        if p == 0 {
            return Err(Error::Dimension("block dimension must be at least 1".into()));
        }
        if let Some((i, b)) = blocks.iter().enumerate().find(|(_, b)| b.len() != p) {
            return Err(Error::Dimension(format!(
                "block {} has dimension {}, expected {p}",
                i + 1,
                b.len()
            )));
        }
        Ok(Self {
            n,
            p,
            data: blocks.concat(),
        })
    }

    pub fn from_flat(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || p == 0 || data.len() != n * p {
            return Err(Error::Dimension(format!(
                "flat data of length {} cannot form {n} blocks of dimension {p}",
                data.len()
            )));
        }
        Ok(Self { n, p, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub fn from_dvector(n: usize, p: usize, v: &DVector<f64>) -> Result<Self> {
        Self::from_flat(n, p, v.as_slice().to_vec())
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Self {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Self { data, ..*self }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { data, ..*self }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            data: self.data.iter().map(|a| alpha * a).collect(),
            ..*self
        }
    }

    /// Block average `x̄ = (1/n) Σ_i x^i`, summed in agent order.
    pub fn mean_block(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.p];
        for b in self.blocks() {
            for (a, v) in acc.iter_mut().zip(b) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / self.n as f64).collect()
    }

    /// `max_i ‖x^i − x̄‖`.
    pub fn consensus_error(&self) -> f64 {
        let mean = self.mean_block();
        self.blocks()
            .map(|b| norm(&sub(b, &mean)))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First block containing a non-finite entry.
    pub fn first_non_finite_block(&self) -> Option<usize> {
        self.blocks().position(|b| b.iter().any(|v| !v.is_finite()))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Curvature constants of a local objective: `m I ⪯ ∇²f ⪯ M I` and
/// `‖∇²f(y) − ∇²f(z)‖ ≤ L ‖y − z‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature {
    pub m: f64,
    pub big_m: f64,
    pub lipschitz: f64,
}

/// A smooth, strongly convex per-agent objective.
pub trait LocalObjective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, y: &[f64]) -> f64;
    fn gradient(&self, y: &[f64]) -> Vec<f64>;
    fn hessian(&self, y: &[f64]) -> DMatrix<f64>;
    fn hessian_vec(&self, y: &[f64], v: &[f64]) -> Vec<f64> {
        let h = self.hessian(y);
        (h * DVector::from_column_slice(v)).as_slice().to_vec()
    }
    fn curvature(&self) -> Curvature;
}

pub type SharedObjective = Arc<dyn LocalObjective>;

fn eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// `f(y) = ½ yᵀA y + bᵀy` with `A` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: DMatrix<f64>,
    b: DVector<f64>,
    offset: f64,
    curvature: Curvature,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let p = b.len();
        if p == 0 || a.nrows() != p || a.ncols() != p {
            return Err(Error::Dimension(format!(
                "quadratic needs a {p}x{p} matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let asym = (&a - a.transpose()).abs().max();
        if asym > 1e-12 * a.abs().max().max(1.0) {
            return Err(Error::InvalidObjective(format!(
                "matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let (min, max) = eigen_range(&a);
        if !(min > 0.0) {
            return Err(Error::InvalidObjective(format!(
                "matrix is not positive definite (eigenvalue {min:e})"
            )));
        }
        Ok(Self {
            a,
            b,
            offset: 0.0,
            curvature: Curvature {
                m: min,
                big_m: max,
                lipschitz: 0.0,
            },
        })
    }

    /// Adds a constant to the value; gradients are unchanged.
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.b
    }
}

impl LocalObjective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, y: &[f64]) -> f64 {
        let y = DVector::from_column_slice(y);
        0.5 * y.dot(&(&self.a * &y)) + self.b.dot(&y) + self.offset
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(y);
        (&self.a * y + &self.b).as_slice().to_vec()
    }

    fn hessian(&self, _y: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }

    fn hessian_vec(&self, _y: &[f64], v: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    fn curvature(&self) -> Curvature {
        self.curvature
    }
}

/// Quadratic family from explicit `(A_i, b_i)` pairs.
pub fn quadratic_family(specs: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Vec<SharedObjective>> {
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            Quadratic::new(a, b)
                .map(|q| Arc::new(q) as SharedObjective)
                .map_err(|e| Error::InvalidObjective(format!("agent {}: {e}", i + 1)))
        })
        .collect()
}

/// Seeded quadratic family whose Hessian spectra lie in `[lo, hi]`.
///
/// Each `A_i = Q diag(μ) Qᵀ` with `Q` a random orthogonal matrix. For `p ≥ 2`
/// the extreme eigenvalues are pinned to `lo` and `hi`; interior ones are
/// uniform. `b_i` is standard normal.
pub fn random_quadratic_family(
    n: usize,
    p: usize,
    spectrum: (f64, f64),
    seed: u64,
) -> Result<Vec<SharedObjective>> {
    let (lo, hi) = spectrum;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "spectrum must satisfy 0 < m <= M, got [{lo}, {hi}]"
        )));
    }
    if p == 0 {
        return Err(Error::Dimension("block dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let eig: Vec<f64> = (0..p)
            .map(|k| match (p, k) {
                (1, _) => rng.random_range(lo..=hi),
                (_, 0) => lo,
                (_, k) if k == p - 1 => hi,
                _ => rng.random_range(lo..=hi),
            })
            .collect();
        let d = DMatrix::from_diagonal(&DVector::from_vec(eig));
        let a = &q * d * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let b = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push(Arc::new(Quadratic::new(a, b)?) as SharedObjective);
    }
    Ok(out)
}

/// One labelled sample held by an agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

/// `f(y) = Σ_s log(1 + exp(−label_s · a_sᵀy)) + (μ/2)‖y‖²`.
#[derive(Debug, Clone)]
pub struct Logistic {
    p: usize,
    samples: Vec<Sample>,
    mu: f64,
    curvature: Curvature,
}

// max |σ''(t)| for σ(t) = log(1 + e^{-t}) is 1/(6√3).
const LOGISTIC_THIRD_DERIVATIVE_BOUND: f64 = 0.096_225_044_864_937_63;

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn new(p: usize, samples: Vec<Sample>, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "regularizer mu must be positive, got {mu}"
            )));
        }
        if p == 0 {
            return Err(Error::Dimension("block dimension must be at least 1".into()));
        }
        for (s, sample) in samples.iter().enumerate() {
            if sample.label != 1.0 && sample.label != -1.0 {
                return Err(Error::InvalidObjective(format!(
                    "sample {} has label {}; labels must be -1 or +1",
                    s + 1,
                    sample.label
                )));
            }
            if sample.features.len() != p {
                return Err(Error::Dimension(format!(
                    "sample {} has {} features, expected {p}",
                    s + 1,
                    sample.features.len()
                )));
            }
        }
        let mut gram = DMatrix::zeros(p, p);
        let mut cubes = 0.0;
        for s in &samples {
            let a = DVector::from_column_slice(&s.features);
            gram += &a * a.transpose();
            cubes += a.norm().powi(3);
        }
        let gram_max = if samples.is_empty() { 0.0 } else { eigen_range(&gram).1 };
        let curvature = Curvature {
            m: mu,
            big_m: mu + 0.25 * gram_max.max(0.0),
            lipschitz: LOGISTIC_THIRD_DERIVATIVE_BOUND * cubes,
        };
        Ok(Self {
            p,
            samples,
            mu,
            curvature,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    fn margin(s: &Sample, y: &[f64]) -> f64 {
        s.label * s.features.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl LocalObjective for Logistic {
    fn dim(&self) -> usize {
        self.p
    }

    fn value(&self, y: &[f64]) -> f64 {
        let loss: f64 = self.samples.iter().map(|s| softplus(-Self::margin(s, y))).sum();
        loss + 0.5 * self.mu * y.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = y.iter().map(|v| self.mu * v).collect();
        for s in &self.samples {
            let coef = -s.label * sigmoid(-Self::margin(s, y));
            for (gk, ak) in g.iter_mut().zip(&s.features) {
                *gk += coef * ak;
            }
        }
        g
    }

    fn hessian(&self, y: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::identity(self.p, self.p) * self.mu;
        for s in &self.samples {
            let z = Self::margin(s, y);
            let w = sigmoid(z) * sigmoid(-z);
            let a = DVector::from_column_slice(&s.features);
            h += (&a * a.transpose()) * w;
        }
        h
    }

    fn hessian_vec(&self, y: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| self.mu * x).collect();
        for s in &self.samples {
            let z = Self::margin(s, y);
            let w = sigmoid(z) * sigmoid(-z);
            let av: f64 = s.features.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, a) in out.iter_mut().zip(&s.features) {
                *o += w * av * a;
            }
        }
        out
    }

    fn curvature(&self) -> Curvature {
        self.curvature
    }
}

/// Regularized logistic family, one sample set per agent.
pub fn logistic_family(p: usize, data: Vec<Vec<Sample>>, mu: f64) -> Result<Vec<SharedObjective>> {
    data.into_iter()
        .enumerate()
        .map(|(i, samples)| {
            Logistic::new(p, samples, mu)
                .map(|l| Arc::new(l) as SharedObjective)
                .map_err(|e| Error::InvalidObjective(format!("agent {}: {e}", i + 1)))
        })
        .collect()
}

/// Seeded synthetic classification data: Gaussian features, labels from a
/// random separating direction with 10% label noise.
pub fn synthetic_logistic_data(n: usize, p: usize, per_agent: usize, seed: u64) -> Vec<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|_| {
            (0..per_agent)
                .map(|_| {
                    let features: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                    let score: f64 = features.iter().zip(&truth).map(|(a, b)| a * b).sum();
                    let mut label = if score >= 0.0 { 1.0 } else { -1.0 };
                    if rng.random_bool(0.1) {
                        label = -label;
                    }
                    Sample { features, label }
                })
                .collect()
        })
        .collect()
}

/// Read logistic samples from CSV with header
/// `agent_id,label,feature_1,…,feature_p` (1-based agent ids).
/// Returns the feature dimension and per-agent samples for `n` agents.
pub fn load_logistic_csv(path: &Path, n: usize) -> Result<(usize, Vec<Vec<Sample>>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 3 || &headers[0] != "agent_id" || &headers[1] != "label" {
        return Err(Error::Config(format!(
            "{}: header must be agent_id,label,feature_1,...",
            path.display()
        )));
    }
    let p = headers.len() - 2;
    let mut data = vec![Vec::new(); n];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let row = line + 2;
        let parse = |k: usize| -> Result<f64> {
            record[k].trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("{}:{row}: column {}: {e}", path.display(), k + 1))
            })
        };
        let agent = record[0].trim().parse::<usize>().map_err(|e| {
            Error::Config(format!("{}:{row}: agent_id: {e}", path.display()))
        })?;
        if agent == 0 || agent > n {
            return Err(Error::Config(format!(
                "{}:{row}: agent_id {agent} outside 1..={n}",
                path.display()
            )));
        }
        let label = parse(1)?;
        let features = (2..record.len()).map(parse).collect::<Result<Vec<_>>>()?;
        data[agent - 1].push(Sample { features, label });
    }
    Ok((p, data))
}

/// Penalty problem over a communication graph.
#[derive(Debug, Clone)]
pub struct PenaltyProblem {
    graph: CommGraph,
    locals: Vec<SharedObjective>,
    lambda: f64,
    p: usize,
}

impl PenaltyProblem {
    pub fn new(graph: CommGraph, locals: Vec<SharedObjective>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty coefficient lambda must be positive, got {lambda}"
            )));
        }
        if locals.len() != graph.n() {
            return Err(Error::Dimension(format!(
                "{} local objectives for {} agents",
                locals.len(),
                graph.n()
            )));
        }
        let p = locals[0].dim();
        if let Some(i) = locals.iter().position(|f| f.dim() != p) {
            return Err(Error::Dimension(format!(
                "agent {} has dimension {}, expected {p}",
                i + 1,
                locals[i].dim()
            )));
        }
        Ok(Self {
            graph,
            locals,
            lambda,
            p,
        })
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    pub fn local(&self, i: usize) -> &dyn LocalObjective {
        self.locals[i].as_ref()
    }

    pub fn locals(&self) -> &[SharedObjective] {
        &self.locals
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.n() * self.p
    }

    /// `m = min_i m_i`.
    pub fn m(&self) -> f64 {
        self.locals.iter().map(|f| f.curvature().m).fold(f64::INFINITY, f64::min)
    }

    /// `M = max_i M_i`.
    pub fn big_m(&self) -> f64 {
        self.locals.iter().map(|f| f.curvature().big_m).fold(0.0, f64::max)
    }

    /// `L = max_i L_i`.
    pub fn lipschitz(&self) -> f64 {
        self.locals.iter().map(|f| f.curvature().lipschitz).fold(0.0, f64::max)
    }

    /// Upper spectral bound of `∇²F`: `a = M + 2(1 − w_min)/λ`.
    pub fn upper_bound(&self) -> f64 {
        self.big_m() + 2.0 * (1.0 - self.graph.w_min()) / self.lambda
    }

    fn check(&self, x: &StackedVector) -> Result<()> {
        if x.n() != self.n() || x.p() != self.p {
            return Err(Error::Dimension(format!(
                "expected {} blocks of dimension {}, got {} blocks of dimension {}",
                self.n(),
                self.p,
                x.n(),
                x.p()
            )));
        }
        Ok(())
    }

    /// `F(x)`. The penalty term is accumulated as `Σ_{(i,j)∈E} w_ij ‖x^i − x^j‖²`,
    /// which equals `xᵀ(I − Z)x` and is exactly zero at consensus.
    pub fn value(&self, x: &StackedVector) -> Result<f64> {
        self.check(x)?;
        let h: f64 = (0..self.n()).map(|i| self.locals[i].value(x.block(i))).sum();
        Ok(h + self.penalty_term(x)?)
    }

    /// `(1/2λ) xᵀ(I − Z)x`.
    pub fn penalty_term(&self, x: &StackedVector) -> Result<f64> {
        self.check(x)?;
        let quad: f64 = self
            .graph
            .edges()
            .into_iter()
            .map(|(i, j)| {
                let d = sub(x.block(i), x.block(j));
                self.graph.weight(i, j) * d.iter().map(|v| v * v).sum::<f64>()
            })
            .sum();
        Ok(quad / (2.0 * self.lambda))
    }

    /// `∇F(x)`, block `i` = `∇f_i(x^i) + (1/λ)(x^i − Σ_j w_ij x^j)`.
    pub fn gradient(&self, x: &StackedVector) -> Result<StackedVector> {
        self.check(x)?;
        let mut out = Vec::with_capacity(self.dim());
        for i in 0..self.n() {
            let own = x.block(i);
            let dis = disagreement(self.graph.row(i), i, own, |j| Ok::<_, Error>(x.block(j)))?;
            let grad_f = self.locals[i].gradient(own);
            out.extend(penalty_gradient_block(&grad_f, &dis, self.lambda));
        }
        StackedVector::from_flat(self.n(), self.p, out)
    }

    /// `(∇²h(x) + (1/λ)(I − Z)) v`.
    pub fn hessian_vec(&self, x: &StackedVector, v: &StackedVector) -> Result<StackedVector> {
        self.check(x)?;
        self.check(v)?;
        let mut out = Vec::with_capacity(self.dim());
        for i in 0..self.n() {
            let hv = self.locals[i].hessian_vec(x.block(i), v.block(i));
            let dis = disagreement(self.graph.row(i), i, v.block(i), |j| Ok::<_, Error>(v.block(j)))?;
            out.extend(hv.iter().zip(&dis).map(|(a, d)| a + d / self.lambda));
        }
        StackedVector::from_flat(self.n(), self.p, out)
    }

    /// Dense `∇²F(x)` of size `np × np`. Desk-scale use only.
    pub fn dense_hessian(&self, x: &StackedVector) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let (n, p) = (self.n(), self.p);
        let mut h = DMatrix::zeros(n * p, n * p);
        for i in 0..n {
            let hi = self.locals[i].hessian(x.block(i));
            h.view_mut((i * p, i * p), (p, p)).copy_from(&hi);
            for &(j, w) in self.graph.row(i) {
                let coef = if i == j { (1.0 - w) / self.lambda } else { -w / self.lambda };
                for r in 0..p {
                    h[(i * p + r, j * p + r)] += coef;
                }
            }
        }
        Ok(h)
    }

    /// `f(y) = Σ_i f_i(y)` on the common decision vector.
    pub fn sum_value(&self, y: &[f64]) -> f64 {
        self.locals.iter().map(|f| f.value(y)).sum()
    }

    pub fn sum_gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.p];
        for f in &self.locals {
            for (a, b) in g.iter_mut().zip(f.gradient(y)) {
                *a += b;
            }
        }
        g
    }

    pub fn sum_hessian(&self, y: &[f64]) -> DMatrix<f64> {
        self.locals
            .iter()
            .fold(DMatrix::zeros(self.p, self.p), |acc, f| acc + f.hessian(y))
    }
}

/// `Σ_{j ∈ N_i} w_ij (x^i − x^j)`, which equals `x^i − Σ_{j∈N_i∪{i}} w_ij x^j`
/// and vanishes exactly when every neighbor agrees with agent `i`.
pub(crate) fn disagreement<'a, E, F>(
    row: &[(usize, f64)],
    own_index: usize,
    own: &[f64],
    mut fetch: F,
) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(usize) -> std::result::Result<&'a [f64], E>,
{
    let mut acc = vec![0.0; own.len()];
    for &(j, w) in row {
        if j == own_index {
            continue;
        }
        let xj = fetch(j)?;
        for ((a, &xi), &xjk) in acc.iter_mut().zip(own).zip(xj) {
            *a += w * (xi - xjk);
        }
    }
    Ok(acc)
}

/// Block `i` of `∇F`: `∇f_i + disagreement / λ`.
pub(crate) fn penalty_gradient_block(grad_f: &[f64], disagreement: &[f64], lambda: f64) -> Vec<f64> {
    grad_f
        .iter()
        .zip(disagreement)
        .map(|(g, d)| g + d / lambda)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_a() -> PenaltyProblem {
        crate::fixtures::fixture_a(1.0)
    }

    #[test]
    fn offset_shifts_value_only() {
        let q = Quadratic::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -1.0)).unwrap();
        let shifted = q.clone().with_offset(0.5);
        assert_eq!(shifted.value(&[1.0]), 0.0);
        assert_eq!(q.value(&[1.0]), -0.5);
        assert_eq!(shifted.gradient(&[3.0]), q.gradient(&[3.0]));
    }

    fn sv(v: &[f64]) -> StackedVector {
        StackedVector::from_blocks(v.iter().map(|&a| vec![a]).collect()).unwrap()
    }

    #[test]
    fn fixture_a_values() {
        let prob = fixture_a();
        assert!((prob.value(&sv(&[1.0, 0.0])).unwrap() - 0.75).abs() < 1e-15);
        assert!((prob.value(&sv(&[0.0, 0.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(prob.penalty_term(&sv(&[0.3, 0.3])).unwrap(), 0.0);
    }

    #[test]
    fn fixture_a_gradients() {
        let prob = fixture_a();
        assert_eq!(prob.gradient(&sv(&[0.0, 0.0])).unwrap(), sv(&[-1.0, 1.0]));
        assert_eq!(prob.gradient(&sv(&[1.0, 0.0])).unwrap(), sv(&[0.5, 0.5]));
        assert_eq!(prob.gradient(&sv(&[0.5, -0.5])).unwrap(), sv(&[0.0, 0.0]));
    }

    #[test]
    fn fixture_a_hessian_actions() {
        let prob = fixture_a();
        let x = sv(&[0.2, 3.0]);
        assert_eq!(prob.hessian_vec(&x, &sv(&[1.0, 1.0])).unwrap(), sv(&[1.0, 1.0]));
        assert_eq!(prob.hessian_vec(&x, &sv(&[1.0, -1.0])).unwrap(), sv(&[2.0, -2.0]));
        assert_eq!(prob.hessian_vec(&x, &sv(&[0.0, 0.0])).unwrap(), sv(&[0.0, 0.0]));
        let h = prob.dense_hessian(&x).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.5, -0.5, -0.5, 1.5]));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let prob = fixture_a();
        assert!(prob.value(&sv(&[1.0])).is_err());
        assert!(prob.gradient(&StackedVector::zeros(2, 2)).is_err());
    }

    #[test]
    fn identity_quadratic() {
        let q = Quadratic::new(DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        assert_eq!(q.value(&[1.0, 2.0, 2.0]), 4.5);
        assert_eq!(q.gradient(&[0.0; 3]), vec![0.0; 3]);
        assert_eq!(q.curvature(), Curvature { m: 1.0, big_m: 1.0, lipschitz: 0.0 });
    }

    #[test]
    fn non_spd_rejected_with_eigenvalue() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = Quadratic::new(a, DVector::zeros(2)).unwrap_err();
        assert!(err.to_string().contains("-1"), "{err}");
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(Quadratic::new(asym, DVector::zeros(2)).is_err());
    }

    #[test]
    fn random_family_spectrum() {
        let fam = random_quadratic_family(6, 4, (1.0, 10.0), 42).unwrap();
        for f in &fam {
            let c = f.curvature();
            assert!(c.m >= 1.0 - 1e-12 && c.big_m <= 10.0 + 1e-12, "{c:?}");
            assert!((c.m - 1.0).abs() < 1e-12 && (c.big_m - 10.0).abs() < 1e-12);
        }
        let again = random_quadratic_family(6, 4, (1.0, 10.0), 42).unwrap();
        assert_eq!(fam[3].gradient(&[1.0, 2.0, 3.0, 4.0]), again[3].gradient(&[1.0, 2.0, 3.0, 4.0]));
        assert!(random_quadratic_family(2, 2, (0.0, 1.0), 1).is_err());
    }

    #[test]
    fn logistic_pure_regularizer() {
        let f = Logistic::new(2, vec![], 1.0).unwrap();
        assert_eq!(f.value(&[3.0, 4.0]), 12.5);
        assert_eq!(f.gradient(&[3.0, 4.0]), vec![3.0, 4.0]);
        assert_eq!(f.curvature().big_m, 1.0);
    }

    #[test]
    fn logistic_single_sample() {
        let f = Logistic::new(
            1,
            vec![Sample {
                features: vec![1.0],
                label: 1.0,
            }],
            1.0,
        )
        .unwrap();
        assert!((f.value(&[0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((f.gradient(&[0.0])[0] + 0.5).abs() < 1e-15);
        assert!((f.hessian(&[0.0])[(0, 0)] - 1.25).abs() < 1e-15);
        let c = f.curvature();
        assert_eq!(c.m, 1.0);
        assert_eq!(c.big_m, 1.25);
        assert!((c.lipschitz - 1.0 / (6.0 * 3f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn logistic_rejects_bad_labels() {
        let bad = vec![Sample {
            features: vec![1.0],
            label: 0.0,
        }];
        assert!(matches!(Logistic::new(1, bad, 1.0), Err(Error::InvalidObjective(_))));
        assert!(Logistic::new(1, vec![], 0.0).is_err());
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let data = synthetic_logistic_data(1, 3, 12, 9);
        let f = Logistic::new(3, data[0].clone(), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = f.gradient(&y);
            let h = 1e-6;
            let fd: Vec<f64> = (0..3)
                .map(|k| {
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[k] += h;
                    ym[k] -= h;
                    (f.value(&yp) - f.value(&ym)) / (2.0 * h)
                })
                .collect();
            let rel = norm(&sub(&g, &fd)) / norm(&g);
            assert!(rel < 1e-6, "relative error {rel}");
        }
    }

    #[test]
    fn logistic_hessian_sandwich() {
        let data = synthetic_logistic_data(1, 2, 20, 4);
        let f = Logistic::new(2, data[0].clone(), 0.3).unwrap();
        let c = f.curvature();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (lo, hi) = eigen_range(&f.hessian(&y));
            assert!(lo >= c.m - 1e-12 && hi <= c.big_m + 1e-12);
            let hv = f.hessian_vec(&y, &[0.7, -1.1]);
            let dense = f.hessian(&y) * DVector::from_column_slice(&[0.7, -1.1]);
            assert!(norm(&sub(&hv, dense.as_slice())) < 1e-12);
        }
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "agent_id,label,feature_1,feature_2\n1,1,0.5,1\n2,-1,2,3\n1,-1,0,1\n").unwrap();
        let (p, data) = load_logistic_csv(&path, 3).unwrap();
        assert_eq!(p, 2);
        assert_eq!(data[0].len(), 2);
        assert_eq!(data[1][0].features, vec![2.0, 3.0]);
        assert!(data[2].is_empty());
        std::fs::write(&path, "agent_id,label,feature_1\n4,1,0.5\n").unwrap();
        assert!(load_logistic_csv(&path, 3).is_err());
    }

    #[test]
    fn stacked_vector_helpers() {
        let x = StackedVector::from_blocks(vec![vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(x.mean_block(), vec![2.0, 4.0]);
        assert!((x.consensus_error() - 5f64.sqrt()).abs() < 1e-15);
        assert!(StackedVector::from_blocks(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(StackedVector::from_blocks(vec![]).is_err());
        assert_eq!(StackedVector::consensus(3, &[1.5]).consensus_error(), 0.0);
    }
}
