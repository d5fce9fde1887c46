//! Communication topologies and their mixing weights.
//!
//! A [`CommGraph`] stores a symmetric, doubly stochastic weight matrix `W`
//! sparsely: one weight per undirected edge plus the diagonal. The action of
//! `Z = W ⊗ I` on a stacked vector is provided by [`CommGraph::mix`]; the
//! Kronecker product is never formed.
//!
//! Agents are 0-based here. External formats (config files, error messages)
//! use 1-based indices.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::objectives::StackedVector;

/// Absolute tolerance for the row-sum and symmetry checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    n: usize,
    neighbors: Vec<Vec<usize>>,
    pair_weights: BTreeMap<(usize, usize), f64>,
    diag: Vec<f64>,
    // Row i of W restricted to N_i ∪ {i}, sorted by column. Built from
    // `pair_weights` so that w_ij and w_ji are the same stored value.
    rows: Vec<Vec<(usize, f64)>>,
}

impl CommGraph {
    /// Metropolis–Hastings weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on
    /// every edge and `w_ii = 1 - Σ_j w_ij`.
    pub fn metropolis(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let edge_set = normalize_edges(n, edges)?;
        let neighbors = adjacency(n, &edge_set);
        check_connected(n, &neighbors)?;

        let pair_weights: BTreeMap<(usize, usize), f64> = edge_set
            .iter()
            .map(|&(i, j)| {
                let deg = neighbors[i].len().max(neighbors[j].len());
                ((i, j), 1.0 / (1.0 + deg as f64))
            })
            .collect();
        let diag = (0..n)
            .map(|i| {
                let off: f64 = neighbors[i]
                    .iter()
                    .map(|&j| pair_weights[&ordered(i, j)])
                    .sum();
                1.0 - off
            })
            .collect();
        Ok(Self::assemble(n, neighbors, pair_weights, diag))
    }

    /// Metropolis weights from 1-based edge pairs, as written in config files.
    pub fn metropolis_one_based(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let shifted = edges
            .iter()
            .map(|&(i, j)| {
                if i == 0 || j == 0 {
                    Err(Error::InvalidEdge(i, j, "agent indices are 1-based".into()))
                } else {
                    Ok((i - 1, j - 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::metropolis(n, &shifted)
    }

    /// Build from a user-supplied dense weight matrix. Every check of
    /// [`validate_weights`] must pass; the edge set is the off-diagonal support.
    pub fn from_weights(weights: &[Vec<f64>]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let report = validate_weights(weights, None);
        if !report.all_passed() {
            return Err(Error::InvalidWeights(report.failure_summary()));
        }
        let n = weights.len();
        let mut pair_weights = BTreeMap::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if weights[i][j] > 0.0 {
                    pair_weights.insert((i, j), weights[i][j]);
                }
            }
        }
        let edge_set: BTreeSet<(usize, usize)> = pair_weights.keys().copied().collect();
        let neighbors = adjacency(n, &edge_set);
        let diag = (0..n).map(|i| weights[i][i]).collect();
        Ok(Self::assemble(n, neighbors, pair_weights, diag))
    }

    fn assemble(
        n: usize,
        neighbors: Vec<Vec<usize>>,
        pair_weights: BTreeMap<(usize, usize), f64>,
        diag: Vec<f64>,
    ) -> Self {
        let rows = (0..n)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = neighbors[i]
                    .iter()
                    .map(|&j| (j, pair_weights[&ordered(i, j)]))
                    .collect();
                row.push((i, diag[i]));
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        Self {
            n,
            neighbors,
            pair_weights,
            diag,
            rows,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Sorted neighbor list `N_i` (excludes `i`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Row `i` of `W` over `N_i ∪ {i}` in ascending column order.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else {
            self.pair_weights.get(&ordered(i, j)).copied().unwrap_or(0.0)
        }
    }

    /// Undirected edges as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.pair_weights.keys().copied().collect()
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.pair_weights.contains_key(&ordered(i, j))
    }

    /// `w_min = min_i w_ii`.
    pub fn w_min(&self) -> f64 {
        self.diag.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Number of directed neighbor messages per round, `Σ_i |N_i|`.
    pub fn directed_edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; self.n]; self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, wij) in row {
                w[i][j] = wij;
            }
        }
        w
    }

    pub fn validate(&self) -> WeightReport {
        validate_weights(&self.dense(), Some(&self.edges()))
    }

    /// `(Zx)^i = Σ_{j ∈ N_i ∪ {i}} w_ij x^j` for every block.
    pub fn mix(&self, x: &StackedVector) -> Result<StackedVector> {
        if x.n() != self.n {
            return Err(Error::Dimension(format!(
                "stacked vector has {} blocks, graph has {} agents",
                x.n(),
                self.n
            )));
        }
        let p = x.p();
        let mut out = Vec::with_capacity(self.n * p);
        for i in 0..self.n {
            let block = weighted_sum(&self.rows[i], p, |j| Ok::<_, Error>(x.block(j)))?;
            out.extend_from_slice(&block);
        }
        StackedVector::from_flat(self.n, p, out)
    }
}

/// `Σ_j w_j · v_j` over `row` in the given order, starting from zero.
///
/// Every mixing computation in the crate goes through here so that the
/// centralized and per-agent paths perform identical floating-point work.
pub fn weighted_sum<'a, E, F>(row: &[(usize, f64)], p: usize, mut fetch: F) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(usize) -> std::result::Result<&'a [f64], E>,
{
    let mut acc = vec![0.0; p];
    for &(j, w) in row {
        let v = fetch(j)?;
        for (a, &vj) in acc.iter_mut().zip(v) {
            *a += w * vj;
        }
    }
    Ok(acc)
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

fn normalize_edges(n: usize, edges: &[(usize, usize)]) -> Result<BTreeSet<(usize, usize)>> {
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut set = BTreeSet::new();
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::InvalidEdge(
                i + 1,
                j + 1,
                format!("agent index out of range 1..={n}"),
            ));
        }
        if i == j {
            return Err(Error::InvalidEdge(i + 1, j + 1, "self-loop".into()));
        }
        set.insert(ordered(i, j));
    }
    Ok(set)
}

fn adjacency(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

fn components(n: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            comp.push(u);
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn check_connected(n: usize, adj: &[Vec<usize>]) -> Result<()> {
    let comps = components(n, adj);
    if comps.len() > 1 {
        return Err(Error::Disconnected(comps));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Largest violation magnitude observed (0 when the check passes cleanly).
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub checks: Vec<CheckOutcome>,
    pub w_min: f64,
}

impl WeightReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failure_summary(&self) -> String {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} (max violation {:e})", c.name, c.max_violation))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Check a dense weight matrix against the conditions a mixing matrix must
/// satisfy. When `edges` is given, the support of `W` must equal exactly those
/// edges plus the diagonal.
pub fn validate_weights(w: &[Vec<f64>], edges: Option<&[(usize, usize)]>) -> WeightReport {
    let n = w.len();
    let mut checks = Vec::new();

    let square = n > 0 && w.iter().all(|r| r.len() == n);
    checks.push(CheckOutcome {
        name: "square",
        passed: square,
        max_violation: if square { 0.0 } else { 1.0 },
    });
    if !square {
        return WeightReport {
            checks,
            w_min: f64::NAN,
        };
    }

    let mut sym = 0.0f64;
    let mut row_dev = 0.0f64;
    let mut neg = 0.0f64;
    for i in 0..n {
        let s: f64 = w[i].iter().sum();
        row_dev = row_dev.max((s - 1.0).abs());
        for j in 0..n {
            sym = sym.max((w[i][j] - w[j][i]).abs());
            neg = neg.max(-w[i][j]);
        }
    }
    checks.push(CheckOutcome {
        name: "symmetry",
        passed: sym == 0.0,
        max_violation: sym,
    });
    checks.push(CheckOutcome {
        name: "row_sums",
        passed: row_dev <= STOCHASTIC_TOL,
        max_violation: row_dev,
    });
    checks.push(CheckOutcome {
        name: "nonnegative",
        passed: neg <= 0.0,
        max_violation: neg.max(0.0),
    });

    let w_min = (0..n).map(|i| w[i][i]).fold(f64::INFINITY, f64::min);
    checks.push(CheckOutcome {
        name: "diagonal_positive",
        passed: w_min > 0.0,
        max_violation: (-w_min).max(0.0),
    });

    if let Some(edges) = edges {
        let set: BTreeSet<(usize, usize)> = edges.iter().map(|&(i, j)| ordered(i, j)).collect();
        let mut support_violation = 0.0f64;
        let mut support_ok = true;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let expected = set.contains(&ordered(i, j));
                let present = w[i][j] > 0.0;
                if expected != present {
                    support_ok = false;
                    support_violation = support_violation.max(w[i][j].abs());
                }
            }
        }
        checks.push(CheckOutcome {
            name: "support",
            passed: support_ok,
            max_violation: support_violation,
        });
    }

    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && (w[i][j] != 0.0 || w[j][i] != 0.0) {
                adj[i].push(j);
            }
        }
    }
    let comps = components(n, &adj).len();
    checks.push(CheckOutcome {
        name: "connected",
        passed: comps == 1,
        max_violation: (comps - 1) as f64,
    });

    WeightReport { checks, w_min }
}
