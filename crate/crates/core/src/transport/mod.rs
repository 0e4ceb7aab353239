//! The balanced transportation problem and its solvers.
//!
//! Three solvers share one problem/solution representation:
//! [`solve_simplex`] (transportation simplex, exact vertex solutions),
//! [`solve_interior_point`] (primal-dual path following, central-path duals)
//! and [`solve_oracle`] (basis enumeration for tiny instances).
//!
//! Dual sign convention: `duals_eq` holds the potentials `(u, v)` with
//! `lambda_ij = c_ij - u_i - v_j >= 0`, so that the derivative of the optimal
//! value along a balanced change of the marginals is `u . ds + v . dd`. In the
//! Lagrangian `c'x + lambda'(Gx - h) + nu'(Ax - b)` this is `nu = -duals_eq`.

mod ipm;
mod oracle;
mod simplex;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use ipm::solve_interior_point;
pub use oracle::{solve_oracle, ORACLE_MAX_CELLS};
pub use simplex::solve_simplex;

/// Relative tolerance on `|sum(supply) - sum(demand)|`.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("invalid transportation problem: {0}")]
    InvalidProblem(String),
    #[error("unbalanced problem: supply total {supply}, demand total {demand}")]
    Unbalanced { supply: f64, demand: f64 },
    #[error("simplex failed to terminate after {iterations} pivots (cycling)")]
    CyclingDetected { iterations: usize },
    #[error("interior point hit {iterations} iterations with KKT residual {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("instance has {cells} cells; the oracle handles at most {max}")]
    InstanceTooLarge { cells: usize, max: usize },
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Simplex,
    InteriorPoint,
    Oracle,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Simplex => "simplex",
            SolverKind::InteriorPoint => "ipm",
            SolverKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simplex" => Ok(SolverKind::Simplex),
            "ipm" | "interior-point" | "interior_point" => Ok(SolverKind::InteriorPoint),
            "oracle" => Ok(SolverKind::Oracle),
            other => Err(format!("unknown solver {other:?}")),
        }
    }
}

/// Cost matrix `m x k` with supplies (rows) and demands (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    cost: DMatrix<f64>,
    supply: DVector<f64>,
    demand: DVector<f64>,
}

impl TransportProblem {
    pub fn new(
        cost: DMatrix<f64>,
        supply: DVector<f64>,
        demand: DVector<f64>,
    ) -> Result<Self, LpError> {
        let (m, k) = cost.shape();
        if m == 0 || k == 0 {
            return Err(LpError::InvalidProblem("cost matrix must be non-empty".into()));
        }
        if supply.len() != m || demand.len() != k {
            return Err(LpError::InvalidProblem(format!(
                "cost is {m}x{k} but supply has {} and demand {} entries",
                supply.len(),
                demand.len()
            )));
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(LpError::InvalidProblem("cost entries must be finite".into()));
        }
        for (name, v) in [("supply", &supply), ("demand", &demand)] {
            if v.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(LpError::InvalidProblem(format!(
                    "{name} entries must be finite and non-negative"
                )));
            }
            if v.sum() <= 0.0 {
                return Err(LpError::InvalidProblem(format!("{name} total must be positive")));
            }
        }
        Ok(Self {
            cost,
            supply,
            demand,
        })
    }

    /// Row-major convenience constructor.
    pub fn from_rows(cost: &[Vec<f64>], supply: &[f64], demand: &[f64]) -> Result<Self, LpError> {
        let m = cost.len();
        let k = cost.first().map_or(0, Vec::len);
        if cost.iter().any(|r| r.len() != k) {
            return Err(LpError::InvalidProblem("ragged cost matrix".into()));
        }
        let cost = DMatrix::from_fn(m, k, |i, j| cost[i][j]);
        Self::new(
            cost,
            DVector::from_column_slice(supply),
            DVector::from_column_slice(demand),
        )
    }

    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost
    }

    pub fn supply(&self) -> &DVector<f64> {
        &self.supply
    }

    pub fn demand(&self) -> &DVector<f64> {
        &self.demand
    }

    pub fn rows(&self) -> usize {
        self.cost.nrows()
    }

    pub fn cols(&self) -> usize {
        self.cost.ncols()
    }

    pub fn cells(&self) -> usize {
        self.cost.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.supply.sum()
    }

    pub fn is_balanced(&self) -> bool {
        let (s, d) = (self.supply.sum(), self.demand.sum());
        (s - d).abs() <= BALANCE_TOL * s.max(d)
    }

    pub fn check_balanced(&self) -> Result<(), LpError> {
        if self.is_balanced() {
            Ok(())
        } else {
            Err(LpError::Unbalanced {
                supply: self.supply.sum(),
                demand: self.demand.sum(),
            })
        }
    }

    pub fn with_cost(&self, cost: DMatrix<f64>) -> Result<Self, LpError> {
        Self::new(cost, self.supply.clone(), self.demand.clone())
    }

    pub fn with_weights(&self, supply: DVector<f64>, demand: DVector<f64>) -> Result<Self, LpError> {
        Self::new(self.cost.clone(), supply, demand)
    }
}

/// Optimal flows and duals for one [`TransportProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    pub flows: DMatrix<f64>,
    pub objective: f64,
    /// Potentials: supplies first (`u`), then demands (`v`).
    pub duals_eq: DVector<f64>,
    /// Inequality multipliers `lambda_ij` (reduced costs at a vertex).
    pub duals_ineq: DMatrix<f64>,
    pub solver: SolverKind,
    pub degenerate: bool,
    pub iterations: usize,
}

impl TransportSolution {
    pub fn supply_duals(&self) -> &[f64] {
        &self.duals_eq.as_slice()[..self.flows.nrows()]
    }

    pub fn demand_duals(&self) -> &[f64] {
        &self.duals_eq.as_slice()[self.flows.nrows()..]
    }

    /// Largest relative violation of the row and column marginals.
    pub fn marginal_error(&self, p: &TransportProblem) -> f64 {
        let scale = p.total_mass().max(f64::MIN_POSITIVE);
        let rows = self
            .flows
            .row_iter()
            .zip(p.supply.iter())
            .map(|(r, s)| (r.sum() - s).abs());
        let cols = self
            .flows
            .column_iter()
            .zip(p.demand.iter())
            .map(|(c, d)| (c.sum() - d).abs());
        rows.chain(cols).fold(0.0, f64::max) / scale
    }

    /// Reduced costs `c_ij - u_i - v_j` for the reported potentials.
    pub fn reduced_costs(&self, p: &TransportProblem) -> DMatrix<f64> {
        let (m, k) = p.cost.shape();
        let u = &self.duals_eq.as_slice()[..m];
        let v = &self.duals_eq.as_slice()[m..];
        DMatrix::from_fn(m, k, |i, j| p.cost[(i, j)] - u[i] - v[j])
    }
}

/// Dense matrix form `min c'x  s.t.  Gx <= h, Ax = b` of a transportation
/// problem. Cell `(i, j)` maps to flat index `i * k + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalLp {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

pub fn canonicalize(p: &TransportProblem) -> CanonicalLp {
    let (m, k) = p.cost.shape();
    let n = m * k;
    let c = DVector::from_fn(n, |idx, _| p.cost[(idx / k, idx % k)]);
    let mut a = DMatrix::zeros(m + k, n);
    for i in 0..m {
        for j in 0..k {
            a[(i, i * k + j)] = 1.0;
            a[(m + j, i * k + j)] = 1.0;
        }
    }
    let b = DVector::from_iterator(m + k, p.supply.iter().chain(p.demand.iter()).copied());
    CanonicalLp {
        c,
        a,
        b,
        g: -DMatrix::identity(n, n),
        h: DVector::zeros(n),
    }
}

/// Default interior-point tolerance used by [`solve`].
pub const DEFAULT_TOL: f64 = 1e-9;

pub fn solve(p: &TransportProblem, solver: SolverKind, tol: f64) -> Result<TransportSolution, LpError> {
    match solver {
        SolverKind::Simplex => solve_simplex(p),
        SolverKind::InteriorPoint => solve_interior_point(p, tol),
        SolverKind::Oracle => solve_oracle(p),
    }
}

/// Degeneracy test shared by all solvers: the cells with `x > lambda` must
/// form a basis of `m + k - 1` cells, every pair `x + lambda` must stay away
/// from zero and every basic flow must be positive.
pub fn is_degenerate(flows: &DMatrix<f64>, lambda: &DMatrix<f64>, total_mass: f64) -> bool {
    let (m, k) = flows.shape();
    let mut basic = 0usize;
    let mut min_basic = f64::INFINITY;
    let mut min_pair = f64::INFINITY;
    for (x, l) in flows.iter().zip(lambda.iter()) {
        if x > l {
            basic += 1;
            min_basic = min_basic.min(*x);
        }
        min_pair = min_pair.min(x + l);
    }
    basic != m + k - 1 || min_pair <= 1e-8 || min_basic < 1e-9 * total_mass
}

/// Adjacency of a basis tree on the `m + k` row/column nodes, stored as
/// intrusive linked lists so rebuilding it allocates only three vectors.
pub(crate) struct TreeAdj {
    m: usize,
    k: usize,
    head: Vec<usize>,
    next: Vec<usize>,
    cell: Vec<usize>,
}

impl TreeAdj {
    const END: usize = usize::MAX;

    pub(crate) fn new(m: usize, k: usize, tree: &[usize]) -> Self {
        let mut adj = Self {
            m,
            k,
            head: vec![Self::END; m + k],
            next: Vec::with_capacity(2 * tree.len()),
            cell: Vec::with_capacity(2 * tree.len()),
        };
        for &c in tree {
            for node in [c / k, m + c % k] {
                adj.next.push(adj.head[node]);
                adj.cell.push(c);
                adj.head[node] = adj.cell.len() - 1;
            }
        }
        adj
    }

    /// `(cell, other endpoint)` for every tree edge at `node`.
    pub(crate) fn edges(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut at = self.head[node];
        std::iter::from_fn(move || {
            if at == Self::END {
                return None;
            }
            let c = self.cell[at];
            at = self.next[at];
            let other = if node < self.m { self.m + c % self.k } else { c / self.k };
            Some((c, other))
        })
    }
}

/// Potentials `(u, v)` with `u_0 = 0` and `c_ij = u_i + v_j` on every cell of a
/// spanning tree of the bipartite row/column graph.
pub(crate) fn tree_potentials(cost: &DMatrix<f64>, tree: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = cost.shape();
    potentials_on(cost, &TreeAdj::new(m, k, tree))
}

pub(crate) fn potentials_on(cost: &DMatrix<f64>, adj: &TreeAdj) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = cost.shape();
    let mut pot = vec![f64::NAN; m + k];
    pot[0] = 0.0;
    let mut stack = Vec::with_capacity(m + k);
    stack.push(0usize);
    while let Some(node) = stack.pop() {
        for (cell, other) in adj.edges(node) {
            if pot[other].is_nan() {
                pot[other] = cost[(cell / k, cell % k)] - pot[node];
                stack.push(other);
            }
        }
    }
    let v = pot.split_off(m);
    (pot, v)
}

/// Builds a solution record from a vertex (basis) solution.
pub(crate) fn vertex_solution(
    p: &TransportProblem,
    flows: DMatrix<f64>,
    tree: &[usize],
    solver: SolverKind,
    iterations: usize,
) -> TransportSolution {
    let (m, k) = p.cost.shape();
    let (u, v) = tree_potentials(&p.cost, tree);
    let lambda = DMatrix::from_fn(m, k, |i, j| (p.cost[(i, j)] - u[i] - v[j]).max(0.0));
    let mut in_tree = vec![false; m * k];
    for &c in tree {
        in_tree[c] = true;
    }
    let scale = p.total_mass();
    let degenerate = tree.iter().any(|&c| flows[(c / k, c % k)] < 1e-9 * scale)
        || (0..m * k).any(|c| !in_tree[c] && lambda[(c / k, c % k)] <= 1e-8);
    let objective = p.cost.component_mul(&flows).sum();
    TransportSolution {
        flows,
        objective,
        duals_eq: DVector::from_iterator(m + k, u.into_iter().chain(v)),
        duals_ineq: lambda,
        solver,
        degenerate,
        iterations,
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Uniform costs in [0, 1), weights uniform in [0.1, 1) normalized to 1.
    pub fn random_problem(rng: &mut ChaCha8Rng, m: usize, k: usize) -> TransportProblem {
        let cost = DMatrix::from_fn(m, k, |_, _| rng.random::<f64>());
        let mut s = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
        let mut d = DVector::from_fn(k, |_, _| rng.random_range(0.1..1.0));
        s /= s.sum();
        d /= d.sum();
        TransportProblem::new(cost, s, d).unwrap()
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}
