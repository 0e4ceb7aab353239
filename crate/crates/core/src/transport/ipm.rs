use nalgebra::{DMatrix, DVector};

use super::{is_degenerate, LpError, SolverKind, TransportProblem, TransportSolution};

const MAX_ITERATIONS: usize = 200;
const STEP_FRACTION: f64 = 0.99;

/// Mehrotra predictor-corrector path following on
/// `min c'x  s.t.  Ax = b, x >= 0` with `A` the transportation constraints.
///
/// The last demand row of `A` is linearly dependent on the others and is
/// dropped; its potential is pinned to zero. Stops once the KKT residual
/// `|| (c - lambda - A'nu, lambda o x, Ax - b) ||_2` is at most `tol` and the duality
/// gap `x'lambda` at most `tol / 2`.
pub fn solve_interior_point(p: &TransportProblem, tol: f64) -> Result<TransportSolution, LpError> {
    if !(tol > 0.0) {
        return Err(LpError::InvalidTolerance(tol));
    }
    p.check_balanced()?;
    let (m, k) = p.cost().shape();
    let n = m * k;
    let nr = m + k - 1;
    let total = p.total_mass();

    let c: Vec<f64> = (0..n).map(|idx| p.cost()[(idx / k, idx % k)]).collect();
    let supply: Vec<f64> = p.supply().iter().copied().collect();
    // Rebalance inside the accepted tolerance so the dropped row is implied.
    let rescale = total / p.demand().sum();
    let demand: Vec<f64> = p.demand().iter().map(|d| d * rescale).collect();
    let ops = Ops { m, k };

    // Product coupling is feasible; the shift moves it off the boundary.
    let shift = 0.1 * total / n as f64;
    let mut x: Vec<f64> = (0..n)
        .map(|idx| supply[idx / k] * demand[idx % k] / total + shift)
        .collect();
    let mut s = vec![1.0; n];
    let mut y = vec![0.0; nr];

    let mut residual = f64::INFINITY;
    for iter in 0..MAX_ITERATIONS {
        let r_b = ops.primal_residual(&x, &supply, &demand);
        let r_c: Vec<f64> = {
            let aty = ops.at_y(&y);
            (0..n).map(|t| aty[t] + s[t] - c[t]).collect()
        };
        let xs: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a * b).collect();
        let gap: f64 = xs.iter().sum();
        residual = (norm2(&r_c) + norm2(&xs) + norm2(&r_b)).sqrt();
        if residual <= tol && gap <= 0.5 * tol {
            return Ok(finish(p, &x, &s, &y, iter));
        }
        let mu = gap / n as f64;

        let d: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a / b).collect();
        let normal = ops.normal_matrix(&d);
        let factor = Factor::new(normal);

        let r_b_reduced = &r_b[..nr];
        let (dx_a, _, ds_a) = ops.newton(&factor, &x, &s, r_b_reduced, &r_c, &xs);
        let ap = max_step(&x, &dx_a).min(1.0);
        let ad = max_step(&s, &ds_a).min(1.0);
        let mu_aff = (0..n)
            .map(|t| (x[t] + ap * dx_a[t]) * (s[t] + ad * ds_a[t]))
            .sum::<f64>()
            / n as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);

        let r_xs: Vec<f64> = (0..n)
            .map(|t| xs[t] + dx_a[t] * ds_a[t] - sigma * mu)
            .collect();
        let (dx, dy, ds) = ops.newton(&factor, &x, &s, r_b_reduced, &r_c, &r_xs);
        let ap = (STEP_FRACTION * max_step(&x, &dx)).min(1.0);
        let ad = (STEP_FRACTION * max_step(&s, &ds)).min(1.0);
        for t in 0..n {
            x[t] += ap * dx[t];
            s[t] += ad * ds[t];
        }
        for (yi, dyi) in y.iter_mut().zip(&dy) {
            *yi += ad * dyi;
        }
        if x.iter().chain(&s).chain(&y).any(|v| !v.is_finite()) {
            break;
        }
    }
    Err(LpError::MaxIterations {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

fn finish(p: &TransportProblem, x: &[f64], s: &[f64], y: &[f64], iterations: usize) -> TransportSolution {
    let (m, k) = p.cost().shape();
    let flows = DMatrix::from_fn(m, k, |i, j| x[i * k + j].max(0.0));
    let lambda = DMatrix::from_fn(m, k, |i, j| s[i * k + j].max(0.0));
    let duals_eq = DVector::from_iterator(m + k, y.iter().copied().chain(std::iter::once(0.0)));
    let objective = p.cost().component_mul(&flows).sum();
    let degenerate = is_degenerate(&flows, &lambda, p.total_mass());
    TransportSolution {
        flows,
        objective,
        duals_eq,
        duals_ineq: lambda,
        solver: SolverKind::InteriorPoint,
        degenerate,
        iterations,
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Largest `alpha` in `(0, inf)` keeping `v + alpha * dv >= 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(a, d)| -a / d)
        .fold(f64::INFINITY, f64::min)
}

/// Structured products with the reduced constraint matrix (rows: all
/// supplies, then the first `k - 1` demands).
struct Ops {
    m: usize,
    k: usize,
}

impl Ops {
    fn ax(&self, x: &[f64]) -> Vec<f64> {
        let (m, k) = (self.m, self.k);
        let mut out = vec![0.0; m + k];
        for i in 0..m {
            for j in 0..k {
                out[i] += x[i * k + j];
                out[m + j] += x[i * k + j];
            }
        }
        out
    }

    /// Full residual `Ax - b` over all `m + k` rows.
    fn primal_residual(&self, x: &[f64], supply: &[f64], demand: &[f64]) -> Vec<f64> {
        let mut r = self.ax(x);
        for (ri, bi) in r.iter_mut().zip(supply.iter().chain(demand)) {
            *ri -= bi;
        }
        r
    }

    fn at_y(&self, y: &[f64]) -> Vec<f64> {
        let (m, k) = (self.m, self.k);
        (0..m * k)
            .map(|t| {
                let (i, j) = (t / k, t % k);
                y[i] + if j + 1 < k { y[m + j] } else { 0.0 }
            })
            .collect()
    }

    fn normal_matrix(&self, d: &[f64]) -> DMatrix<f64> {
        let (m, k) = (self.m, self.k);
        let nr = m + k - 1;
        let mut out = DMatrix::zeros(nr, nr);
        for i in 0..m {
            for j in 0..k {
                let v = d[i * k + j];
                out[(i, i)] += v;
                if j + 1 < k {
                    out[(m + j, m + j)] += v;
                    out[(i, m + j)] += v;
                    out[(m + j, i)] += v;
                }
            }
        }
        out
    }

    /// Solves `A dx = -r_b, A'dy + ds = -r_c, S dx + X ds = -r_xs`.
    fn newton(
        &self,
        factor: &Factor,
        x: &[f64],
        s: &[f64],
        r_b: &[f64],
        r_c: &[f64],
        r_xs: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = x.len();
        // w = S^{-1}(r_xs - X r_c)
        let w: Vec<f64> = (0..n).map(|t| (r_xs[t] - x[t] * r_c[t]) / s[t]).collect();
        let aw = self.ax(&w);
        let rhs = DVector::from_iterator(r_b.len(), (0..r_b.len()).map(|i| -r_b[i] + aw[i]));
        let dy: Vec<f64> = factor.solve(&rhs).iter().copied().collect();
        let aty = self.at_y(&dy);
        let ds: Vec<f64> = (0..n).map(|t| -r_c[t] - aty[t]).collect();
        let dx: Vec<f64> = (0..n).map(|t| (-r_xs[t] - x[t] * ds[t]) / s[t]).collect();
        (dx, dy, ds)
    }
}

enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn new(mat: DMatrix<f64>) -> Self {
        match mat.clone().cholesky() {
            Some(ch) => Factor::Cholesky(ch),
            None => Factor::Lu(mat.lu()),
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Factor::Cholesky(ch) => ch.solve(rhs),
            Factor::Lu(lu) => lu.solve(rhs).unwrap_or_else(|| DVector::zeros(rhs.len())),
        }
    }
}
