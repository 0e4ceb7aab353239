//! Backward pass through the transportation LP.
//!
//! Two routes are provided. The envelope route differentiates the optimal
//! value only: `d obj / d c = flows` and `d obj / d (s, d) = (u, v)`. The full
//! route differentiates the optimal flows themselves by solving the linearised
//! KKT system
//!
//! ```text
//! g(x, lambda, nu) = [ c - lambda + A'nu ; -lambda o x ; Ax - b ] = 0
//! ```
//!
//! with `nu = -(u, v)`. The last demand row of `A` is implied by the others, so
//! its equation is replaced by the gauge `nu_last = 0`, keeping the system
//! square (`2n + m + k`) and invertible at strictly complementary optima.
//! Weight directions must therefore be balanced (`sum ds = sum dd`).

use nalgebra::{DMatrix, DVector, Dyn, LU};
use thiserror::Error;

use crate::transport::{is_degenerate, TransportProblem, TransportSolution};

/// Condition-number ceiling for the KKT matrix.
pub const MAX_CONDITION: f64 = 1e12;
/// Minimum of `x_ij + lambda_ij` required before differentiating flows.
pub const MIN_COMPLEMENTARY_PAIR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("singular KKT system (min x+lambda {min_pair:e}, condition estimate {condition:e})")]
    SingularKkt { min_pair: f64, condition: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weight direction is unbalanced: sum ds = {supply}, sum dd = {demand}")]
    UnbalancedDirection { supply: f64, demand: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Envelope,
    Full,
}

impl std::str::FromStr for GradMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "envelope" => Ok(GradMode::Envelope),
            "full" => Ok(GradMode::Full),
            other => Err(format!("unknown gradient mode {other:?}")),
        }
    }
}

/// Gradient of a scalar loss with respect to the LP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmdGradients {
    pub d_cost: DMatrix<f64>,
    pub d_supply: DVector<f64>,
    pub d_demand: DVector<f64>,
}

impl EmdGradients {
    pub fn is_finite(&self) -> bool {
        self.d_cost
            .iter()
            .chain(self.d_supply.iter())
            .chain(self.d_demand.iter())
            .all(|v| v.is_finite())
    }

    /// Directional derivative along `(dc, ds, dd)`.
    pub fn dot(&self, dc: &DMatrix<f64>, ds: &DVector<f64>, dd: &DVector<f64>) -> f64 {
        self.d_cost.dot(dc) + self.d_supply.dot(ds) + self.d_demand.dot(dd)
    }
}

/// Envelope gradient of the optimal value.
pub fn grad_objective(sol: &TransportSolution, p: &TransportProblem) -> EmdGradients {
    let m = p.rows();
    EmdGradients {
        d_cost: sol.flows.clone(),
        d_supply: DVector::from_column_slice(&sol.duals_eq.as_slice()[..m]),
        d_demand: DVector::from_column_slice(&sol.duals_eq.as_slice()[m..]),
    }
}

/// Linearised KKT system at an optimum.
pub struct KktSystem {
    m: usize,
    k: usize,
    /// `J_z g` with `z = (x, lambda, nu)`.
    pub jac_x: DMatrix<f64>,
    /// `J_theta g` with `theta = (vec c, s, d)`.
    pub jac_theta: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    lu_t: LU<f64, Dyn, Dyn>,
    condition: f64,
}

impl KktSystem {
    /// Assembles and factors the KKT matrix. Fails with
    /// [`DiffError::SingularKkt`] when the optimum is degenerate.
    pub fn assemble(sol: &TransportSolution, p: &TransportProblem) -> Result<Self, DiffError> {
        let (m, k) = p.cost().shape();
        if sol.flows.shape() != (m, k) || sol.duals_eq.len() != m + k {
            return Err(DiffError::DimensionMismatch(format!(
                "solution is {:?} for a {m}x{k} problem",
                sol.flows.shape()
            )));
        }
        let n = m * k;
        let size = 2 * n + m + k;
        let x = &sol.flows;
        let lambda = &sol.duals_ineq;

        let min_pair = x
            .iter()
            .zip(lambda.iter())
            .map(|(a, b)| a + b)
            .fold(f64::INFINITY, f64::min);
        if min_pair <= MIN_COMPLEMENTARY_PAIR || is_degenerate(x, lambda, p.total_mass()) {
            return Err(DiffError::SingularKkt {
                min_pair,
                condition: f64::INFINITY,
            });
        }

        // Evaluate at the complementary projection of the iterate: interior
        // point solutions carry O(mu) residue on the inactive side of each pair.
        let x = x.zip_map(lambda, |a, b| if a > b { a } else { 0.0 });
        let lambda = sol.flows.zip_map(lambda, |a, b| if a > b { 0.0 } else { b });

        let mut jac = DMatrix::zeros(size, size);
        let (lam0, nu0) = (n, 2 * n);
        for i in 0..m {
            for j in 0..k {
                let t = i * k + j;
                // stationarity: c - lambda + A'nu
                jac[(t, lam0 + t)] = -1.0;
                jac[(t, nu0 + i)] = 1.0;
                jac[(t, nu0 + m + j)] = 1.0;
                // complementarity: -lambda o x
                jac[(n + t, t)] = -lambda[(i, j)];
                jac[(n + t, lam0 + t)] = -x[(i, j)];
                // equalities, last demand row replaced by the gauge
                jac[(nu0 + i, t)] = 1.0;
                if j + 1 < k {
                    jac[(nu0 + m + j, t)] = 1.0;
                }
            }
        }
        jac[(size - 1, size - 1)] = 1.0;

        let mut jac_theta = DMatrix::zeros(size, n + m + k);
        for t in 0..n {
            jac_theta[(t, t)] = 1.0;
        }
        for r in 0..m + k - 1 {
            jac_theta[(nu0 + r, n + r)] = -1.0;
        }

        let lu = jac.clone().lu();
        let lu_t = jac.transpose().lu();
        let condition = if lu.is_invertible() {
            one_norm(&jac) * inverse_one_norm_estimate(&lu, &lu_t, size)
        } else {
            f64::INFINITY
        };
        if !(condition < MAX_CONDITION) {
            return Err(DiffError::SingularKkt { min_pair, condition });
        }
        Ok(Self {
            m,
            k,
            jac_x: jac,
            jac_theta,
            lu,
            lu_t,
            condition,
        })
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    fn n(&self) -> usize {
        self.m * self.k
    }

    fn pack_direction(
        &self,
        dc: &DMatrix<f64>,
        ds: &DVector<f64>,
        dd: &DVector<f64>,
    ) -> Result<DVector<f64>, DiffError> {
        let (m, k, n) = (self.m, self.k, self.n());
        if dc.shape() != (m, k) || ds.len() != m || dd.len() != k {
            return Err(DiffError::DimensionMismatch("direction shape".into()));
        }
        let (ss, sd) = (ds.sum(), dd.sum());
        let scale = 1.0 + ds.amax().max(dd.amax());
        if (ss - sd).abs() > 1e-9 * scale {
            return Err(DiffError::UnbalancedDirection {
                supply: ss,
                demand: sd,
            });
        }
        let mut v = DVector::zeros(n + m + k);
        for i in 0..m {
            for j in 0..k {
                v[i * k + j] = dc[(i, j)];
            }
        }
        for (t, val) in ds.iter().chain(dd.iter()).enumerate() {
            v[n + t] = *val;
        }
        Ok(v)
    }

    /// Full solution of `J_z g dz = -J_theta g v`.
    pub fn solve_direction(
        &self,
        dc: &DMatrix<f64>,
        ds: &DVector<f64>,
        dd: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), DiffError> {
        let v = self.pack_direction(dc, ds, dd)?;
        let rhs = -(&self.jac_theta * &v);
        let dz = self.lu.solve(&rhs).expect("factor checked invertible");
        Ok((dz, v))
    }

    /// `|| J_z g dz + J_theta g v ||_2`.
    pub fn residual(&self, dz: &DVector<f64>, v: &DVector<f64>) -> f64 {
        (&self.jac_x * dz + &self.jac_theta * v).norm()
    }
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager's estimate of `|| A^{-1} ||_1` from factorizations of `A` and `A'`.
fn inverse_one_norm_estimate(lu: &LU<f64, Dyn, Dyn>, lu_t: &LU<f64, Dyn, Dyn>, size: usize) -> f64 {
    let mut x = DVector::from_element(size, 1.0 / size as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let y = match lu.solve(&x) {
            Some(y) => y,
            None => return f64::INFINITY,
        };
        estimate = y.iter().map(|v| v.abs()).sum::<f64>();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = match lu_t.solve(&xi) {
            Some(z) => z,
            None => return f64::INFINITY,
        };
        let (jmax, zmax) = z
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.abs()))
            .fold((0, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(size);
        x[jmax] = 1.0;
    }
    estimate
}

/// Flow Jacobian `J_theta x = -(J_z g)^{-1} J_theta g` restricted to the
/// primal block.
pub struct FlowJacobian {
    kkt: KktSystem,
}

impl FlowJacobian {
    /// `dflows = J (dc, ds, dd)`.
    pub fn apply(
        &self,
        dc: &DMatrix<f64>,
        ds: &DVector<f64>,
        dd: &DVector<f64>,
    ) -> Result<DMatrix<f64>, DiffError> {
        let (dz, _) = self.kkt.solve_direction(dc, ds, dd)?;
        let (m, k) = (self.kkt.m, self.kkt.k);
        Ok(DMatrix::from_fn(m, k, |i, j| dz[i * k + j]))
    }

    /// Pulls a flow gradient `d loss / d flows` back to the LP parameters.
    /// Weight gradients are defined up to adding a common constant to every
    /// supply and demand entry (only balanced directions are meaningful).
    pub fn pull_back(&self, grad_flows: &DMatrix<f64>) -> Result<EmdGradients, DiffError> {
        let (m, k, n) = (self.kkt.m, self.kkt.k, self.kkt.n());
        if grad_flows.shape() != (m, k) {
            return Err(DiffError::DimensionMismatch("flow gradient shape".into()));
        }
        let size = 2 * n + m + k;
        let mut rhs = DVector::zeros(size);
        for i in 0..m {
            for j in 0..k {
                rhs[i * k + j] = grad_flows[(i, j)];
            }
        }
        let w = self.kkt.lu_t.solve(&rhs).expect("factor checked invertible");
        let theta = -(self.kkt.jac_theta.transpose() * w);
        Ok(EmdGradients {
            d_cost: DMatrix::from_fn(m, k, |i, j| theta[i * k + j]),
            d_supply: DVector::from_fn(m, |i, _| theta[n + i]),
            d_demand: DVector::from_fn(k, |j, _| theta[n + m + j]),
        })
    }

    pub fn kkt(&self) -> &KktSystem {
        &self.kkt
    }
}

pub fn jacobian_flows(sol: &TransportSolution, p: &TransportProblem) -> Result<FlowJacobian, DiffError> {
    Ok(FlowJacobian {
        kkt: KktSystem::assemble(sol, p)?,
    })
}

/// Gradient of `upstream * similarity` where `similarity = sum (1 - c) o flows`.
///
/// Envelope mode attributes the total flow to the supplies, giving
/// `d_supply = 1 - u` and `d_demand = -v`.
pub fn backward_similarity(
    upstream: f64,
    sol: &TransportSolution,
    p: &TransportProblem,
    mode: GradMode,
) -> Result<EmdGradients, DiffError> {
    let m = p.rows();
    match mode {
        GradMode::Envelope => Ok(EmdGradients {
            d_cost: &sol.flows * -upstream,
            d_supply: DVector::from_fn(m, |i, _| upstream * (1.0 - sol.duals_eq[i])),
            d_demand: DVector::from_fn(p.cols(), |j, _| -upstream * sol.duals_eq[m + j]),
        }),
        GradMode::Full => {
            let jac = jacobian_flows(sol, p)?;
            let g_flows = p.cost().map(|c| 1.0 - c);
            let implicit = jac.pull_back(&g_flows)?;
            Ok(EmdGradients {
                d_cost: (implicit.d_cost - &sol.flows) * upstream,
                d_supply: implicit.d_supply * upstream,
                d_demand: implicit.d_demand * upstream,
            })
        }
    }
}
