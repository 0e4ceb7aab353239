//! Earth Mover's Distance between embedding sets.
//!
//! Ground cost is `1 - cos(u_i, v_j)`. Node weights come either from the
//! cross-reference rule (clamped dot product of each node with the mean node
//! of the other set, normalized to total 1) or are uniform.

use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

use crate::diff::DiffError;
use crate::tensor_io::TensorIoError;
use crate::transport::{self, LpError, SolverKind, TransportProblem, TransportSolution};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("embedding set must have at least one node and one channel")]
    EmptySet,
    #[error("invalid extraction: {0}")]
    Extraction(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceTag {
    Fcn,
    Grid,
    Sampling,
    Pyramid,
    Raw,
}

/// `M` nodes of dimension `C` (one per row) plus per-node weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub source: SourceTag,
}

impl EmbeddingSet {
    /// Unit weights on every node.
    pub fn new(vectors: DMatrix<f64>, source: SourceTag) -> Result<Self, MetricError> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(MetricError::EmptySet);
        }
        let weights = DVector::from_element(vectors.nrows(), 1.0);
        Ok(Self {
            vectors,
            weights,
            source,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricError> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(MetricError::Extraction("ragged node rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]), SourceTag::Raw)
    }

    pub fn with_weights(mut self, weights: DVector<f64>) -> Self {
        assert_eq!(weights.len(), self.len());
        self.weights = weights;
        self
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn mean(&self) -> RowDVector<f64> {
        self.vectors.row_mean()
    }

    /// Nodes of all sets stacked in order, unit weights.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a EmbeddingSet>) -> Result<Self, MetricError> {
        let sets: Vec<&EmbeddingSet> = sets.into_iter().collect();
        let first = sets.first().ok_or(MetricError::EmptySet)?;
        let c = first.channels();
        if let Some(bad) = sets.iter().find(|s| s.channels() != c) {
            return Err(MetricError::ChannelMismatch(c, bad.channels()));
        }
        let rows: usize = sets.iter().map(|s| s.len()).sum();
        let mut vectors = DMatrix::zeros(rows, c);
        let mut at = 0;
        for s in &sets {
            vectors.rows_mut(at, s.len()).copy_from(&s.vectors);
            at += s.len();
        }
        Self::new(vectors, first.source)
    }
}

fn check_channels(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(), MetricError> {
    if a.channels() != b.channels() {
        return Err(MetricError::ChannelMismatch(a.channels(), b.channels()));
    }
    Ok(())
}

fn row_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.norm()).collect()
}

/// `c_ij = 1 - cos(u_i, v_j)`; pairs involving a zero vector cost 1.
pub fn cost_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<DMatrix<f64>, MetricError> {
    check_channels(a, b)?;
    let (na, nb) = (row_norms(&a.vectors), row_norms(&b.vectors));
    let dots = &a.vectors * b.vectors.transpose();
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let denom = na[i] * nb[j];
        if denom > 0.0 {
            (1.0 - dots[(i, j)] / denom).clamp(0.0, 2.0)
        } else {
            1.0
        }
    }))
}

/// Raw relevance `max(u_i . mean(other), 0)` normalized to total 1, falling
/// back to uniform when every node is clamped to zero.
fn relevance(nodes: &DMatrix<f64>, other_mean: &RowDVector<f64>) -> DVector<f64> {
    let z = nodes * other_mean.transpose();
    let raw = z.map(|v| v.max(0.0));
    let total = raw.sum();
    if total > 0.0 {
        raw / total
    } else {
        DVector::from_element(nodes.nrows(), 1.0 / nodes.nrows() as f64)
    }
}

pub fn cross_reference_weights(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
) -> Result<(DVector<f64>, DVector<f64>), MetricError> {
    check_channels(a, b)?;
    let wa = relevance(&a.vectors, &b.mean());
    let wb = relevance(&b.vectors, &a.mean());
    Ok((wa, wb))
}

pub fn uniform_weights(set: &EmbeddingSet) -> DVector<f64> {
    DVector::from_element(set.len(), 1.0 / set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    CrossReference,
    Uniform,
}

impl std::str::FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross" | "cross-reference" => Ok(WeightScheme::CrossReference),
            "uniform" | "equal" => Ok(WeightScheme::Uniform),
            other => Err(format!("unknown weight scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmdConfig {
    pub weights: WeightScheme,
    pub solver: SolverKind,
    pub tol: f64,
}

impl Default for EmdConfig {
    fn default() -> Self {
        Self {
            weights: WeightScheme::CrossReference,
            solver: SolverKind::Simplex,
            tol: transport::DEFAULT_TOL,
        }
    }
}

impl EmdConfig {
    pub fn weigh(&self, a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(DVector<f64>, DVector<f64>), MetricError> {
        match self.weights {
            WeightScheme::CrossReference => cross_reference_weights(a, b),
            WeightScheme::Uniform => {
                check_channels(a, b)?;
                Ok((uniform_weights(a), uniform_weights(b)))
            }
        }
    }
}

/// `sum (1 - c_ij) x_ij` using the weights stored on `a` and `b`.
pub fn emd_similarity(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    solver: SolverKind,
) -> Result<(f64, TransportSolution), MetricError> {
    let cost = cost_matrix(a, b)?;
    let p = TransportProblem::new(cost, a.weights.clone(), b.weights.clone())?;
    let sol = transport::solve(&p, solver, transport::DEFAULT_TOL)?;
    Ok((similarity_of(&p, &sol), sol))
}

fn similarity_of(p: &TransportProblem, sol: &TransportSolution) -> f64 {
    p.cost()
        .iter()
        .zip(sol.flows.iter())
        .map(|(c, x)| (1.0 - c) * x)
        .sum()
}

/// Everything produced by matching two sets.
#[derive(Debug, Clone)]
pub struct Matching {
    pub similarity: f64,
    pub problem: TransportProblem,
    pub solution: TransportSolution,
}

impl Matching {
    pub fn weights_a(&self) -> &DVector<f64> {
        self.problem.supply()
    }

    pub fn weights_b(&self) -> &DVector<f64> {
        self.problem.demand()
    }

    /// `argmax_j flows[i][j]` per row, ties to the lowest `j`.
    pub fn best_match(&self) -> Vec<usize> {
        self.solution
            .flows
            .row_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Weighs both sets per `cfg` and solves the matching.
pub fn match_sets(a: &EmbeddingSet, b: &EmbeddingSet, cfg: &EmdConfig) -> Result<Matching, MetricError> {
    let (wa, wb) = cfg.weigh(a, b)?;
    let cost = cost_matrix(a, b)?;
    let problem = TransportProblem::new(cost, wa, wb)?;
    let solution = transport::solve(&problem, cfg.solver, cfg.tol)?;
    Ok(Matching {
        similarity: similarity_of(&problem, &solution),
        problem,
        solution,
    })
}

pub fn similarity(a: &EmbeddingSet, b: &EmbeddingSet, cfg: &EmdConfig) -> Result<f64, MetricError> {
    Ok(match_sets(a, b, cfg)?.similarity)
}

/// Similarity and its gradient with respect to every node vector of both
/// sets. The LP is differentiated in envelope mode; cosine costs, clamped
/// relevance scores and the weight normalization are differentiated exactly.
#[derive(Debug, Clone)]
pub struct SimilarityGrad {
    pub similarity: f64,
    pub grad_a: DMatrix<f64>,
    pub grad_b: DMatrix<f64>,
}

pub fn similarity_with_grad(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    cfg: &EmdConfig,
) -> Result<SimilarityGrad, MetricError> {
    check_channels(a, b)?;
    let (ma, mb) = (a.len(), b.len());
    let mean_a = a.mean();
    let mean_b = b.mean();
    let matching = match_sets(a, b, cfg)?;
    let sol = &matching.solution;

    let mut grad_a = DMatrix::zeros(ma, a.channels());
    let mut grad_b = DMatrix::zeros(mb, b.channels());

    // cost path: d sim / d cos_ij = x_ij
    let (na, nb) = (row_norms(&a.vectors), row_norms(&b.vectors));
    for i in 0..ma {
        for j in 0..mb {
            let x = sol.flows[(i, j)];
            let denom = na[i] * nb[j];
            if x == 0.0 || denom == 0.0 {
                continue;
            }
            let u = a.vectors.row(i);
            let v = b.vectors.row(j);
            let cos = u.dot(&v) / denom;
            let du = (v / denom - u * (cos / (na[i] * na[i]))) * x;
            let dv = (u / denom - v * (cos / (nb[j] * nb[j]))) * x;
            let mut ra = grad_a.row_mut(i);
            ra += du;
            let mut rb = grad_b.row_mut(j);
            rb += dv;
        }
    }

    if cfg.weights == WeightScheme::CrossReference {
        let m = ma;
        let g_wa = DVector::from_fn(ma, |i, _| 1.0 - sol.duals_eq[i]);
        let g_wb = DVector::from_fn(mb, |j, _| -sol.duals_eq[m + j]);
        weight_backward(&a.vectors, &b.vectors, &mean_b, &g_wa, &mut grad_a, &mut grad_b);
        weight_backward(&b.vectors, &a.vectors, &mean_a, &g_wb, &mut grad_b, &mut grad_a);
    }

    Ok(SimilarityGrad {
        similarity: matching.similarity,
        grad_a,
        grad_b,
    })
}

/// Back-propagates a gradient on the normalized relevance weights of `nodes`
/// (computed against the mean of `other`) into both node matrices.
fn weight_backward(
    nodes: &DMatrix<f64>,
    other: &DMatrix<f64>,
    other_mean: &RowDVector<f64>,
    g_weights: &DVector<f64>,
    grad_nodes: &mut DMatrix<f64>,
    grad_other: &mut DMatrix<f64>,
) {
    let z = nodes * other_mean.transpose();
    let raw = z.map(|v| v.max(0.0));
    let total = raw.sum();
    if total <= 0.0 {
        // uniform fallback is locally constant
        return;
    }
    let normalized = &raw / total;
    let centred = g_weights.dot(&normalized);
    let g_z = DVector::from_fn(nodes.nrows(), |i, _| {
        if z[i] > 0.0 {
            (g_weights[i] - centred) / total
        } else {
            0.0
        }
    });
    // z_i = u_i . mean(other)
    for i in 0..nodes.nrows() {
        if g_z[i] != 0.0 {
            let mut row = grad_nodes.row_mut(i);
            row += other_mean * g_z[i];
        }
    }
    let pulled = nodes.transpose() * &g_z / other.nrows() as f64;
    for mut row in grad_other.row_iter_mut() {
        row += pulled.transpose();
    }
}
