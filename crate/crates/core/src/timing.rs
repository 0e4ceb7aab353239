//! Wall-clock comparison of the LP solvers on EMD-sized problems.
//!
//! Cost matrices are computed before timing starts, so only the solve is
//! measured. Configurations are interleaved within every repeat so slow drift
//! on the machine affects all of them alike.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::metric::{cost_matrix, EmbeddingSet, EmdConfig, MetricError, SourceTag};
use crate::transport::{self, SolverKind, TransportProblem};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Spatial side lengths; a side `s` gives `s * s` nodes per set.
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub solvers: Vec<SolverKind>,
    pub repeats: usize,
    /// Problems solved per timed sample.
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![5],
            dims: vec![256, 2048],
            solvers: vec![SolverKind::Simplex, SolverKind::InteriorPoint],
            repeats: 7,
            batch: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub side: usize,
    pub nodes: usize,
    pub dim: usize,
    pub solver: SolverKind,
    pub repeats: usize,
    /// Median seconds per solve.
    pub median_secs: f64,
}

fn random_set(rng: &mut ChaCha8Rng, nodes: usize, dim: usize) -> EmbeddingSet {
    let v = nalgebra::DMatrix::from_fn(nodes, dim, |_, _| StandardNormal.sample(rng));
    EmbeddingSet::new(v, SourceTag::Raw).expect("non-empty")
}

fn problems(side: usize, dim: usize, count: usize, seed: u64) -> Result<Vec<TransportProblem>, MetricError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((side as u64) << 32) ^ dim as u64);
    let emd = EmdConfig::default();
    (0..count)
        .map(|_| {
            let a = random_set(&mut rng, side * side, dim);
            let b = random_set(&mut rng, side * side, dim);
            let (wa, wb) = emd.weigh(&a, &b)?;
            Ok(TransportProblem::new(cost_matrix(&a, &b)?, wa, wb)?)
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row per (size, dim, solver), in that nesting order.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<TimingRow>, MetricError> {
    if cfg.repeats == 0 || cfg.batch == 0 {
        return Err(MetricError::Extraction("repeats and batch must be positive".into()));
    }
    let mut configs = Vec::new();
    for &side in &cfg.sizes {
        for &dim in &cfg.dims {
            if side == 0 || dim == 0 {
                return Err(MetricError::EmptySet);
            }
            let probs = problems(side, dim, cfg.batch, cfg.seed)?;
            for &solver in &cfg.solvers {
                configs.push((side, dim, solver, probs.clone()));
            }
        }
    }
    // warm-up pass, untimed
    for (_, _, solver, probs) in &configs {
        transport::solve(&probs[0], *solver, transport::DEFAULT_TOL)?;
    }
    let mut samples = vec![Vec::with_capacity(cfg.repeats); configs.len()];
    for _ in 0..cfg.repeats {
        for (slot, (_, _, solver, probs)) in samples.iter_mut().zip(&configs) {
            let start = Instant::now();
            for p in probs {
                std::hint::black_box(transport::solve(p, *solver, transport::DEFAULT_TOL)?);
            }
            slot.push(start.elapsed().as_secs_f64() / probs.len() as f64);
        }
    }
    Ok(configs
        .into_iter()
        .zip(samples)
        .map(|((side, dim, solver, _), s)| TimingRow {
            side,
            nodes: side * side,
            dim,
            solver,
            repeats: cfg.repeats,
            median_secs: median(s),
        })
        .collect())
}
