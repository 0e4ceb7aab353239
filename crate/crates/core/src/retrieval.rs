//! Gallery ranking by EMD similarity and the P@1 / RP / MAP@R metrics.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::metric::{similarity, EmbeddingSet, EmdConfig, MetricError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query {query} has no same-label item in the gallery")]
    NoRelevantItems { query: usize },
    #[error("similarity matrix is {rows}x{cols}, expected {queries}x{gallery}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        queries: usize,
        gallery: usize,
    },
    #[error("non-finite similarity at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query_labels: Vec<usize>,
    pub gallery_labels: Vec<usize>,
    /// `Q x G`.
    pub similarity: DMatrix<f64>,
    /// Gallery indices by descending similarity, ties by ascending index.
    /// With self-exclusion, index `q` is left out of row `q`.
    pub ranking: Vec<Vec<usize>>,
}

impl RetrievalRun {
    pub fn from_similarity(
        query_labels: Vec<usize>,
        gallery_labels: Vec<usize>,
        similarity: DMatrix<f64>,
        exclude_self: bool,
    ) -> Result<Self, RetrievalError> {
        let (q, g) = (query_labels.len(), gallery_labels.len());
        if similarity.shape() != (q, g) {
            return Err(RetrievalError::ShapeMismatch {
                rows: similarity.nrows(),
                cols: similarity.ncols(),
                queries: q,
                gallery: g,
            });
        }
        if let Some(idx) = similarity.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(idx % q, idx / q));
        }
        let ranking = (0..q)
            .map(|i| {
                let mut order: Vec<usize> = (0..g).filter(|&j| !(exclude_self && j == i)).collect();
                order.sort_by(|&a, &b| similarity[(i, b)].total_cmp(&similarity[(i, a)]).then(a.cmp(&b)));
                order
            })
            .collect();
        Ok(Self {
            query_labels,
            gallery_labels,
            similarity,
            ranking,
        })
    }
}

/// Scores every query against every gallery item. Pass `exclude_self` when
/// the queries are the gallery itself.
pub fn rank_gallery(
    queries: &[(usize, EmbeddingSet)],
    gallery: &[(usize, EmbeddingSet)],
    cfg: &EmdConfig,
    exclude_self: bool,
) -> Result<RetrievalRun, RetrievalError> {
    let rows = queries
        .par_iter()
        .enumerate()
        .map(|(i, (_, q))| {
            gallery
                .iter()
                .enumerate()
                .map(|(j, (_, g))| {
                    if exclude_self && i == j {
                        Ok(0.0)
                    } else {
                        similarity(q, g, cfg)
                    }
                })
                .collect::<Result<Vec<f64>, MetricError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sim = DMatrix::from_fn(queries.len(), gallery.len(), |i, j| rows[i][j]);
    RetrievalRun::from_similarity(
        queries.iter().map(|(l, _)| *l).collect(),
        gallery.iter().map(|(l, _)| *l).collect(),
        sim,
        exclude_self,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub p_at_1: f64,
    pub r_precision: f64,
    /// Average precision over the first `R` ranks, divided by `R`.
    pub map_at_r: f64,
    /// Untruncated average precision over every relevant item.
    pub map: f64,
}

/// Metrics of a single query.
pub fn query_metrics(run: &RetrievalRun, query: usize) -> Result<RetrievalMetrics, RetrievalError> {
    let label = run.query_labels[query];
    let hits: Vec<bool> = run.ranking[query]
        .iter()
        .map(|&j| run.gallery_labels[j] == label)
        .collect();
    let r = hits.iter().filter(|h| **h).count();
    if r == 0 {
        return Err(RetrievalError::NoRelevantItems { query });
    }
    let (mut found, mut ap, mut ap_r, mut found_r) = (0usize, 0.0, 0.0, 0usize);
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            found += 1;
            let prec = found as f64 / (i + 1) as f64;
            ap += prec;
            if i < r {
                ap_r += prec;
                found_r += 1;
            }
        }
    }
    Ok(RetrievalMetrics {
        p_at_1: if hits[0] { 1.0 } else { 0.0 },
        r_precision: found_r as f64 / r as f64,
        map_at_r: ap_r / r as f64,
        map: ap / r as f64,
    })
}

pub fn metrics(run: &RetrievalRun) -> Result<RetrievalMetrics, RetrievalError> {
    let per = (0..run.ranking.len())
        .map(|q| query_metrics(run, q))
        .collect::<Result<Vec<_>, _>>()?;
    let n = per.len().max(1) as f64;
    Ok(RetrievalMetrics {
        p_at_1: per.iter().map(|m| m.p_at_1).sum::<f64>() / n,
        r_precision: per.iter().map(|m| m.r_precision).sum::<f64>() / n,
        map_at_r: per.iter().map(|m| m.map_at_r).sum::<f64>() / n,
        map: per.iter().map(|m| m.map).sum::<f64>() / n,
    })
}
