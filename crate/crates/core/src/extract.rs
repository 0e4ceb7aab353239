//! Local embedding extraction from `H x W x C` feature maps.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metric::{EmbeddingSet, MetricError, SourceTag};
use crate::tensor_io::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Every spatial position is a node.
    Fcn,
    /// Mean over each cell of a `rows x cols` grid, cells enlarged by
    /// `context_enlarge` around their centre.
    Grid,
    /// Mean over seeded random rectangles.
    Sampling,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fcn" => Ok(Strategy::Fcn),
            "grid" => Ok(Strategy::Grid),
            "sampling" => Ok(Strategy::Sampling),
            other => Err(format!("unknown extraction strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub strategy: Strategy,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_count: usize,
    /// Patch area as a fraction of the map area.
    pub patch_scale_range: (f64, f64),
    /// Height/width ratio range, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    pub context_enlarge: f64,
    /// Appended pyramid levels; empty for none.
    pub pyramid_levels: Vec<usize>,
    pub rng_seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fcn,
            grid_rows: 3,
            grid_cols: 3,
            patch_count: 9,
            patch_scale_range: (0.2, 0.8),
            aspect_range: (0.5, 2.0),
            context_enlarge: 2.0,
            pyramid_levels: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl ExtractionConfig {
    fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: &str| Err(MetricError::Extraction(m.into()));
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_count == 0 {
            return bad("grid sizes and patch count must be positive");
        }
        let (lo, hi) = self.patch_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("patch_scale_range must satisfy 0 < min <= max <= 1");
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return bad("aspect_range must satisfy 0 < min <= max");
        }
        if !(self.context_enlarge >= 1.0) {
            return bad("context_enlarge must be >= 1");
        }
        Ok(())
    }
}

/// Borrowed view of a feature map.
struct FeatureMap<'a> {
    h: usize,
    w: usize,
    c: usize,
    data: &'a [f64],
}

impl<'a> FeatureMap<'a> {
    fn new(t: &'a DenseTensor) -> Result<Self, MetricError> {
        let (h, w, c) = t.as_feature_map()?;
        if h * w == 0 || c == 0 {
            return Err(MetricError::EmptySet);
        }
        Ok(Self {
            h,
            w,
            c,
            data: t.data(),
        })
    }

    /// Mean vector over rows `[y0, y1)` and columns `[x0, x1)`.
    fn region_mean(&self, (y0, y1): (usize, usize), (x0, x1): (usize, usize), out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let base = (y * self.w + x) * self.c;
                for (o, v) in out.iter_mut().zip(&self.data[base..base + self.c]) {
                    *o += v;
                }
            }
        }
        let count = ((y1 - y0) * (x1 - x0)) as f64;
        out.iter_mut().for_each(|v| *v /= count);
    }
}

/// Bounds of bin `i` of `bins` over `len` cells (adaptive pooling), enlarged
/// by `factor` around the bin centre and clamped.
fn bin_bounds(i: usize, bins: usize, len: usize, factor: f64) -> (usize, usize) {
    let lo = (i * len) / bins;
    let hi = ((i + 1) * len).div_ceil(bins);
    if factor == 1.0 {
        return (lo, hi);
    }
    let centre = (lo + hi) as f64 / 2.0;
    let half = (hi - lo) as f64 * factor / 2.0;
    let lo = (centre - half).floor().max(0.0) as usize;
    let hi = ((centre + half).ceil() as usize).min(len);
    (lo, hi)
}

fn pooled_grid(map: &FeatureMap, rows: usize, cols: usize, factor: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows * cols, map.c);
    let mut buf = vec![0.0; map.c];
    for r in 0..rows {
        for q in 0..cols {
            map.region_mean(bin_bounds(r, rows, map.h, factor), bin_bounds(q, cols, map.w, factor), &mut buf);
            out.row_mut(r * cols + q).copy_from_slice(&buf);
        }
    }
    out
}

pub fn extract(feature_map: &DenseTensor, cfg: &ExtractionConfig) -> Result<EmbeddingSet, MetricError> {
    cfg.validate()?;
    let map = FeatureMap::new(feature_map)?;
    let (vectors, tag) = match cfg.strategy {
        Strategy::Fcn => (
            DMatrix::from_row_slice(map.h * map.w, map.c, map.data),
            SourceTag::Fcn,
        ),
        Strategy::Grid => {
            if cfg.grid_rows > map.h || cfg.grid_cols > map.w {
                return Err(MetricError::Extraction(format!(
                    "grid {}x{} larger than feature map {}x{}",
                    cfg.grid_rows, cfg.grid_cols, map.h, map.w
                )));
            }
            (
                pooled_grid(&map, cfg.grid_rows, cfg.grid_cols, cfg.context_enlarge),
                SourceTag::Grid,
            )
        }
        Strategy::Sampling => (sample_patches(&map, cfg), SourceTag::Sampling),
    };
    EmbeddingSet::new(vectors, tag)
}

fn sample_patches(map: &FeatureMap, cfg: &ExtractionConfig) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let area = (map.h * map.w) as f64;
    let (alo, ahi) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
    let mut out = DMatrix::zeros(cfg.patch_count, map.c);
    let mut buf = vec![0.0; map.c];
    for p in 0..cfg.patch_count {
        let frac = if cfg.patch_scale_range.0 < cfg.patch_scale_range.1 {
            rng.random_range(cfg.patch_scale_range.0..cfg.patch_scale_range.1)
        } else {
            cfg.patch_scale_range.0
        };
        let aspect = if alo < ahi { rng.random_range(alo..ahi).exp() } else { alo.exp() };
        let ph = ((frac * area * aspect).sqrt().round() as usize).clamp(1, map.h);
        let pw = ((frac * area / aspect).sqrt().round() as usize).clamp(1, map.w);
        let y0 = rng.random_range(0..=map.h - ph);
        let x0 = rng.random_range(0..=map.w - pw);
        map.region_mean((y0, y0 + ph), (x0, x0 + pw), &mut buf);
        out.row_mut(p).copy_from_slice(&buf);
    }
    out
}

/// Multi-scale pooling: level `L` contributes an `L x L` grid of nodes.
///
/// With a grid base strategy each level is a context-enlarged grid
/// extraction; otherwise it is plain adaptive average pooling.
pub fn extract_pyramid(
    feature_map: &DenseTensor,
    levels: &[usize],
    base: &ExtractionConfig,
) -> Result<EmbeddingSet, MetricError> {
    base.validate()?;
    let map = FeatureMap::new(feature_map)?;
    if levels.is_empty() {
        return Err(MetricError::Extraction("pyramid needs at least one level".into()));
    }
    let factor = if base.strategy == Strategy::Grid {
        base.context_enlarge
    } else {
        1.0
    };
    let total: usize = levels.iter().map(|l| l * l).sum();
    let mut vectors = DMatrix::zeros(total, map.c);
    let mut at = 0;
    for &level in levels {
        if level == 0 || level > map.h.min(map.w) {
            return Err(MetricError::Extraction(format!(
                "pyramid level {level} exceeds feature map {}x{}",
                map.h, map.w
            )));
        }
        let block = pooled_grid(&map, level, level, factor);
        vectors.rows_mut(at, block.nrows()).copy_from(&block);
        at += block.nrows();
    }
    EmbeddingSet::new(vectors, SourceTag::Pyramid)
}

/// Runs the configured strategy, or the pyramid when levels are set.
pub fn extract_with(feature_map: &DenseTensor, cfg: &ExtractionConfig) -> Result<EmbeddingSet, MetricError> {
    if cfg.pyramid_levels.is_empty() {
        extract(feature_map, cfg)
    } else {
        extract_pyramid(feature_map, &cfg.pyramid_levels, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{similarity, EmdConfig};

    fn ramp(h: usize, w: usize, c: usize) -> DenseTensor {
        let data = (0..h * w * c).map(|v| (v as f64 * 0.37).sin() + 0.1 * v as f64).collect();
        DenseTensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn fcn_is_row_major_nodes() {
        let t = ramp(5, 5, 8);
        let set = extract(&t, &ExtractionConfig::default()).unwrap();
        assert_eq!(set.len(), 25);
        for (idx, row) in set.vectors.row_iter().enumerate() {
            assert_eq!(row.iter().copied().collect::<Vec<_>>(), t.data()[idx * 8..idx * 8 + 8].to_vec());
        }
        assert!(set.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn single_cell_map_gives_that_vector() {
        let t = DenseTensor::new(vec![1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        for strategy in [Strategy::Fcn, Strategy::Grid, Strategy::Sampling] {
            let cfg = ExtractionConfig {
                strategy,
                grid_rows: 1,
                grid_cols: 1,
                patch_count: 1,
                ..Default::default()
            };
            let set = extract(&t, &cfg).unwrap();
            assert_eq!(set.len(), 1);
            assert_eq!(set.vectors.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn grid_cell_is_block_mean() {
        let t = ramp(4, 4, 2);
        let cfg = ExtractionConfig {
            strategy: Strategy::Grid,
            grid_rows: 2,
            grid_cols: 2,
            context_enlarge: 1.0,
            ..Default::default()
        };
        let set = extract(&t, &cfg).unwrap();
        assert_eq!(set.len(), 4);
        for ch in 0..2 {
            let mut acc = 0.0;
            for y in 0..2 {
                for x in 0..2 {
                    acc += t.data()[(y * 4 + x) * 2 + ch];
                }
            }
            assert!((set.vectors[(0, ch)] - acc / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn context_enlargement_clamps() {
        assert_eq!(bin_bounds(0, 2, 4, 2.0), (0, 3));
        assert_eq!(bin_bounds(1, 2, 4, 2.0), (1, 4));
        assert_eq!(bin_bounds(1, 3, 6, 2.0), (1, 5));
    }

    #[test]
    fn grid_larger_than_map_rejected() {
        let cfg = ExtractionConfig {
            strategy: Strategy::Grid,
            grid_rows: 6,
            ..Default::default()
        };
        assert!(matches!(extract(&ramp(5, 5, 2), &cfg), Err(MetricError::Extraction(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let t = ramp(6, 7, 3);
        let cfg = ExtractionConfig {
            strategy: Strategy::Sampling,
            patch_count: 12,
            rng_seed: 42,
            ..Default::default()
        };
        let a = extract(&t, &cfg).unwrap();
        let b = extract(&t, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        let c = extract(&t, &ExtractionConfig { rng_seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pyramid_sizes() {
        let t = ramp(5, 5, 4);
        let set = extract_pyramid(&t, &[5, 2, 1], &ExtractionConfig::default()).unwrap();
        assert_eq!(set.len(), 30);
        let global = extract_pyramid(&t, &[1], &ExtractionConfig::default()).unwrap();
        assert_eq!(global.len(), 1);
        let mean: Vec<f64> = (0..4)
            .map(|ch| (0..25).map(|p| t.data()[p * 4 + ch]).sum::<f64>() / 25.0)
            .collect();
        for ch in 0..4 {
            assert!((global.vectors[(0, ch)] - mean[ch]).abs() < 1e-12);
        }
        let identity = extract_pyramid(&t, &[5], &ExtractionConfig::default()).unwrap();
        assert_eq!(identity.vectors, extract(&t, &ExtractionConfig::default()).unwrap().vectors);
        assert!(extract_pyramid(&t, &[6], &ExtractionConfig::default()).is_err());
    }

    #[test]
    fn global_pooling_collapses_to_cosine() {
        let a = ramp(3, 4, 5);
        let mut b = ramp(3, 4, 5);
        b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (*v * 1.3 + i as f64).cos());
        let pa = extract_pyramid(&a, &[1], &ExtractionConfig::default()).unwrap();
        let pb = extract_pyramid(&b, &[1], &ExtractionConfig::default()).unwrap();
        let (ua, ub) = (pa.vectors.row(0), pb.vectors.row(0));
        let cos = ua.dot(&ub) / (ua.norm() * ub.norm());
        let sim = similarity(&pa, &pb, &EmdConfig::default()).unwrap();
        assert!((sim - cos).abs() <= 1e-10);
    }
}
