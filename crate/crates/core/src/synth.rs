//! Seeded synthetic feature-map collections.
//!
//! Every set is an `H x W x C` map. A `1 - background_fraction` share of the
//! spatial cells is drawn from the class cluster `N(mu_class, I)`; the rest
//! come from a background distribution `background_scale * N(0, I)` shared by
//! all classes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor_io::{DenseTensor, LabeledSetCollection};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid synthetic spec: {0}")]
pub struct SynthError(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_count: usize,
    pub sets_per_class: usize,
    pub spatial: (usize, usize),
    pub channels: usize,
    /// Distance between class means, in units of the within-class std.
    pub cluster_sep: f64,
    pub background_fraction: f64,
    pub background_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class_count: 10,
            sets_per_class: 20,
            spatial: (3, 3),
            channels: 16,
            cluster_sep: 8.0,
            background_fraction: 0.0,
            background_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError(m.into()));
        if self.class_count == 0 || self.sets_per_class == 0 || self.channels == 0 {
            return bad("counts must be at least 1");
        }
        if self.spatial.0 == 0 || self.spatial.1 == 0 {
            return bad("spatial size must be at least 1x1");
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return bad("background_fraction must lie in [0, 1)");
        }
        if !(self.cluster_sep >= 0.0 && self.cluster_sep.is_finite()) {
            return bad("cluster_sep must be finite and non-negative");
        }
        if !(self.background_scale >= 0.0 && self.background_scale.is_finite()) {
            return bad("background_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Number of background cells per map.
    pub fn background_cells(&self) -> usize {
        let cells = self.spatial.0 * self.spatial.1;
        ((self.background_fraction * cells as f64).round() as usize).min(cells - 1)
    }

    /// Class means at pairwise distance `cluster_sep`: scaled basis vectors
    /// when there are enough channels, otherwise random directions on the
    /// sphere of the same radius (pairwise distance then only approximate).
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let radius = self.cluster_sep / std::f64::consts::SQRT_2;
        let c = self.channels;
        if self.class_count <= c {
            return (0..self.class_count)
                .map(|k| (0..c).map(|j| if j == k { radius } else { 0.0 }).collect())
                .collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d65_616e_73);
        (0..self.class_count)
            .map(|_| {
                let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|a| a * radius / n).collect()
            })
            .collect()
    }
}

/// Sets are emitted class by class, `sets_per_class` each.
pub fn generate(spec: &SynthSpec) -> Result<LabeledSetCollection, SynthError> {
    spec.validate()?;
    let (h, w) = spec.spatial;
    let c = spec.channels;
    let cells = h * w;
    let n_bg = spec.background_cells();
    let means = spec.class_means();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..cells).collect();

    let mut sets = Vec::with_capacity(spec.class_count * spec.sets_per_class);
    for (label, mu) in means.iter().enumerate() {
        for _ in 0..spec.sets_per_class {
            order.shuffle(&mut rng);
            let mut is_bg = vec![false; cells];
            for &cell in &order[..n_bg] {
                is_bg[cell] = true;
            }
            let mut data = Vec::with_capacity(cells * c);
            for bg in is_bg {
                for m in mu {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(if bg { spec.background_scale * z } else { m + z });
                }
            }
            let t = DenseTensor::new(vec![h, w, c], data).expect("shape matches data");
            sets.push((label, t));
        }
    }
    Ok(LabeledSetCollection::new(sets, spec.class_count).expect("labels and channels are consistent"))
}
