//! Episodic N-way K-shot evaluation over embedding sets.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::extract::{extract_with, ExtractionConfig};
use crate::metric::{similarity, similarity_with_grad, EmbeddingSet, EmdConfig, MetricError, SourceTag};
use crate::tensor_io::LabeledSetCollection;

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("need {needed} classes with at least {per_class} sets each, only {available} qualify")]
    InsufficientData {
        needed: usize,
        per_class: usize,
        available: usize,
    },
    #[error("expected a 1-shot episode, got {0}-shot")]
    NotOneShot(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("optimization diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Labelled embedding sets, extracted once from a tensor collection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedCollection {
    pub sets: Vec<(usize, EmbeddingSet)>,
    pub class_count: usize,
}

impl EmbeddedCollection {
    /// Extracts every map; set `i` uses extraction seed `cfg.rng_seed + i`.
    pub fn from_tensors(col: &LabeledSetCollection, cfg: &ExtractionConfig) -> Result<Self, MetricError> {
        let sets = col
            .sets
            .par_iter()
            .enumerate()
            .map(|(i, (label, t))| {
                let mut c = cfg.clone();
                c.rng_seed = cfg.rng_seed.wrapping_add(i as u64);
                Ok((*label, extract_with(t, &c)?))
            })
            .collect::<Result<Vec<_>, MetricError>>()?;
        Ok(Self {
            sets,
            class_count: col.class_count,
        })
    }

    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, (label, _)) in self.sets.iter().enumerate() {
            out[*label].push(i);
        }
        out
    }

    pub fn map_sets(&self, f: impl Fn(&EmbeddingSet) -> EmbeddingSet + Sync) -> Self {
        Self {
            sets: self.sets.par_iter().map(|(l, s)| (*l, f(s))).collect(),
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Original collection label of each episode class.
    pub classes: Vec<usize>,
    /// Class-major: entry `c * k_shot + s` is shot `s` of episode class `c`.
    pub support: Vec<(usize, EmbeddingSet)>,
    pub query: Vec<(usize, EmbeddingSet)>,
}

impl Episode {
    pub fn support_of(&self, class: usize) -> &[(usize, EmbeddingSet)] {
        &self.support[class * self.k_shot..(class + 1) * self.k_shot]
    }
}

/// Independent seed for work item `id` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng.next_u64()
}

pub fn sample_episode(
    col: &EmbeddedCollection,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    seed: u64,
) -> Result<Episode, FewShotError> {
    if n_way == 0 || k_shot == 0 {
        return Err(FewShotError::InvalidConfig("n_way and k_shot must be positive".into()));
    }
    let per_class = k_shot + q_per_class;
    let groups = col.by_class();
    let eligible: Vec<usize> = (0..groups.len()).filter(|&c| groups[c].len() >= per_class).collect();
    if eligible.len() < n_way {
        return Err(FewShotError::InsufficientData {
            needed: n_way,
            per_class,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_per_class);
    for (label, &class) in classes.iter().enumerate() {
        let members = &groups[class];
        let picks = rand::seq::index::sample(&mut rng, members.len(), per_class).into_vec();
        for (t, &p) in picks.iter().enumerate() {
            let set = col.sets[members[p]].1.clone();
            if t < k_shot {
                support.push((label, set));
            } else {
                query.push((label, set));
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        q_per_class,
        classes,
        support,
        query,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

impl Classification {
    fn from_scores(scores: &[Vec<f64>], labels: impl Iterator<Item = usize>) -> Self {
        let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let correct = predictions.iter().zip(labels).filter(|(p, l)| **p == *l).count();
        let accuracy = if predictions.is_empty() {
            0.0
        } else {
            correct as f64 / predictions.len() as f64
        };
        Self { predictions, accuracy }
    }
}

/// Index of the largest score; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `scores[q][t] = similarity(query_q, targets_t)`.
fn score_matrix(
    queries: &[(usize, EmbeddingSet)],
    targets: &[&EmbeddingSet],
    cfg: &EmdConfig,
) -> Result<Vec<Vec<f64>>, MetricError> {
    queries
        .par_iter()
        .map(|(_, q)| targets.iter().map(|t| similarity(q, t, cfg)).collect())
        .collect()
}

pub fn classify_1shot(ep: &Episode, cfg: &EmdConfig) -> Result<Classification, FewShotError> {
    if ep.k_shot != 1 {
        return Err(FewShotError::NotOneShot(ep.k_shot));
    }
    let targets: Vec<&EmbeddingSet> = ep.support.iter().map(|(_, s)| s).collect();
    let scores = score_matrix(&ep.query, &targets, cfg)?;
    Ok(Classification::from_scores(&scores, ep.query.iter().map(|(l, _)| *l)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KShotMethod {
    Sfc,
    Nn,
    Fusion,
    Merge,
    Prototype,
}

impl KShotMethod {
    pub const ALL: [KShotMethod; 5] = [
        KShotMethod::Sfc,
        KShotMethod::Nn,
        KShotMethod::Fusion,
        KShotMethod::Merge,
        KShotMethod::Prototype,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KShotMethod::Sfc => "sfc",
            KShotMethod::Nn => "nn",
            KShotMethod::Fusion => "fusion",
            KShotMethod::Merge => "merge",
            KShotMethod::Prototype => "prototype",
        }
    }
}

impl std::str::FromStr for KShotMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected sfc, nn, fusion, merge or prototype)"))
    }
}

pub fn classify_kshot(
    ep: &Episode,
    method: KShotMethod,
    emd: &EmdConfig,
    sfc: &SfcConfig,
) -> Result<Classification, FewShotError> {
    let labels = ep.query.iter().map(|(l, _)| *l);
    let (n, k) = (ep.n_way, ep.k_shot);
    let scores = match method {
        KShotMethod::Nn | KShotMethod::Fusion => {
            let targets: Vec<&EmbeddingSet> = ep.support.iter().map(|(_, s)| s).collect();
            let raw = score_matrix(&ep.query, &targets, emd)?;
            raw.into_iter()
                .map(|row| {
                    (0..n)
                        .map(|c| {
                            let shots = &row[c * k..(c + 1) * k];
                            if method == KShotMethod::Nn {
                                shots.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                shots.iter().sum()
                            }
                        })
                        .collect()
                })
                .collect()
        }
        KShotMethod::Merge => {
            let merged = (0..n)
                .map(|c| EmbeddingSet::concat(ep.support_of(c).iter().map(|(_, s)| s)))
                .collect::<Result<Vec<_>, _>>()?;
            score_matrix(&ep.query, &merged.iter().collect::<Vec<_>>(), emd)?
        }
        KShotMethod::Prototype => {
            let means: Vec<_> = (0..n)
                .map(|c| EmbeddingSet::concat(ep.support_of(c).iter().map(|(_, s)| s)).map(|m| m.mean()))
                .collect::<Result<_, _>>()?;
            ep.query
                .iter()
                .map(|(_, q)| {
                    let qm = q.mean();
                    means.iter().map(|m| cosine(qm.as_slice(), m.as_slice())).collect()
                })
                .collect()
        }
        KShotMethod::Sfc => {
            let protos = fit_sfc(ep, sfc, emd)?;
            score_matrix(&ep.query, &protos.sets().iter().collect::<Vec<_>>(), emd)?
        }
    };
    Ok(Classification::from_scores(&scores, labels))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// How SFC prototypes are initialized from the support set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfcInit {
    /// Node-wise mean over the k shots; P equals the support node count.
    NodeMean,
    /// All support nodes of the class stacked; P = k * nodes.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfcConfig {
    pub init: SfcInit,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SfcConfig {
    fn default() -> Self {
        Self {
            init: SfcInit::NodeMean,
            learning_rate: 0.1,
            batch_size: 5,
            iterations: 100,
            temperature: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfcPrototypes {
    /// One `P x C` node matrix per episode class.
    pub per_class: Vec<DMatrix<f64>>,
    pub p: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Mini-batch loss before each update.
    pub loss_curve: Vec<f64>,
}

impl SfcPrototypes {
    pub fn sets(&self) -> Vec<EmbeddingSet> {
        self.per_class
            .iter()
            .map(|m| EmbeddingSet::new(m.clone(), SourceTag::Raw).expect("prototypes are non-empty"))
            .collect()
    }
}

fn init_prototypes(ep: &Episode, init: SfcInit) -> Result<Vec<DMatrix<f64>>, FewShotError> {
    (0..ep.n_way)
        .map(|c| {
            let shots = ep.support_of(c);
            match init {
                SfcInit::Concat => Ok(EmbeddingSet::concat(shots.iter().map(|(_, s)| s))?.vectors),
                SfcInit::NodeMean => {
                    let first = &shots[0].1.vectors;
                    if shots.iter().any(|(_, s)| s.vectors.shape() != first.shape()) {
                        return Err(FewShotError::InvalidConfig(
                            "node-mean initialization needs equally sized support sets".into(),
                        ));
                    }
                    if shots.len() == 1 {
                        return Ok(first.clone());
                    }
                    let sum = shots.iter().skip(1).fold(first.clone(), |acc, (_, s)| acc + &s.vectors);
                    Ok(sum / shots.len() as f64)
                }
            }
        })
        .collect()
}

/// Cross-entropy of `softmax(sims / tau)` against `target`, and its
/// derivative with respect to each similarity.
fn cross_entropy(sims: &[f64], target: usize, tau: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    let lse = top + z.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(c, l)| ((l - lse).exp() - if c == target { 1.0 } else { 0.0 }) / tau)
        .collect();
    (lse - logits[target], grad)
}

/// Mean cross-entropy of the prototypes over the whole support set.
pub fn support_loss(
    protos: &SfcPrototypes,
    ep: &Episode,
    temperature: f64,
    emd: &EmdConfig,
) -> Result<f64, FewShotError> {
    let sets = protos.sets();
    let scores = score_matrix(&ep.support, &sets.iter().collect::<Vec<_>>(), emd)?;
    let total: f64 = scores
        .iter()
        .zip(&ep.support)
        .map(|(s, (l, _))| cross_entropy(s, *l, temperature).0)
        .sum();
    Ok(total / ep.support.len() as f64)
}

/// Fine-tunes per-class prototypes on the support set with plain SGD on the
/// temperature-scaled cross-entropy; mini-batches are drawn with replacement.
pub fn fit_sfc(ep: &Episode, cfg: &SfcConfig, emd: &EmdConfig) -> Result<SfcPrototypes, FewShotError> {
    if ep.k_shot == 0 || ep.support.is_empty() {
        return Err(FewShotError::InvalidConfig("SFC needs a non-empty support set".into()));
    }
    if !(cfg.temperature > 0.0) || cfg.batch_size == 0 || !cfg.learning_rate.is_finite() {
        return Err(FewShotError::InvalidConfig(
            "temperature and batch size must be positive, learning rate finite".into(),
        ));
    }
    let mut protos = init_prototypes(ep, cfg.init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_curve = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let sets: Vec<EmbeddingSet> = protos
            .iter()
            .map(|m| EmbeddingSet::new(m.clone(), SourceTag::Raw))
            .collect::<Result<_, _>>()?;
        let mut grads: Vec<DMatrix<f64>> = protos.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (label, x) = &ep.support[rng.random_range(0..ep.support.len())];
            let sgs = sets
                .iter()
                .map(|p| similarity_with_grad(x, p, emd))
                .collect::<Result<Vec<_>, _>>()?;
            let sims: Vec<f64> = sgs.iter().map(|g| g.similarity).collect();
            let (l, dsim) = cross_entropy(&sims, *label, cfg.temperature);
            loss += l;
            for ((g, sg), d) in grads.iter_mut().zip(&sgs).zip(&dsim) {
                *g += &sg.grad_b * *d;
            }
        }
        let scale = cfg.learning_rate / cfg.batch_size as f64;
        for (p, g) in protos.iter_mut().zip(&grads) {
            *p -= g * scale;
        }
        let loss = loss / cfg.batch_size as f64;
        if !loss.is_finite() || protos.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(FewShotError::Divergence { iteration });
        }
        loss_curve.push(loss);
    }
    Ok(SfcPrototypes {
        p: protos[0].nrows(),
        per_class: protos,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        iterations: cfg.iterations,
        loss_curve,
    })
}

/// Linear map applied to every node vector before matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    /// `C_in x C_out`.
    pub weight: DMatrix<f64>,
    pub temperature: f64,
    /// Episode loss before each update.
    pub loss_curve: Vec<f64>,
}

impl ProjectionModel {
    /// Identity-like weight (ones on the leading diagonal).
    pub fn identity(c_in: usize, c_out: usize, temperature: f64) -> Self {
        Self {
            weight: DMatrix::from_fn(c_in, c_out, |i, j| if i == j { 1.0 } else { 0.0 }),
            temperature,
            loss_curve: Vec::new(),
        }
    }

    pub fn project(&self, set: &EmbeddingSet) -> EmbeddingSet {
        EmbeddingSet {
            vectors: &set.vectors * &self.weight,
            weights: set.weights.clone(),
            source: set.source,
        }
    }

    /// Mean query cross-entropy of a 1-shot episode and its gradient with
    /// respect to the weight.
    pub fn episode_loss(&self, ep: &Episode, emd: &EmdConfig) -> Result<(f64, DMatrix<f64>), FewShotError> {
        if ep.k_shot != 1 {
            return Err(FewShotError::NotOneShot(ep.k_shot));
        }
        let support: Vec<EmbeddingSet> = ep.support.iter().map(|(_, s)| self.project(s)).collect();
        let parts = ep
            .query
            .par_iter()
            .map(|(label, q)| {
                let pq = self.project(q);
                let sgs = support
                    .iter()
                    .map(|s| similarity_with_grad(&pq, s, emd))
                    .collect::<Result<Vec<_>, _>>()?;
                let sims: Vec<f64> = sgs.iter().map(|g| g.similarity).collect();
                let (l, dsim) = cross_entropy(&sims, *label, self.temperature);
                let mut g = DMatrix::zeros(self.weight.nrows(), self.weight.ncols());
                for ((sg, d), (_, s)) in sgs.iter().zip(&dsim).zip(&ep.support) {
                    g += (q.vectors.transpose() * &sg.grad_a + s.vectors.transpose() * &sg.grad_b) * *d;
                }
                Ok((l, g))
            })
            .collect::<Result<Vec<_>, MetricError>>()?;
        let nq = parts.len().max(1) as f64;
        let mut grad = DMatrix::zeros(self.weight.nrows(), self.weight.ncols());
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grad += g;
        }
        Ok((loss / nq, grad / nq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
    pub n_way: usize,
    pub q_per_class: usize,
    /// Output channels; `None` keeps the input width.
    pub out_channels: Option<usize>,
    /// Std of the Gaussian perturbation added to the identity at init.
    pub init_noise: f64,
    pub emd: EmdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            episodes_per_epoch: 20,
            learning_rate: 0.01,
            temperature: 0.1,
            seed: 0,
            n_way: 5,
            q_per_class: 5,
            out_channels: None,
            init_noise: 0.1,
            emd: EmdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn initial_model(&self, c_in: usize) -> ProjectionModel {
        let c_out = self.out_channels.unwrap_or(c_in);
        let mut model = ProjectionModel::identity(c_in, c_out, self.temperature);
        if self.init_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let noise = Normal::new(0.0, self.init_noise).expect("finite std");
            model.weight.iter_mut().for_each(|w| *w += noise.sample(&mut rng));
        }
        model
    }
}

/// SGD on the 1-shot episode loss, one update per sampled episode.
pub fn train_projection(col: &EmbeddedCollection, cfg: &TrainConfig) -> Result<ProjectionModel, FewShotError> {
    if !(cfg.temperature > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(FewShotError::InvalidConfig("temperature must be positive, learning rate finite".into()));
    }
    let c_in = col.sets.first().map(|(_, s)| s.channels()).ok_or_else(|| {
        FewShotError::InvalidConfig("empty training collection".into())
    })?;
    let mut model = cfg.initial_model(c_in);
    let total = cfg.epochs * cfg.episodes_per_epoch;
    for iteration in 0..total {
        let ep = sample_episode(col, cfg.n_way, 1, cfg.q_per_class, derive_seed(cfg.seed, iteration as u64))?;
        let (loss, grad) = model.episode_loss(&ep, &cfg.emd)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(FewShotError::Divergence { iteration });
        }
        if cfg.learning_rate != 0.0 {
            model.weight -= grad * cfg.learning_rate;
        }
        model.loss_curve.push(loss);
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub accuracy: f64,
}

/// Evaluates `episodes` independent episodes in parallel. Episode `i` is
/// sampled with `derive_seed(seed, i)` and SFC fitting uses
/// `derive_seed(sfc.seed, i)`, so results do not depend on scheduling.
pub fn run_episodes(
    col: &EmbeddedCollection,
    spec: EpisodeSpec,
    episodes: usize,
    method: KShotMethod,
    emd: &EmdConfig,
    sfc: &SfcConfig,
    seed: u64,
) -> Result<Vec<EpisodeResult>, FewShotError> {
    (0..episodes)
        .into_par_iter()
        .map(|id| {
            let ep = sample_episode(col, spec.n_way, spec.k_shot, spec.q_per_class, derive_seed(seed, id as u64))?;
            let sfc = SfcConfig {
                seed: derive_seed(sfc.seed, id as u64),
                ..*sfc
            };
            let accuracy = classify_kshot(&ep, method, emd, &sfc)?.accuracy;
            Ok(EpisodeResult { episode_id: id, accuracy })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracySummary {
    pub mean: f64,
    /// Half-width `1.96 * std / sqrt(E)`.
    pub ci95: f64,
    pub episode_count: usize,
}

pub fn summarize(accuracies: &[f64]) -> AccuracySummary {
    let e = accuracies.len();
    if e == 0 {
        return AccuracySummary {
            mean: 0.0,
            ci95: 0.0,
            episode_count: 0,
        };
    }
    let mean = accuracies.iter().sum::<f64>() / e as f64;
    let var = if e > 1 {
        accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64
    } else {
        0.0
    };
    AccuracySummary {
        mean,
        ci95: 1.96 * var.sqrt() / (e as f64).sqrt(),
        episode_count: e,
    }
}
