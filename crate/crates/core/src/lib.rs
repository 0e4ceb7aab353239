//! Differentiable Earth Mover's Distance over sets of embeddings.
//!
//! The transportation LP is solved exactly (transportation simplex) or by a
//! primal-dual interior-point method, differentiated through its KKT system,
//! and used as a set-to-set similarity for few-shot classification and
//! retrieval.

pub mod diff;
pub mod extract;
pub mod fewshot;
pub mod metric;
pub mod retrieval;
pub mod synth;
pub mod tensor_io;
pub mod timing;
pub mod transport;

pub use diff::{backward_similarity, grad_objective, jacobian_flows, DiffError, EmdGradients, GradMode};
pub use extract::{extract, extract_pyramid, extract_with, ExtractionConfig, Strategy};
pub use fewshot::{
    classify_1shot, classify_kshot, fit_sfc, run_episodes, sample_episode, summarize, train_projection,
    AccuracySummary, EmbeddedCollection, Episode, EpisodeSpec, FewShotError, KShotMethod, ProjectionModel,
    SfcConfig, SfcInit, SfcPrototypes, TrainConfig,
};
pub use metric::{
    cost_matrix, cross_reference_weights, emd_similarity, match_sets, similarity, similarity_with_grad,
    EmbeddingSet, EmdConfig, Matching, MetricError, SourceTag, WeightScheme,
};
pub use retrieval::{metrics, rank_gallery, RetrievalError, RetrievalMetrics, RetrievalRun};
pub use synth::{generate, SynthError, SynthSpec};
pub use tensor_io::{DenseTensor, LabeledSetCollection, TensorIoError};
pub use transport::{solve, LpError, SolverKind, TransportProblem, TransportSolution};
