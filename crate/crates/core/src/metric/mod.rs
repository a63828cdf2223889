//! Pairwise similarity, hard-pair mining, the multi-similarity and InfoNCE
//! objectives, balanced batch sampling and the training loop.

mod loss;
mod mining;
mod sampler;
mod similarity;
mod train;

pub use loss::{infonce_loss, infonce_loss_grad, ms_loss, ms_loss_grad, LossConfig, LossKind};
pub use mining::{mine_pairs, MinedPairs};
pub use sampler::sample_batch;
pub use similarity::{cosine_similarity, similarity_matrix, SimilarityMatrix};
pub use train::{
    batch_objective, train, write_loss_trace, Adam, BatchObjective, LossRecord, TrainOutcome, TrainingSet,
};

use thiserror::Error;

use crate::dataset::ClassLabel;
use crate::embedder::EmbedError;
use crate::preprocess::PreprocessError;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate batch: anchor {anchor} has no {missing} candidate")]
    DegenerateBatch { anchor: usize, missing: &'static str },
    #[error("class {0} has no training records")]
    EmptyClass(ClassLabel),
    #[error("need {required} classes with training data, found {available}")]
    NotEnoughClasses { required: usize, available: usize },
    #[error("non-finite loss at iteration {iteration}: {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
