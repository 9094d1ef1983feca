//! Taxonomy completion with triplet matching networks.
//!
//! A new concept is placed by scoring it against ⟨parent, child⟩ candidate
//! positions drawn from an existing taxonomy. The crate holds the taxonomy
//! graph, data loading and splitting, a small reverse-mode autodiff engine,
//! the scoring models, the self-supervised trainer and the ranking metrics.

pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod rng;
pub mod scheduler;
pub mod selfcheck;
pub mod tape;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

pub use checkpoint::{Checkpoint, RngState};
pub use dataset::{
    load_dataset, make_split, synth_taxonomy, DataError, Dataset, DatasetSplit, QuerySet,
    SynthConfig,
};
pub use embedding::EmbeddingTable;
pub use eval::{evaluate, EvalError, EvalMode, EvalOptions, MetricsReport};
pub use model::{BaselineKind, Model, ModelError, ModelSpec, TmnConfig};
pub use params::ParamStore;
pub use taxonomy::{
    CandidatePosition, ConceptId, Endpoint, GraphError, PositionClass, PseudoSentinel, Taxonomy,
};
pub use tensor::Tensor;
pub use trainer::{train, TrainError, TrainHyper};

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
