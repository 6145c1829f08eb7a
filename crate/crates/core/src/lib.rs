#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::manual_is_multiple_of)]

pub mod bpmf;
pub mod bundle;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod heads;
pub mod interview;
pub mod numerics;
pub mod qnet;
pub mod synthetic;
pub mod trainer;

pub use bpmf::{train_bpmf, train_bpmf_for_split, BpmfConfig, FactorSet};
pub use bundle::{CatalogEntry, Head, ModelBundle, ModelKind, PolicyKind};
pub use dataset::{load_movielens, make_split, EvaluationSplit, MovieInfo, RatingsDataset};
pub use error::{Error, Result};
pub use eval::{evaluate, genre_diversity, sample_interviews, Averaging, EvalReport};
pub use interview::{ActionSpace, InterviewState};
pub use trainer::{train, TrainConfig, TrainOptions, TrainOutcome, TrainProgress};
