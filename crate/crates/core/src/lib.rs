//! Semi-supervised important-people detection on per-person feature vectors.
//!
//! The pipeline trains a permutation-equivariant relation scorer on a small
//! pool of labelled event images and a large pool of unlabelled ones. For
//! every unlabelled image the current model ranks all persons, the top-ranked
//! person becomes the "important" pseudo-label (ranking-based sampling), the
//! sampled persons are re-weighted by a softmax over their importance scores,
//! and the whole image is gated by an entropy-derived effectiveness weight so
//! that images without any important person contribute little.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root pin the common `f64` instantiation.
//!
//! ```
//! use ranksemi::{synthgen::SynthSpec, trainer::{train, TrainingConfig, Method}};
//!
//! let spec = SynthSpec { n_labelled: 20, n_unlabelled: 40, n_val: 10, n_test: 10, ..SynthSpec::default() };
//! let data = ranksemi::synthgen::generate::<f64>(&spec).unwrap();
//! let cfg = TrainingConfig { epochs: 2, method: Method::Ours, ..TrainingConfig::default() };
//! let (model, history) = train(&cfg, &data.labelled, &data.unlabelled, &data.val).unwrap();
//! assert_eq!(history.epochs.len(), 2);
//! let map = ranksemi::metrics::mean_ap(&model, &data.test).unwrap();
//! assert!(map > 0.0 && map <= 1.0);
//! ```

pub mod audit;
pub mod baselines;
pub mod config;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
mod sampling;
mod scalar;
pub mod synthgen;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use dataset::{Dataset, EventImage, PersonInstance};
pub use model::{OptimizerState, RelationModel};
pub use baselines::ScoreSource;
pub use trainer::{Method, TrainingConfig};

/// Double-precision dataset.
pub type Dataset64 = dataset::Dataset<f64>;
/// Single-precision dataset.
pub type Dataset32 = dataset::Dataset<f32>;
/// Double-precision relation scorer.
pub type Model64 = model::RelationModel<f64>;
/// Single-precision relation scorer.
pub type Model32 = model::RelationModel<f32>;
/// Double-precision optimizer state.
pub type Optimizer64 = model::OptimizerState<f64>;
/// Double-precision mean-teacher state.
pub type Teacher64 = baselines::TeacherState<f64>;
