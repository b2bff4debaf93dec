//! Set-based inference over heterogeneous tables.
//!
//! A row is an unordered set of `(feature, value)` atoms. Features are
//! grounded by their natural-language metadata, so tables with different
//! schemas share one representation space. The model predicts any
//! unobserved feature from any observed subset, optionally conditioned on a
//! handful of complete example rows ("shots") and a dataset description.
//!
//! Module map:
//!
//! * [`text`]: deterministic hashed text embeddings and an HTTP client for
//!   external embedding services.
//! * [`schema`]: feature metadata, dataset files, mask and shot samplers.
//! * [`synth`]: synthetic dataset families with closed-form ground truth.
//! * [`semantic`], [`encoder`], [`model`]: feature embedding, atom and
//!   instance encoders, and the aggregate network with its prediction heads.
//! * [`dist`]: predictive distributions, likelihoods and sampling.
//! * [`trainer`]: the few-shot masked training loop and checkpoints.
//! * [`afa`]: greedy cost-aware feature acquisition.
//! * [`eval`]: metrics and evaluation protocols.

pub mod afa;
pub mod dist;
pub mod encoder;
mod error;
pub mod eval;
pub mod model;
pub mod schema;
pub mod semantic;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::Error;
pub use model::{Model, ModelConfig};
pub use schema::{Atom, DatasetBundle, FeatureSpec, FeatureType, Instance, Schema, Value};

pub type Result<T, E = Error> = std::result::Result<T, E>;
