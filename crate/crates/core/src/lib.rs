//! Next-item recommendation where every catalog item is a single vocabulary
//! token, scored through a two-level (cluster, then member) softmax.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the latency model
//! is additionally exact over `Ratio<i64>`. Concrete aliases are below.

pub mod catalog;
pub mod clustering;
pub mod error;
pub mod eval;
pub mod inference;
pub mod kv;
pub mod latency;
pub mod scalar;
pub mod softmax;
pub mod synth;
pub mod table;
pub mod token;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Real};
pub use softmax::SoftmaxMode;
pub use token::{TokenId, TokenSpace};

pub type TableF32 = table::EmbeddingTable<f32>;
pub type TableF64 = table::EmbeddingTable<f64>;
pub type OutputTablesF32 = softmax::OutputTables<f32>;
pub type OutputTablesF64 = softmax::OutputTables<f64>;
pub type SnapshotF32 = catalog::Snapshot<f32>;
pub type SnapshotF64 = catalog::Snapshot<f64>;
pub type RecommenderF32 = eval::Recommender<f32>;
pub type RecommenderF64 = eval::Recommender<f64>;
pub type ProfileF64 = latency::DeploymentProfile<f64>;
pub type ProfileExact = latency::DeploymentProfile<num_rational::Ratio<i64>>;
pub type EncodingSpecF64 = latency::EncodingSpec<f64>;
pub type EncodingSpecExact = latency::EncodingSpec<num_rational::Ratio<i64>>;
