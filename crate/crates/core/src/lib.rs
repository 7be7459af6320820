//! Knowledge-cache-driven personalized federated learning at desk scale.
//!
//! Clients keep heterogeneous local models and never ship parameters. During
//! a one-shot initialization every private training sample is encoded into a
//! low-dimensional unit-norm hash and uploaded; the server builds, per label
//! class, an approximate nearest-neighbor graph over those hashes and freezes
//! a relation table. During training, clients upload per-sample logits, the
//! server fetches the stored logits of each sample's related neighbors,
//! averages them into an ensemble teacher, and sends the teacher back for
//! local distillation. Everything is deterministic under fixed seeds and all
//! traffic is metered by an exact byte-accounting ledger.
//!
//! Module map:
//! - [`numeric`]: dense f64 kernel (softmax, cross-entropy, KL, SGD, finite
//!   differences).
//! - [`models`]: per-client MLP predictors with analytic backprop.
//! - [`encoder`]: deterministic hash encoder plus hash-file ingestion.
//! - [`ann`]: label-partitioned HNSW retrieval with an exact-scan oracle and
//!   instrumented distance counters.
//! - [`cache`]: the server-side knowledge cache (labels, hashes, knowledge,
//!   relations) with fetch-before-update semantics.
//! - [`data`]: synthetic data, IDX ingestion, Dirichlet partitioning and
//!   train/test splits.
//! - [`federation`]: protocol rounds (cache-driven, class-logit baseline,
//!   standalone), schedules, and the communication ledger.
//! - [`metrics`]: accuracy/communication reporting.

pub mod ann;
pub mod cache;
pub mod data;
pub mod encoder;
mod error;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod seeds;

pub use error::{Error, Result};
