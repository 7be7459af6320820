//! Independent reference implementations used only by tests: a
//! double-double softmax/cross-entropy/KL evaluator, a sequential replay
//! model for cache linearizability, and a naive re-implementation of the
//! cache-driven training round over explicit maps and exact retrieval.
//!
//! Nothing here shares logic with the production paths it checks; only
//! domain types and the exact-scan retrieval oracle cross the boundary.

pub mod dd;
pub mod naive;
pub mod precise;
pub mod replay;

pub use naive::{naive_round_oracle, NaiveOutcome, TinyScenario};
pub use replay::{replay_check, ReplayDivergence};
