//! Desk-scale policy-gradient laboratory.
//!
//! A log-linear autoregressive softmax policy over tiny vocabularies, the
//! verifiable toy tasks it is trained on, and every advantage, divergence and
//! loss construction needed to compare CPGD against the PPO-clip family.
//! The [`oracle`] module holds brute-force checks (finite differences, exact
//! enumeration) used by the test suites and the `verify` scenario.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod divergence;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use advantage::Weighting;
pub use error::{LabError, Result};
pub use losses::{Algorithm, LossConfig, LossReport, RolloutGroup};
pub use matrix::Matrix;
pub use policy::{
    snapshot, Context, FeatureSpec, PolicyParams, PolicySnapshot, SnapshotTag, TokenId, Vocabulary,
};
pub use tasks::{RewardBreakdown, Task, TaskConfig, TaskKind};
pub use trainer::{train, CollapseFlags, MetricsRecord, RunRecord, TrainConfig, Trainer};
