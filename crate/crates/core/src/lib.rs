//! Batch-adaptive off-policy policy optimization on synthetic verifiable
//! sequence tasks with an exactly computable tabular policy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod buffer;
pub mod env;
pub mod error;
pub mod group;
pub mod metrics;
pub mod objective;
pub mod policy;
pub mod theory;
pub mod trainer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use batch::{
    adapt_thresholds, filter_fresh, mini_test_mode, BatchConfig, BatchConstructor, BatchGroup,
    Composition, FilterMode, Subset, Thresholds, TrainingBatch,
};
pub use buffer::{BufferEntry, BufferKind, FifoBuffer};
pub use env::{generate_universe, DifficultyBucket, PromptSpec, PromptUniverse, UniverseConfig};
pub use error::{Error, Result};
pub use group::{accuracy_bin, compute_group_stats, GroupStats, ResponseGroup};
pub use objective::{objective, surrogate_gradient, ObjectiveConfig, ObjectiveTerms, RatioMode};
pub use policy::{exact_kl, exact_tv, PolicyParams, PromptId, ResponseSeq};
pub use metrics::{bin_histogram, unlocked_fraction, MigrationMatrix};
pub use theory::{
    improvement_bound_check, k_constants, verify_theory, BoundInstance, BoundReport, KConstants,
    TheoryConfig, TheoryReport,
};
pub use trainer::{
    ledger_report, run, Algorithm, EvalSnapshot, KlTarget, LedgerReport, MetricsRecord,
    RolloutLedger, RunOutput, TrainerConfig,
};
