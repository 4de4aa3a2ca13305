//! Synthetic multi-task benchmark for merging experiments: task generators,
//! corruptions, expert training, merge protocols and diagnostics.

pub mod analysis;
pub mod corrupt;
pub mod data;
pub mod error;
pub mod protocol;
pub mod report;
pub mod train;

pub use corrupt::{apply_corruption, Corruption, CorruptionKind, SeverityTable};
pub use data::{generate_task_dataset, Sample, SyntheticTaskSpec, TaskDataset, TaskFamily};
pub use error::{BenchError, Result};
pub use train::{evaluate_accuracy, finetune, pretrain, Expert, TrainConfig};
pub use protocol::{prepare_suite, run_merge_benchmark, BenchConfig, BenchOutcome, Method, Protocol, ReportTable, Suite, ROUTER_SEED_SALT};
