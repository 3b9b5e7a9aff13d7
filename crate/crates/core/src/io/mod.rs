//! Files on disk: checkpoints, run configuration, reports.

pub mod config;
pub mod report;
pub mod weights;

pub use config::{AdaptSettings, BenchSettings, DatasetConfig, Protocol, RunConfig, DATA_ROOT_ENV};
pub use report::{bench_table, write_records, Stat, Summary, SummaryRow};
pub use weights::{load_model, save_model, CheckpointMeta, TensorEntry, TensorRole, WeightFile, WeightHeader};
