//! Training, indexing and benchmarking harness for `quickadc`.
//!
//! Reported recall is Recall@R': the fraction of queries whose exact nearest
//! neighbor is among the first R' results. Phase times are milliseconds per
//! query, measured with a monotonic clock on a single thread.

pub mod config;
pub mod recall;
pub mod report;
pub mod run;
pub mod synth;

pub use config::{BenchConfig, ScanMethod};
pub use recall::recall_at;
pub use report::{render_table, BenchReport, PhaseMs, Stat};
pub use run::{evaluate, run_bench, run_bench_on, sweep_configs, BenchData, Model};
