//! Sequence-length scaling and parameter-size measurements for the
//! attention and SummaryMixing global branches.

pub mod alloc;
mod error;
pub mod report;
pub mod scaling;
pub mod size;

pub use error::{Error, Result};
pub use report::{emit_report, Format, Report};
pub use scaling::{bench_scaling, bench_scaling_with, fit_loglog_slope, BenchScope, ScalingConfig, ScalingPoint, ScalingReport};
pub use size::{bench_size, published_reduction_pct, size_pairs, SizeReport, SizeRow};
