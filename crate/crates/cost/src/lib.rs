//! Cost accounting for gated sparse attention: analytical FLOPs and cache
//! sizes per decoded token, wall-clock micro-benchmarks, and CSV/markdown
//! reports.

pub mod bench;
pub mod flops;
pub mod report;

pub use bench::{bench_operator, BenchStats};
pub use flops::{flops_per_token, Dims, FlopsBreakdown};
pub use report::{emit_csv, emit_markdown, CostReport, CostRow};
