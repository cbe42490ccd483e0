//! Deterministic cluster simulation: workloads, the event loop and metrics.

mod engine;
pub mod metrics;
mod perf;
pub mod trace;

pub use engine::{run, ClusterConfig, EventKind, SimError, SimEvent, SimOutput};
pub use metrics::{write_metrics, MetricsFormat, MetricsRecord, RequestMetrics, Summary, Window};
pub use perf::PerfModel;
pub use trace::{
    gen_long_tail, gen_synthetic, load_trace, parse_trace, LongTailConfig, SyntheticConfig,
    TraceError,
};
