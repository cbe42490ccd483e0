use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const CSV_COLUMNS: [&str; 7] = [
    "request_id",
    "arrival_s",
    "placed_instance",
    "ttft_s",
    "tpot_s",
    "completed_s",
    "rejected",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub request_id: u64,
    pub arrival_s: f64,
    pub placed_instance: Option<usize>,
    pub ttft_s: Option<f64>,
    pub tpot_s: Option<f64>,
    pub completed_s: Option<f64>,
    pub rejected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_s: f64,
    pub end_s: f64,
    pub tokens: f64,
    pub throughput_tps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub throughput_tps_mean: f64,
    pub transformation_count: usize,
    pub stall_total_s: f64,
    pub peak_gpu_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub requests: Vec<RequestMetrics>,
    pub windows: Vec<Window>,
    pub summary: Summary,
    pub scale_ups: usize,
    pub scale_downs: usize,
    /// Decode tokens emitted, including partial progress at the horizon.
    pub decode_tokens: f64,
    pub prefill_tokens: f64,
    pub end_s: f64,
}

impl MetricsRecord {
    pub fn is_empty(&self) -> bool {
        self.requests.is_empty() && self.windows.is_empty()
    }

    pub fn completed(&self) -> impl Iterator<Item = &RequestMetrics> {
        self.requests.iter().filter(|r| r.completed_s.is_some())
    }

    pub fn rejected_count(&self) -> usize {
        self.requests.iter().filter(|r| r.rejected).count()
    }

    /// Mean throughput over windows starting at or after `from_s` that end
    /// before `to_s`.
    pub fn window_mean(&self, from_s: f64, to_s: f64) -> f64 {
        let ws: Vec<&Window> = self
            .windows
            .iter()
            .filter(|w| w.start_s >= from_s && w.end_s <= to_s)
            .collect();
        let span: f64 = ws.iter().map(|w| w.end_s - w.start_s).sum();
        if span == 0.0 {
            return 0.0;
        }
        ws.iter().map(|w| w.tokens).sum::<f64>() / span
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    JsonLines,
}

impl FromStr for MetricsFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "jsonl" | "json-lines" => Ok(MetricsFormat::JsonLines),
            other => Err(format!(
                "unsupported metrics format {other:?} (expected csv or jsonl)"
            )),
        }
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(record: &MetricsRecord) -> String {
    let mut s = CSV_COLUMNS.join(",");
    s.push('\n');
    if record.is_empty() {
        return s;
    }
    for r in &record.requests {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.request_id,
            r.arrival_s,
            opt(r.placed_instance),
            opt(r.ttft_s),
            opt(r.tpot_s),
            opt(r.completed_s),
            r.rejected
        );
    }
    let m = &record.summary;
    s.push_str("\n# summary\n");
    let _ = writeln!(s, "throughput_tps_mean,{}", m.throughput_tps_mean);
    let _ = writeln!(s, "transformation_count,{}", m.transformation_count);
    let _ = writeln!(s, "stall_total_s,{}", m.stall_total_s);
    let _ = writeln!(s, "peak_gpu_bytes,{}", m.peak_gpu_bytes);
    s
}

pub fn metrics_jsonl(record: &MetricsRecord) -> String {
    let mut s = String::new();
    if record.is_empty() {
        return s;
    }
    for r in &record.requests {
        s.push_str(&serde_json::to_string(r).expect("plain struct"));
        s.push('\n');
    }
    let summary = serde_json::json!({ "summary": record.summary });
    s.push_str(&summary.to_string());
    s.push('\n');
    s
}

pub fn write_metrics(
    record: &MetricsRecord,
    path: impl AsRef<Path>,
    format: MetricsFormat,
) -> std::io::Result<()> {
    let body = match format {
        MetricsFormat::Csv => metrics_csv(record),
        MetricsFormat::JsonLines => metrics_jsonl(record),
    };
    std::fs::write(path, body)
}
