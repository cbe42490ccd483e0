use tpshift::scheduler::{Policy, Request, SchedulerConfig};
use tpshift::sim::{self, ClusterConfig, EventKind, PerfModel, SimOutput, SyntheticConfig};
use tpshift::transform_engine::CostModel;

fn run(trace: &[Request], policy: Policy, cluster: ClusterConfig) -> SimOutput {
    sim::run(
        trace,
        &cluster,
        &PerfModel::default(),
        &SchedulerConfig::with_policy(policy),
        &CostModel::default(),
    )
    .unwrap()
}

#[test]
fn lone_short_request_timings() {
    let trace = [Request {
        id: 0,
        arrival_time: 0.0,
        input_tokens: 1000,
        output_tokens: 115,
    }];
    let out = run(&trace, Policy::Rr, ClusterConfig::default());
    let r = &out.metrics.requests[0];
    assert!((r.ttft_s.unwrap() - 1000.0 / 448.0).abs() < 1e-9);
    assert!((r.tpot_s.unwrap() - 1.0 / 448.0).abs() < 1e-9);
    let done = r.completed_s.unwrap();
    assert!((done - (1000.0 + 115.0) / 448.0).abs() < 1e-9, "{done}");
}

fn workload() -> Vec<Request> {
    sim::gen_synthetic(&SyntheticConfig {
        duration: 240.0,
        seed: 3,
        ..Default::default()
    })
}

#[test]
fn events_are_causal() {
    for p in [Policy::TransformAware, Policy::Rr, Policy::Llf] {
        let out = run(&workload(), p, ClusterConfig::default());
        assert!(out.events.windows(2).all(|w| w[0].t <= w[1].t), "{p}");
        for r in &out.metrics.requests {
            if let Some(done) = r.completed_s {
                let ttft = r.ttft_s.unwrap();
                assert!(
                    ttft > 0.0 && r.arrival_s + ttft <= done + 1e-9,
                    "{p}: {r:?}"
                );
                assert!(r.placed_instance.is_some());
            }
        }
        for e in &out.events {
            if e.kind == EventKind::Complete {
                let arrival = out
                    .events
                    .iter()
                    .find(|a| a.kind == EventKind::Arrival && a.request == e.request);
                assert!(arrival.unwrap().t <= e.t);
            }
        }
    }
}

#[test]
fn token_accounting_matches_windows() {
    let out = run(
        &workload(),
        Policy::TransformAware,
        ClusterConfig::default(),
    );
    let m = &out.metrics;
    let windowed: f64 = m.windows.iter().map(|w| w.tokens).sum();
    let total = m.prefill_tokens + m.decode_tokens;
    assert!(
        (windowed - total).abs() < 1e-6 * total.max(1.0),
        "{windowed} vs {total}"
    );
    let served: f64 = workload()
        .iter()
        .zip(&m.requests)
        .filter(|(_, r)| r.completed_s.is_some())
        .map(|(q, _)| (q.input_tokens + q.output_tokens) as f64)
        .sum();
    assert!(total >= served - 1e-6);
}

#[test]
fn peak_memory_within_gpu() {
    let cluster = ClusterConfig::default();
    let out = run(&workload(), Policy::TransformAware, cluster.clone());
    assert!(out.metrics.summary.peak_gpu_bytes > 0);
    assert!(out.metrics.summary.peak_gpu_bytes <= cluster.gpu_bytes);
}

#[test]
fn same_inputs_same_log() {
    let a = run(&workload(), Policy::Llf, ClusterConfig::default());
    let b = run(&workload(), Policy::Llf, ClusterConfig::default());
    assert_eq!(a.event_log_jsonl(), b.event_log_jsonl());
}

#[test]
fn trace_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    std::fs::write(
        &path,
        "# two requests\n{arrival_ms:0, input_tokens:1024, output_tokens:128}\n{\"arrival_ms\":250,\"input_tokens\":2048,\"output_tokens\":16}\n",
    )
    .unwrap();
    let trace = sim::load_trace(&path).unwrap();
    assert_eq!(trace.len(), 2);
    assert_eq!(trace[1].arrival_time, 0.25);
    let out = run(&trace, Policy::TransformAware, ClusterConfig::default());
    assert_eq!(out.metrics.completed().count(), 2);
}
