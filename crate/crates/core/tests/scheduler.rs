use tpshift::scheduler::{
    ClusterState, Decision, Policy, Request, SchedError, Scheduler, SchedulerConfig,
};
use tpshift::sim::PerfModel;

fn req(id: u64, input: u64) -> Request {
    Request {
        id,
        arrival_time: 0.0,
        input_tokens: input,
        output_tokens: 1,
    }
}

fn sched(p: Policy) -> Scheduler {
    Scheduler::new(SchedulerConfig::with_policy(p), PerfModel::default()).unwrap()
}

#[test]
fn policy_names_round_trip() {
    for p in [Policy::TransformAware, Policy::Rr, Policy::Llf] {
        assert_eq!(p.to_string().parse::<Policy>(), Ok(p));
    }
    assert!("fifo".parse::<Policy>().is_err());
}

#[test]
fn long_request_merges_four_tp1() {
    let perf = PerfModel::default();
    let cluster = ClusterState::uniform(1, 8, 1, &perf);
    for p in [Policy::TransformAware, Policy::Rr, Policy::Llf] {
        let mut s = sched(p);
        match s.schedule_request(&req(0, 50_000), &cluster).unwrap() {
            Decision::ScaleUp {
                group,
                target_tp,
                first_gpu,
                ..
            } => {
                assert_eq!(target_tp, 4, "{p}");
                assert_eq!(group.len(), 4, "{p}");
                assert_eq!(first_gpu % 4, 0, "{p}");
            }
            other => panic!("{p}: {other:?}"),
        }
    }
}

#[test]
fn short_request_placed_on_idle_cluster() {
    let perf = PerfModel::default();
    let cluster = ClusterState::uniform(1, 8, 1, &perf);
    let mut s = sched(Policy::TransformAware);
    assert!(matches!(
        s.schedule_request(&req(0, 1000), &cluster),
        Ok(Decision::Place { .. })
    ));
}

#[test]
fn oversized_request_is_unschedulable() {
    let perf = PerfModel::default();
    let cluster = ClusterState::uniform(1, 8, 1, &perf);
    let mut s = sched(Policy::TransformAware);
    assert!(matches!(
        s.schedule_request(&req(0, 200_000), &cluster),
        Err(SchedError::Unschedulable { request: 0, .. })
    ));
}

#[test]
fn idle_wide_instance_splits_back() {
    let perf = PerfModel::default();
    let cluster = ClusterState::uniform(1, 4, 4, &perf);
    let s = sched(Policy::TransformAware);
    let down = s
        .schedule_parallelism(cluster.instances[0].id, &cluster)
        .unwrap();
    assert_eq!(down.target_tp, 1);
}
