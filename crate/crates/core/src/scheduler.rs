//! Request placement and parallelism decisions.
//!
//! Three policies share the same cluster view: the transformation-aware
//! policy (`gyges` on the command line), round-robin and least-load-first.
//! All of them return a [`Decision`]; the simulator carries it out.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranks::lpt_split;
use crate::sim::PerfModel;

/// Output share of total sequence length in production traffic.
pub const OUTPUT_SHARE: f64 = 0.103;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    #[serde(rename = "gyges")]
    TransformAware,
    Rr,
    Llf,
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gyges" => Ok(Policy::TransformAware),
            "rr" => Ok(Policy::Rr),
            "llf" => Ok(Policy::Llf),
            other => Err(format!(
                "unknown policy {other:?} (expected gyges, rr or llf)"
            )),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::TransformAware => "gyges",
            Policy::Rr => "rr",
            Policy::Llf => "llf",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservationPolicy {
    pub enabled: bool,
    /// Seconds without a long arrival before a reservation is released.
    pub cooldown_s: f64,
}

impl Default for ReservationPolicy {
    fn default() -> Self {
        ReservationPolicy {
            enabled: true,
            cooldown_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub scale_down_threshold: f64,
    pub reservation: ReservationPolicy,
    /// Upper bound on the output length assumed at admission.
    pub expected_output_cap: u64,
    /// Decode rate a request is entitled to; drives request-count pressure.
    pub slo_decode_tps: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: Policy::TransformAware,
            scale_down_threshold: 0.5,
            reservation: ReservationPolicy::default(),
            expected_output_cap: 8192,
            slo_decode_tps: 20.0,
        }
    }
}

impl SchedulerConfig {
    pub fn with_policy(policy: Policy) -> Self {
        SchedulerConfig {
            policy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        if !(self.scale_down_threshold > 0.0 && self.scale_down_threshold < 1.0) {
            return Err(SchedError::Config(format!(
                "threshold {} outside (0, 1)",
                self.scale_down_threshold
            )));
        }
        if !(self.slo_decode_tps > 0.0) {
            return Err(SchedError::Config("slo_decode_tps must be positive".into()));
        }
        if self.reservation.cooldown_s < 0.0 {
            return Err(SchedError::Config("negative reservation cool-down".into()));
        }
        Ok(())
    }

    /// Output tokens assumed for a request of `input` tokens.
    pub fn expected_output(&self, input: u64) -> u64 {
        let raw = (input as f64 * OUTPUT_SHARE / (1.0 - OUTPUT_SHARE)).round() as u64;
        raw.clamp(1, self.expected_output_cap.max(1))
    }

    /// KV tokens a request is expected to occupy.
    pub fn expected_need(&self, input: u64) -> u64 {
        input + self.expected_output(input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveRequest {
    pub id: u64,
    /// KV tokens reserved for the request.
    pub tokens: u64,
    pub long: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceState {
    pub id: usize,
    pub host: usize,
    pub tp: usize,
    pub gpu_ids: Vec<usize>,
    pub kv_capacity_tokens: u64,
    pub kv_used_tokens: u64,
    pub active_requests: Vec<ActiveRequest>,
    pub throughput_capacity: f64,
    pub transforming: bool,
    /// Degree the instance is heading to while `transforming`.
    pub transform_target: Option<usize>,
    pub reserved_for_transform: bool,
}

impl InstanceState {
    pub fn new(id: usize, host: usize, first_gpu: usize, tp: usize, perf: &PerfModel) -> Self {
        InstanceState {
            id,
            host,
            tp,
            gpu_ids: (first_gpu..first_gpu + tp).collect(),
            kv_capacity_tokens: perf.kv_capacity(tp),
            kv_used_tokens: 0,
            active_requests: Vec::new(),
            throughput_capacity: perf.throughput(tp),
            transforming: false,
            transform_target: None,
            reserved_for_transform: false,
        }
    }

    pub fn first_gpu(&self) -> usize {
        self.gpu_ids.first().copied().unwrap_or(0)
    }

    pub fn has_long(&self) -> bool {
        self.active_requests.iter().any(|r| r.long)
    }

    pub fn free_tokens(&self) -> u64 {
        self.kv_capacity_tokens.saturating_sub(self.kv_used_tokens)
    }

    pub fn admit(&mut self, id: u64, tokens: u64, long: bool) {
        self.kv_used_tokens += tokens;
        self.active_requests
            .push(ActiveRequest { id, tokens, long });
    }

    pub fn release(&mut self, id: u64) -> Option<ActiveRequest> {
        let pos = self.active_requests.iter().position(|r| r.id == id)?;
        let r = self.active_requests.remove(pos);
        self.kv_used_tokens -= r.tokens;
        Some(r)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub gpus_per_host: Vec<usize>,
    /// Kept sorted by id.
    pub instances: Vec<InstanceState>,
    pub clock: f64,
    /// Long requests that arrived and are not yet placed.
    pub pending_long: usize,
}

impl ClusterState {
    /// Every host filled with TP1 instances, ids in GPU order.
    pub fn uniform(hosts: usize, gpus_per_host: usize, tp: usize, perf: &PerfModel) -> Self {
        let mut instances = Vec::new();
        for h in 0..hosts {
            for g in (0..gpus_per_host).step_by(tp.max(1)) {
                let id = instances.len();
                instances.push(InstanceState::new(id, h, g, tp, perf));
            }
        }
        ClusterState {
            gpus_per_host: vec![gpus_per_host; hosts],
            instances,
            clock: 0.0,
            pending_long: 0,
        }
    }

    pub fn instance(&self, id: usize) -> Option<&InstanceState> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn instance_mut(&mut self, id: usize) -> Option<&mut InstanceState> {
        self.instances.iter_mut().find(|i| i.id == id)
    }

    pub fn long_active(&self) -> bool {
        self.instances.iter().any(|i| i.has_long())
    }

    pub fn no_long_req(&self) -> bool {
        self.pending_long == 0 && !self.long_active()
    }

    pub fn next_id(&self) -> usize {
        self.instances.iter().map(|i| i.id + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Place {
        instance: usize,
    },
    ScaleUp {
        host: usize,
        first_gpu: usize,
        /// Instance ids merged, in GPU order.
        group: Vec<usize>,
        target_tp: usize,
    },
    Wait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDown {
    pub instance: usize,
    pub target_tp: usize,
    /// Request id -> index of the resulting instance.
    pub assignment: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Load {
    Value(f64),
    Overload,
}

impl Load {
    pub fn value(self) -> Option<f64> {
        match self {
            Load::Value(v) => Some(v),
            Load::Overload => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("request {request} needs {need} KV tokens, largest instance holds {max}")]
    Unschedulable { request: u64, need: u64, max: u64 },
    #[error("invalid scheduler config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    pub perf: PerfModel,
    rr_last: Option<usize>,
    last_long: Option<(f64, usize)>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, perf: PerfModel) -> Result<Self, SchedError> {
        config.validate()?;
        Ok(Scheduler {
            config,
            perf,
            rr_last: None,
            last_long: None,
        })
    }

    pub fn policy(&self) -> Policy {
        self.config.policy
    }

    /// Whether a request of `need` tokens cannot run at the smallest degree.
    pub fn is_long(&self, need: u64) -> bool {
        need > self.perf.kv_capacity(self.perf.min_tp())
    }

    /// Record an arrival; reservations key off the last long one.
    pub fn note_arrival(&mut self, req: &Request, now: f64) {
        let need = self.config.expected_need(req.input_tokens);
        if self.is_long(need) {
            if let Some(tp) = self.perf.min_tp_for(need) {
                self.last_long = Some((now, tp));
            }
        }
    }

    /// Expected load of `inst` after admitting `need` more tokens.
    pub fn estimate_load(&self, need: u64, inst: &InstanceState) -> Load {
        if inst.kv_used_tokens + need > inst.kv_capacity_tokens {
            return Load::Overload;
        }
        let extra = usize::from(need > 0);
        Load::Value(self.load_of(
            inst.kv_used_tokens + need,
            inst.active_requests.len() + extra,
            inst.tp,
        ))
    }

    /// Load right now, without a hypothetical request.
    pub fn current_load(&self, inst: &InstanceState) -> f64 {
        self.load_of(inst.kv_used_tokens, inst.active_requests.len(), inst.tp)
    }

    fn load_of(&self, tokens: u64, requests: usize, tp: usize) -> f64 {
        let kv = tokens as f64 / self.perf.kv_capacity(tp) as f64;
        let pressure = requests as f64 * self.config.slo_decode_tps / self.perf.throughput(tp);
        kv.max(pressure)
    }

    pub fn schedule_request(
        &mut self,
        req: &Request,
        cluster: &ClusterState,
    ) -> Result<Decision, SchedError> {
        let need = self.config.expected_need(req.input_tokens);
        let max = self.perf.kv_capacity(self.perf.max_tp());
        if need > max {
            return Err(SchedError::Unschedulable {
                request: req.id,
                need,
                max,
            });
        }
        Ok(match self.config.policy {
            Policy::TransformAware => self.transform_aware(need, cluster),
            Policy::Rr => self.round_robin(need, cluster),
            Policy::Llf => self.least_load(need, cluster),
        })
    }

    fn transform_aware(&self, need: u64, cluster: &ClusterState) -> Decision {
        let long = self.is_long(need);
        let no_long = cluster.no_long_req();
        let mut best: Option<((usize, f64), usize)> = None;
        for inst in cluster.instances.iter().filter(|i| !i.transforming) {
            if inst.reserved_for_transform && !long && (no_long || cluster.pending_long > 0) {
                continue;
            }
            let Load::Value(load) = self.estimate_load(need, inst) else {
                continue;
            };
            // Longs go to the widest instance; with no long traffic, shorts
            // drain away from widened instances so they can split.
            let rank = if long {
                usize::MAX - inst.tp
            } else if no_long {
                inst.tp
            } else {
                0
            };
            let key = ((rank, load), inst.id);
            if best
                .as_ref()
                .is_none_or(|b| cmp_key(&key, b) == Ordering::Less)
            {
                best = Some(key);
            }
        }
        if let Some((_, id)) = best {
            return Decision::Place { instance: id };
        }
        if !long {
            return Decision::Wait;
        }
        // An instance that is, or is becoming, wide enough will free up;
        // another merge would cost more throughput than waiting.
        let eventually = cluster.instances.iter().any(|i| {
            let tp = i.transform_target.unwrap_or(i.tp);
            self.perf.kv_capacity(tp) >= need
        });
        if eventually {
            return Decision::Wait;
        }
        let Some(target) = self.perf.min_tp_for(need) else {
            return Decision::Wait;
        };
        self.select_group(cluster, target, need).map_or(
            Decision::Wait,
            |(host, first_gpu, group)| Decision::ScaleUp {
                host,
                first_gpu,
                group,
                target_tp: target,
            },
        )
    }

    fn round_robin(&mut self, need: u64, cluster: &ClusterState) -> Decision {
        let ids: Vec<usize> = cluster
            .instances
            .iter()
            .filter(|i| !i.transforming)
            .map(|i| i.id)
            .collect();
        let Some(&first) = ids.first() else {
            return Decision::Wait;
        };
        let id = match self.rr_last {
            Some(last) => ids.iter().copied().find(|&i| i > last).unwrap_or(first),
            None => first,
        };
        self.rr_last = Some(id);
        self.place_or_grow(need, cluster, id)
    }

    fn least_load(&self, need: u64, cluster: &ClusterState) -> Decision {
        let best = cluster
            .instances
            .iter()
            .filter(|i| !i.transforming)
            .map(|i| (self.current_load(i), i.id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match best {
            Some((_, id)) => self.place_or_grow(need, cluster, id),
            None => Decision::Wait,
        }
    }

    /// Baseline handling once an instance is chosen: place if it fits, merge
    /// it with its neighbours if the request is too large for its degree.
    fn place_or_grow(&self, need: u64, cluster: &ClusterState, id: usize) -> Decision {
        let Some(inst) = cluster.instance(id) else {
            return Decision::Wait;
        };
        if self.estimate_load(need, inst) != Load::Overload {
            return Decision::Place { instance: id };
        }
        if need <= inst.kv_capacity_tokens {
            return Decision::Wait;
        }
        let Some(target) = self.perf.min_tp_for(need) else {
            return Decision::Wait;
        };
        let start = inst.first_gpu() / target * target;
        match self.group_at(cluster, inst.host, start, target, need) {
            Some((group, _)) => Decision::ScaleUp {
                host: inst.host,
                first_gpu: start,
                group,
                target_tp: target,
            },
            None => Decision::Wait,
        }
    }

    /// Instances covering GPUs `start..start + tp` of `host` if they can merge
    /// into one instance of degree `tp` holding `need` more tokens. Returns
    /// the ids and their total KV usage.
    fn group_at(
        &self,
        cluster: &ClusterState,
        host: usize,
        start: usize,
        tp: usize,
        need: u64,
    ) -> Option<(Vec<usize>, u64)> {
        if start + tp > *cluster.gpus_per_host.get(host)? {
            return None;
        }
        let mut members: Vec<&InstanceState> = cluster
            .instances
            .iter()
            .filter(|i| i.host == host && i.first_gpu() >= start && i.first_gpu() < start + tp)
            .collect();
        members.sort_by_key(|i| i.first_gpu());
        let from = members.first()?.tp;
        let covered: usize = members.iter().map(|i| i.tp).sum();
        let ok = covered == tp
            && from < tp
            && members.iter().all(|i| {
                i.tp == from && !i.transforming && i.gpu_ids.iter().all(|&g| g < start + tp)
            });
        if !ok {
            return None;
        }
        let used: u64 = members.iter().map(|i| i.kv_used_tokens).sum();
        if used + need > self.perf.kv_capacity(tp) {
            return None;
        }
        Some((members.iter().map(|i| i.id).collect(), used))
    }

    /// Cheapest aligned group to widen to `tp`: reserved groups first, then
    /// minimum KV usage, then lowest host and GPU.
    fn select_group(
        &self,
        cluster: &ClusterState,
        tp: usize,
        need: u64,
    ) -> Option<(usize, usize, Vec<usize>)> {
        let mut best: Option<((bool, u64, usize, usize), Vec<usize>)> = None;
        for (host, &gpus) in cluster.gpus_per_host.iter().enumerate() {
            for start in (0..gpus).step_by(tp) {
                let Some((group, used)) = self.group_at(cluster, host, start, tp, need) else {
                    continue;
                };
                let reserved = group.iter().all(|&id| {
                    cluster
                        .instance(id)
                        .is_some_and(|i| i.reserved_for_transform)
                });
                let key = (!reserved, used, host, start);
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    best = Some((key, group));
                }
            }
        }
        best.map(|((_, _, host, start), group)| (host, start, group))
    }

    /// Safe scale-down check for one instance. Applies to every policy; only
    /// The transform-aware policy also drains widened instances beforehand.
    pub fn schedule_parallelism(&self, id: usize, cluster: &ClusterState) -> Option<ScaleDown> {
        let inst = cluster.instance(id)?;
        let target = self.perf.min_tp();
        if inst.tp <= target || inst.transforming || !cluster.no_long_req() {
            return None;
        }
        let threshold = self.config.scale_down_threshold;
        if self.current_load(inst) >= threshold {
            return None;
        }
        let parts = inst.tp / target;
        let weights: BTreeMap<u64, u64> = inst
            .active_requests
            .iter()
            .map(|r| (r.id, r.tokens))
            .collect();
        let assignment = lpt_split(&weights, parts);
        let mut tokens = vec![0u64; parts];
        let mut counts = vec![0usize; parts];
        for r in &inst.active_requests {
            let g = assignment[&r.id];
            tokens[g] += r.tokens;
            counts[g] += 1;
        }
        let safe = (0..parts).all(|g| {
            tokens[g] <= self.perf.kv_capacity(target)
                && self.load_of(tokens[g], counts[g], target) < threshold
        });
        safe.then_some(ScaleDown {
            instance: id,
            target_tp: target,
            assignment,
        })
    }

    /// Refresh reservation flags. Under the transform-aware policy, while long
    /// requests arrived within the cool-down and nothing wide enough exists,
    /// one group stays reserved for the next merge.
    pub fn update_reserve(&self, cluster: &mut ClusterState) {
        let keep = match (self.config.policy, self.last_long) {
            (Policy::TransformAware, Some((at, tp)))
                if self.config.reservation.enabled
                    && cluster.clock - at <= self.config.reservation.cooldown_s =>
            {
                let cap = self.perf.kv_capacity(tp);
                let wide = cluster
                    .instances
                    .iter()
                    .any(|i| self.perf.kv_capacity(i.transform_target.unwrap_or(i.tp)) >= cap);
                if wide {
                    None
                } else {
                    self.select_group(cluster, tp, 0).map(|(_, _, g)| g)
                }
            }
            _ => None,
        };
        let keep = keep.unwrap_or_default();
        for inst in &mut cluster.instances {
            inst.reserved_for_transform = keep.contains(&inst.id);
        }
    }
}

fn cmp_key(a: &((usize, f64), usize), b: &((usize, f64), usize)) -> Ordering {
    a.0 .0
        .cmp(&b.0 .0)
        .then(a.0 .1.total_cmp(&b.0 .1))
        .then(a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(policy: Policy) -> Scheduler {
        Scheduler::new(SchedulerConfig::with_policy(policy), PerfModel::default()).unwrap()
    }

    fn req(id: u64, input: u64) -> Request {
        Request {
            id,
            arrival_time: 0.0,
            input_tokens: input,
            output_tokens: 1,
        }
    }

    fn eight() -> ClusterState {
        ClusterState::uniform(1, 8, 1, &PerfModel::default())
    }

    #[test]
    fn expected_output_share() {
        let c = SchedulerConfig::default();
        // output / (input + output) stays at the production share
        let out = c.expected_output(50_000);
        let share = out as f64 / (50_000 + out) as f64;
        assert!((share - OUTPUT_SHARE).abs() < 1e-4, "{share}");
        assert_eq!(c.expected_output(1), 1);
        let capped = SchedulerConfig {
            expected_output_cap: 100,
            ..Default::default()
        };
        assert_eq!(capped.expected_output(50_000), 100);
    }

    #[test]
    fn short_goes_to_lowest_idle() {
        let mut s = sched(Policy::TransformAware);
        let d = s.schedule_request(&req(1, 1000), &eight()).unwrap();
        assert_eq!(d, Decision::Place { instance: 0 });
    }

    #[test]
    fn long_on_tp1_cluster_scales_to_tp4() {
        let mut s = sched(Policy::TransformAware);
        let d = s.schedule_request(&req(1, 50_000), &eight()).unwrap();
        match d {
            Decision::ScaleUp {
                target_tp, group, ..
            } => {
                assert_eq!(target_tp, 4);
                assert_eq!(group, vec![0, 1, 2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oversized_is_unschedulable() {
        let mut s = sched(Policy::TransformAware);
        let err = s.schedule_request(&req(1, 200_000), &eight()).unwrap_err();
        assert!(matches!(err, SchedError::Unschedulable { request: 1, .. }));
    }

    fn with_tp4_long() -> ClusterState {
        let perf = PerfModel::default();
        let mut c = ClusterState {
            gpus_per_host: vec![8],
            ..Default::default()
        };
        let mut wide = InstanceState::new(0, 0, 0, 4, &perf);
        wide.admit(1, SchedulerConfig::default().expected_need(50_000), true);
        c.instances.push(wide);
        for g in 4..8 {
            c.instances.push(InstanceState::new(g - 3, 0, g, 1, &perf));
        }
        c
    }

    #[test]
    fn second_long_reuses_existing_tp4() {
        let mut c = with_tp4_long();
        c.pending_long = 1;
        let mut s = sched(Policy::TransformAware);
        assert_eq!(
            s.schedule_request(&req(2, 50_000), &c).unwrap(),
            Decision::Place { instance: 0 }
        );
        let mut llf = sched(Policy::Llf);
        assert!(matches!(
            llf.schedule_request(&req(2, 50_000), &c).unwrap(),
            Decision::ScaleUp { .. }
        ));
    }

    #[test]
    fn transform_aware_waits_for_full_wide_instance() {
        let mut c = with_tp4_long();
        let need = SchedulerConfig::default().expected_need(50_000);
        c.instances[0].admit(2, need, true);
        c.pending_long = 1;
        let mut s = sched(Policy::TransformAware);
        assert_eq!(
            s.schedule_request(&req(3, 50_000), &c).unwrap(),
            Decision::Wait
        );
    }

    #[test]
    fn rr_cycles_ids() {
        let perf = PerfModel::default();
        let c = ClusterState::uniform(1, 3, 1, &perf);
        let mut s = sched(Policy::Rr);
        let seq: Vec<usize> = (0..6)
            .map(|i| match s.schedule_request(&req(i, 100), &c).unwrap() {
                Decision::Place { instance } => instance + 1,
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(seq, vec![1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn llf_picks_lighter() {
        let perf = PerfModel::default();
        let mut c = ClusterState::uniform(1, 2, 1, &perf);
        c.instances[0].admit(9, 3375, false); // 0.9 of 3750
        c.instances[1].admit(8, 375, false); // 0.1
        let mut s = sched(Policy::Llf);
        assert_eq!(
            s.schedule_request(&req(1, 10), &c).unwrap(),
            Decision::Place { instance: 1 }
        );
    }

    #[test]
    fn load_monotone_and_overload() {
        let s = sched(Policy::TransformAware);
        let perf = PerfModel::default();
        let mut a = InstanceState::new(0, 0, 0, 1, &perf);
        let mut b = InstanceState::new(1, 0, 1, 1, &perf);
        a.admit(1, 375, false);
        b.admit(2, 2250, false);
        let la = s.estimate_load(100, &a).value().unwrap();
        let lb = s.estimate_load(100, &b).value().unwrap();
        assert!(la < lb);
        let empty = InstanceState::new(2, 0, 2, 1, &perf);
        assert_eq!(s.estimate_load(0, &empty), Load::Value(0.0));
        assert_eq!(s.estimate_load(a.free_tokens() + 1, &a), Load::Overload);
        assert!(s.estimate_load(a.free_tokens(), &a).value().is_some());
    }

    fn tp4_with(requests: usize, tokens: u64, long: bool) -> ClusterState {
        let perf = PerfModel::default();
        let mut c = ClusterState {
            gpus_per_host: vec![4],
            ..Default::default()
        };
        let mut i = InstanceState::new(0, 0, 0, 4, &perf);
        for r in 0..requests {
            i.admit(r as u64, tokens, long && r == 0);
        }
        c.instances.push(i);
        c
    }

    #[test]
    fn scale_down_when_light() {
        let s = sched(Policy::TransformAware);
        assert!(s.schedule_parallelism(0, &eight()).is_none());
        // 12 requests: pressure 12 * 20 / 767 = 0.31
        let c = tp4_with(12, 500, false);
        let load = s.current_load(&c.instances[0]);
        assert!((load - 0.3).abs() < 0.02, "{load}");
        let d = s.schedule_parallelism(0, &c).unwrap();
        assert_eq!(d.target_tp, 1);
        let mut per = [0; 4];
        for g in d.assignment.values() {
            per[*g] += 1;
        }
        assert_eq!(per, [3, 3, 3, 3]);
    }

    #[test]
    fn long_blocks_scale_down() {
        let s = sched(Policy::TransformAware);
        let c = tp4_with(12, 500, true);
        assert!(s.schedule_parallelism(0, &c).is_none());
    }

    #[test]
    fn unsafe_split_blocks_scale_down() {
        let s = sched(Policy::TransformAware);
        // instance load is low but each fragment would be half full
        let c = tp4_with(4, 2000, false);
        assert!(s.current_load(&c.instances[0]) < 0.5);
        assert!(s.schedule_parallelism(0, &c).is_none());
    }

    #[test]
    fn reservation_lifecycle() {
        let mut s = sched(Policy::TransformAware);
        let mut c = eight();
        s.update_reserve(&mut c);
        assert!(c.instances.iter().all(|i| !i.reserved_for_transform));
        s.note_arrival(&req(1, 50_000), 0.0);
        c.clock = 10.0;
        s.update_reserve(&mut c);
        let reserved: Vec<usize> = c
            .instances
            .iter()
            .filter(|i| i.reserved_for_transform)
            .map(|i| i.id)
            .collect();
        assert_eq!(reserved, vec![0, 1, 2, 3]);
        // shorts avoid the reserved group while a long waits
        c.pending_long = 1;
        match s.schedule_request(&req(2, 1000), &c).unwrap() {
            Decision::Place { instance } => assert!(instance >= 4),
            other => panic!("{other:?}"),
        }
        c.clock = 100.0;
        s.update_reserve(&mut c);
        assert!(c.instances.iter().all(|i| !i.reserved_for_transform));
    }

    #[test]
    fn policy_parse() {
        assert_eq!("gyges".parse::<Policy>().unwrap(), Policy::TransformAware);
        assert_eq!("llf".parse::<Policy>().unwrap().to_string(), "llf");
        assert!("fifo".parse::<Policy>().is_err());
    }

    #[test]
    fn bad_threshold_rejected() {
        let c = SchedulerConfig {
            scale_down_threshold: 1.0,
            ..Default::default()
        };
        assert!(Scheduler::new(c, PerfModel::default()).is_err());
    }
}
