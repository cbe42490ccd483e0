//! Discrete-event loop.
//!
//! Instances serve their requests by processor sharing: with `n` resident
//! requests each one gets `1/n` of the instance, progressing through its
//! prefill at `prefill_rate(tp) / n` and its decode at `throughput(tp) / n`
//! tokens per second. A lone request therefore sees TTFT = input / prefill
//! rate and TPOT = 1 / throughput. Throughput counts prefill and decode
//! tokens alike.
//!
//! Instances in a transformation make no progress until it finishes; its
//! length is the stall the transformation plan charges.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::model::{presets, ModelConfig};
use crate::page_store::GB;
use crate::scheduler::{
    ClusterState, Decision, InstanceState, Request, SchedError, Scheduler, SchedulerConfig,
};
use crate::transform_engine::{
    build_plan, transformation_cost_summary, CostModel, GroupSpec, TransformError, TransformOptions,
};
use crate::weight_plan::resident_weight_bytes;

use super::metrics::{MetricsRecord, RequestMetrics, Summary, Window};
use super::perf::PerfModel;

const EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub hosts: usize,
    pub gpus_per_host: usize,
    pub initial_tp: usize,
    pub model: ModelConfig,
    pub gpu_bytes: u64,
    /// Static per-GPU activation reservation.
    pub activation_bytes: u64,
    pub transform: TransformOptions,
    /// Stop here; `None` runs until every request finishes.
    pub horizon_s: Option<f64>,
    pub window_s: f64,
    /// Period of the scale-down and reservation check.
    pub tick_s: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            hosts: 1,
            gpus_per_host: 8,
            initial_tp: 1,
            model: presets::qwen2_5_32b(),
            gpu_bytes: 96 * GB,
            activation_bytes: 14_300_000_000,
            transform: TransformOptions::default(),
            horizon_s: None,
            window_s: 10.0,
            tick_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    Place,
    Wait,
    Reject,
    ScaleUp,
    ScaleDown,
    TransformDone,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub t: f64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_tp: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stall_s: Option<f64>,
}

impl SimEvent {
    fn new(t: f64, kind: EventKind) -> Self {
        SimEvent {
            t,
            kind,
            request: None,
            instance: None,
            group: None,
            target_tp: None,
            stall_s: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: MetricsRecord,
    pub events: Vec<SimEvent>,
}

impl SimOutput {
    pub fn event_log_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("plain struct"));
            s.push('\n');
        }
        s
    }

    pub fn write_event_log(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.event_log_jsonl())
    }

    /// Scale-ups started at or after `t`.
    pub fn scale_ups_since(&self, t: f64) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::ScaleUp && e.t >= t)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ext {
    Arrival(usize),
    Tick,
    TransformDone(u64),
}

#[derive(Debug, Clone, Copy)]
struct Timed {
    t: f64,
    seq: u64,
    ev: Ext,
}

impl PartialEq for Timed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Timed {}

impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timed {
    // reversed: BinaryHeap pops the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
struct Job {
    idx: usize,
    prefill_left: f64,
    decode_left: f64,
    first_token: Option<f64>,
}

#[derive(Debug, Clone)]
struct Transform {
    members: Vec<usize>,
    host: usize,
    first_gpu: usize,
    target: usize,
    attached: Option<usize>,
    assignment: BTreeMap<u64, usize>,
}

struct Sim<'a> {
    cfg: &'a ClusterConfig,
    perf: &'a PerfModel,
    cost: &'a CostModel,
    reqs: &'a [Request],
    sched: Scheduler,
    cluster: ClusterState,
    jobs: BTreeMap<usize, Vec<Job>>,
    rec: Vec<RequestMetrics>,
    long: Vec<bool>,
    reserve: Vec<u64>,
    pending: Vec<usize>,
    waited: Vec<bool>,
    transforms: BTreeMap<u64, Transform>,
    next_transform: u64,
    heap: BinaryHeap<Timed>,
    seq: u64,
    now: f64,
    events: Vec<SimEvent>,
    window_tokens: Vec<f64>,
    prefill_tokens: f64,
    decode_tokens: f64,
    scale_ups: usize,
    scale_downs: usize,
    stall_total: f64,
    peak_gpu: u64,
}

pub fn run(
    trace: &[Request],
    cluster: &ClusterConfig,
    perf: &PerfModel,
    sched: &SchedulerConfig,
    cost: &CostModel,
) -> Result<SimOutput, SimError> {
    validate(cluster, perf)?;
    cost.validate()?;
    let scheduler = Scheduler::new(sched.clone(), perf.clone())?;
    let mut sim = Sim::new(trace, cluster, perf, cost, scheduler);
    sim.run()?;
    Ok(sim.finish())
}

fn validate(cfg: &ClusterConfig, perf: &PerfModel) -> Result<(), SimError> {
    perf.validate().map_err(SimError::Config)?;
    let tps = perf.supported_tp();
    if !tps.contains(&cfg.initial_tp) || !cfg.gpus_per_host.is_multiple_of(cfg.initial_tp) {
        return Err(SimError::Config(format!(
            "initial TP{} does not tile {} GPUs with degrees {tps:?}",
            cfg.initial_tp, cfg.gpus_per_host
        )));
    }
    if cfg.hosts == 0 || cfg.gpus_per_host == 0 {
        return Err(SimError::Config("cluster has no GPUs".into()));
    }
    if !(cfg.window_s > 0.0 && cfg.tick_s > 0.0) {
        return Err(SimError::Config("window and tick must be positive".into()));
    }
    for &tp in &tps {
        if !cfg.model.supported_tp.contains(&tp) {
            return Err(SimError::Config(format!(
                "{} does not support TP{tp}",
                cfg.model.name
            )));
        }
        let need = gpu_bytes(cfg, tp, perf.kv_capacity(tp));
        if need > cfg.gpu_bytes {
            return Err(SimError::Config(format!(
                "TP{tp}: weights, activations and {} KV tokens need {need} bytes per GPU, more than {}",
                perf.kv_capacity(tp),
                cfg.gpu_bytes
            )));
        }
    }
    Ok(())
}

/// Bytes one GPU of a TP-`tp` instance holds with `kv_tokens` resident.
fn gpu_bytes(cfg: &ClusterConfig, tp: usize, kv_tokens: u64) -> u64 {
    let weights = resident_weight_bytes(
        &cfg.model,
        tp,
        cfg.transform.padded,
        cfg.transform.page_size,
    )
    .unwrap_or(cfg.model.weight_bytes());
    weights + cfg.activation_bytes + kv_tokens * cfg.model.kv_bytes_per_token(tp)
}

impl<'a> Sim<'a> {
    fn new(
        reqs: &'a [Request],
        cfg: &'a ClusterConfig,
        perf: &'a PerfModel,
        cost: &'a CostModel,
        sched: Scheduler,
    ) -> Self {
        let cluster = ClusterState::uniform(cfg.hosts, cfg.gpus_per_host, cfg.initial_tp, perf);
        let long = reqs
            .iter()
            .map(|r| sched.is_long(sched.config.expected_need(r.input_tokens)))
            .collect();
        let reserve = reqs
            .iter()
            .map(|r| {
                r.input_tokens
                    + r.output_tokens
                        .max(sched.config.expected_output(r.input_tokens))
            })
            .collect();
        let rec = reqs
            .iter()
            .map(|r| RequestMetrics {
                request_id: r.id,
                arrival_s: r.arrival_time,
                ..Default::default()
            })
            .collect();
        let mut sim = Sim {
            cfg,
            perf,
            cost,
            reqs,
            sched,
            cluster,
            jobs: BTreeMap::new(),
            rec,
            long,
            reserve,
            pending: Vec::new(),
            waited: vec![false; reqs.len()],
            transforms: BTreeMap::new(),
            next_transform: 0,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            events: Vec::new(),
            window_tokens: Vec::new(),
            prefill_tokens: 0.0,
            decode_tokens: 0.0,
            scale_ups: 0,
            scale_downs: 0,
            stall_total: 0.0,
            peak_gpu: 0,
        };
        for (i, r) in reqs.iter().enumerate() {
            sim.push(r.arrival_time, Ext::Arrival(i));
        }
        sim.push(0.0, Ext::Tick);
        let initial: Vec<usize> = sim.cluster.instances.iter().map(|i| i.id).collect();
        for id in initial {
            sim.track_peak(id, 0);
        }
        sim
    }

    fn push(&mut self, t: f64, ev: Ext) {
        self.heap.push(Timed {
            t,
            seq: self.seq,
            ev,
        });
        self.seq += 1;
    }

    fn log(&mut self, e: SimEvent) {
        self.events.push(e);
    }

    fn busy(&self) -> bool {
        self.jobs.values().any(|j| !j.is_empty())
            || !self.transforms.is_empty()
            || !self.pending.is_empty()
            || self.heap.iter().any(|e| matches!(e.ev, Ext::Arrival(_)))
    }

    fn run(&mut self) -> Result<(), SimError> {
        let horizon = self.cfg.horizon_s.unwrap_or(f64::INFINITY);
        loop {
            let ext = self.heap.peek().map_or(f64::INFINITY, |e| e.t);
            let int = self.next_completion();
            let t = ext.min(int);
            if !t.is_finite() || t > horizon {
                if horizon.is_finite() {
                    self.advance(horizon);
                }
                break;
            }
            self.advance(t);
            self.cluster.clock = t;
            if int <= ext {
                self.complete_phases();
                self.try_pending()?;
                self.parallelism()?;
                continue;
            }
            let Timed { ev, .. } = self.heap.pop().expect("peeked");
            match ev {
                Ext::Arrival(i) => {
                    let r = &self.reqs[i];
                    self.sched.note_arrival(r, t);
                    let mut e = SimEvent::new(t, EventKind::Arrival);
                    e.request = Some(r.id);
                    self.log(e);
                    if self.long[i] {
                        self.cluster.pending_long += 1;
                    }
                    self.pending.push(i);
                    self.try_pending()?;
                }
                Ext::Tick => {
                    self.parallelism()?;
                    self.try_pending()?;
                    self.drop_stuck();
                    if self.busy() {
                        self.push(t + self.cfg.tick_s, Ext::Tick);
                    }
                }
                Ext::TransformDone(id) => {
                    self.finish_transform(id);
                    self.try_pending()?;
                    self.parallelism()?;
                }
            }
        }
        Ok(())
    }

    fn share(&self, inst: &InstanceState) -> (f64, f64) {
        let n = self.jobs.get(&inst.id).map_or(0, Vec::len).max(1) as f64;
        (
            self.perf.prefill_rate(inst.tp) / n,
            self.perf.throughput(inst.tp) / n,
        )
    }

    fn next_completion(&self) -> f64 {
        let mut best = f64::INFINITY;
        for inst in self.cluster.instances.iter().filter(|i| !i.transforming) {
            let (pre, dec) = self.share(inst);
            for j in self.jobs.get(&inst.id).into_iter().flatten() {
                let dt = if j.prefill_left > EPS {
                    j.prefill_left / pre
                } else {
                    j.decode_left / dec
                };
                best = best.min(self.now + dt);
            }
        }
        best
    }

    fn advance(&mut self, to: f64) {
        let dt = to - self.now;
        if dt <= 0.0 {
            return;
        }
        let mut processed = 0.0;
        let rates: Vec<(usize, f64, f64)> = self
            .cluster
            .instances
            .iter()
            .filter(|i| !i.transforming)
            .map(|i| {
                let (p, d) = self.share(i);
                (i.id, p, d)
            })
            .collect();
        for (id, pre, dec) in rates {
            for j in self.jobs.get_mut(&id).into_iter().flatten() {
                if j.prefill_left > EPS {
                    let done = (pre * dt).min(j.prefill_left);
                    j.prefill_left -= done;
                    self.prefill_tokens += done;
                    processed += done;
                } else {
                    let done = (dec * dt).min(j.decode_left);
                    j.decode_left -= done;
                    self.decode_tokens += done;
                    processed += done;
                }
            }
        }
        self.spread(self.now, to, processed);
        self.now = to;
    }

    /// Credit `tokens` processed uniformly over `[a, b)` to the windows.
    fn spread(&mut self, a: f64, b: f64, tokens: f64) {
        if tokens <= 0.0 {
            return;
        }
        let w = self.cfg.window_s;
        let rate = tokens / (b - a);
        let mut t = a;
        while t < b {
            let k = (t / w).floor() as usize;
            let end = ((k + 1) as f64 * w).min(b);
            if self.window_tokens.len() <= k {
                self.window_tokens.resize(k + 1, 0.0);
            }
            self.window_tokens[k] += rate * (end - t);
            if end <= t {
                break;
            }
            t = end;
        }
    }

    fn complete_phases(&mut self) {
        let now = self.now;
        let ids: Vec<usize> = self.jobs.keys().copied().collect();
        for id in ids {
            if self.cluster.instance(id).is_none_or(|i| i.transforming) {
                continue;
            }
            let mut done = Vec::new();
            for j in self.jobs.get_mut(&id).into_iter().flatten() {
                if j.prefill_left <= EPS && j.first_token.is_none() {
                    j.prefill_left = 0.0;
                    j.first_token = Some(now);
                }
                if j.first_token.is_some() && j.decode_left <= EPS {
                    done.push(j.clone());
                }
            }
            if done.is_empty() {
                continue;
            }
            self.jobs
                .get_mut(&id)
                .expect("present")
                .retain(|j| j.first_token.is_none() || j.decode_left > EPS);
            for j in done {
                let r = &self.reqs[j.idx];
                self.decode_tokens += j.decode_left;
                if let Some(inst) = self.cluster.instance_mut(id) {
                    inst.release(r.id);
                }
                let first = j.first_token.expect("decoded");
                let m = &mut self.rec[j.idx];
                m.ttft_s = Some(first - r.arrival_time);
                m.tpot_s = Some((now - first) / r.output_tokens as f64);
                m.completed_s = Some(now);
                let mut e = SimEvent::new(now, EventKind::Complete);
                e.request = Some(r.id);
                e.instance = Some(id);
                self.log(e);
            }
        }
    }

    fn try_pending(&mut self) -> Result<(), SimError> {
        let snapshot = self.pending.clone();
        for idx in snapshot {
            if !self.pending.contains(&idx) {
                continue;
            }
            let r = &self.reqs[idx];
            self.cluster.clock = self.now;
            match self.sched.schedule_request(r, &self.cluster) {
                Err(SchedError::Unschedulable { .. }) => {
                    self.pending.retain(|&p| p != idx);
                    self.reject(idx);
                }
                Err(e) => return Err(e.into()),
                Ok(Decision::Place { instance }) => {
                    if !self.admit(idx, instance) {
                        self.note_wait(idx);
                    }
                }
                Ok(Decision::ScaleUp {
                    host,
                    first_gpu,
                    group,
                    target_tp,
                }) => {
                    self.pending.retain(|&p| p != idx);
                    self.start_transform(
                        group,
                        host,
                        first_gpu,
                        target_tp,
                        Some(idx),
                        BTreeMap::new(),
                    )?;
                }
                Ok(Decision::Wait) => self.note_wait(idx),
            }
        }
        Ok(())
    }

    fn note_wait(&mut self, idx: usize) {
        if !self.waited[idx] {
            self.waited[idx] = true;
            let mut e = SimEvent::new(self.now, EventKind::Wait);
            e.request = Some(self.reqs[idx].id);
            self.log(e);
        }
    }

    fn reject(&mut self, idx: usize) {
        if self.long[idx] {
            self.cluster.pending_long -= 1;
        }
        self.rec[idx].rejected = true;
        let mut e = SimEvent::new(self.now, EventKind::Reject);
        e.request = Some(self.reqs[idx].id);
        self.log(e);
    }

    /// Nothing running, nothing arriving, yet requests wait: they never will
    /// be served.
    fn drop_stuck(&mut self) {
        let idle = self.jobs.values().all(Vec::is_empty)
            && self.transforms.is_empty()
            && !self.heap.iter().any(|e| matches!(e.ev, Ext::Arrival(_)));
        if idle {
            for idx in std::mem::take(&mut self.pending) {
                self.reject(idx);
            }
        }
    }

    fn admit(&mut self, idx: usize, instance: usize) -> bool {
        let r = &self.reqs[idx];
        let tokens = self.reserve[idx];
        let Some(inst) = self.cluster.instance_mut(instance) else {
            return false;
        };
        if inst.transforming || inst.free_tokens() < tokens {
            return false;
        }
        inst.admit(r.id, tokens, self.long[idx]);
        self.pending.retain(|&p| p != idx);
        if self.long[idx] {
            self.cluster.pending_long -= 1;
        }
        self.jobs.entry(instance).or_default().push(Job {
            idx,
            prefill_left: r.input_tokens as f64,
            decode_left: r.output_tokens as f64,
            first_token: None,
        });
        self.rec[idx].placed_instance = Some(instance);
        let mut e = SimEvent::new(self.now, EventKind::Place);
        e.request = Some(r.id);
        e.instance = Some(instance);
        self.log(e);
        self.track_peak(instance, 0);
        true
    }

    fn track_peak(&mut self, instance: usize, extra: u64) {
        if let Some(i) = self.cluster.instance(instance) {
            let b = gpu_bytes(self.cfg, i.tp, i.kv_used_tokens) + extra;
            self.peak_gpu = self.peak_gpu.max(b);
        }
    }

    fn resident_tokens(&self, j: &Job) -> u64 {
        let r = &self.reqs[j.idx];
        let tokens =
            r.input_tokens as f64 - j.prefill_left + (r.output_tokens as f64 - j.decode_left);
        tokens.round().max(0.0) as u64
    }

    fn parallelism(&mut self) -> Result<(), SimError> {
        self.cluster.clock = self.now;
        let ids: Vec<usize> = self.cluster.instances.iter().map(|i| i.id).collect();
        for id in ids {
            if let Some(sd) = self.sched.schedule_parallelism(id, &self.cluster) {
                let inst = self.cluster.instance(id).expect("listed");
                let (host, first) = (inst.host, inst.first_gpu());
                self.start_transform(vec![id], host, first, sd.target_tp, None, sd.assignment)?;
            }
        }
        self.sched.update_reserve(&mut self.cluster);
        Ok(())
    }

    fn start_transform(
        &mut self,
        members: Vec<usize>,
        host: usize,
        first_gpu: usize,
        target: usize,
        attached: Option<usize>,
        assignment: BTreeMap<u64, usize>,
    ) -> Result<(), SimError> {
        let from = self.cluster.instance(members[0]).map_or(1, |i| i.tp);
        let instances: Vec<Vec<(u64, u64)>> = members
            .iter()
            .map(|id| {
                self.jobs
                    .get(id)
                    .into_iter()
                    .flatten()
                    .map(|j| (self.reqs[j.idx].id, self.resident_tokens(j)))
                    .collect()
            })
            .collect();
        let spec = GroupSpec {
            tp_from: from,
            tp_to: target,
            instances,
            assignment: assignment.clone(),
        };
        let plan = build_plan(&spec, &self.cfg.model, self.cost, &self.cfg.transform)?;
        let stall = transformation_cost_summary(&plan).total_stall;
        let extra = plan.peak_extra_bytes.iter().copied().max().unwrap_or(0);
        for &id in &members {
            self.track_peak(id, extra);
            if let Some(i) = self.cluster.instance_mut(id) {
                i.transforming = true;
                i.transform_target = Some(target);
                i.reserved_for_transform = false;
            }
        }
        let up = target > from;
        if up {
            self.scale_ups += 1;
        } else {
            self.scale_downs += 1;
        }
        self.stall_total += stall;
        let mut e = SimEvent::new(
            self.now,
            if up {
                EventKind::ScaleUp
            } else {
                EventKind::ScaleDown
            },
        );
        e.request = attached.map(|i| self.reqs[i].id);
        e.group = Some(members.clone());
        e.target_tp = Some(target);
        e.stall_s = Some(stall);
        self.log(e);
        let id = self.next_transform;
        self.next_transform += 1;
        self.transforms.insert(
            id,
            Transform {
                members,
                host,
                first_gpu,
                target,
                attached,
                assignment,
            },
        );
        self.push(self.now + stall, Ext::TransformDone(id));
        Ok(())
    }

    fn finish_transform(&mut self, id: u64) {
        let Some(tf) = self.transforms.remove(&id) else {
            return;
        };
        let mut olds = Vec::new();
        let mut jobs = Vec::new();
        for m in &tf.members {
            if let Some(pos) = self.cluster.instances.iter().position(|i| i.id == *m) {
                olds.push(self.cluster.instances.remove(pos));
            }
            jobs.extend(self.jobs.remove(m).unwrap_or_default());
        }
        let from = olds.first().map_or(1, |i| i.tp);
        let parts = if tf.target > from {
            1
        } else {
            from / tf.target
        };
        let base = self.cluster.next_id();
        let mut fresh: Vec<InstanceState> = (0..parts)
            .map(|k| {
                InstanceState::new(
                    base + k,
                    tf.host,
                    tf.first_gpu + k * tf.target,
                    tf.target,
                    self.perf,
                )
            })
            .collect();
        let mut fresh_jobs: Vec<Vec<Job>> = vec![Vec::new(); parts];
        for r in olds.iter().flat_map(|i| i.active_requests.iter()) {
            let k = if parts == 1 {
                0
            } else {
                tf.assignment.get(&r.id).copied().unwrap_or(0)
            };
            fresh[k].admit(r.id, r.tokens, r.long);
        }
        for j in jobs {
            let rid = self.reqs[j.idx].id;
            let k = if parts == 1 {
                0
            } else {
                tf.assignment.get(&rid).copied().unwrap_or(0)
            };
            fresh_jobs[k].push(j);
        }
        let new_ids: Vec<usize> = fresh.iter().map(|i| i.id).collect();
        for (inst, js) in fresh.into_iter().zip(fresh_jobs) {
            let iid = inst.id;
            self.cluster.instances.push(inst);
            if !js.is_empty() {
                self.jobs.insert(iid, js);
            }
            self.track_peak(iid, 0);
        }
        let mut e = SimEvent::new(self.now, EventKind::TransformDone);
        e.group = Some(new_ids.clone());
        e.target_tp = Some(tf.target);
        self.log(e);
        if let Some(idx) = tf.attached {
            if !self.admit(idx, new_ids[0]) {
                self.pending.insert(0, idx);
                self.note_wait(idx);
            }
        }
    }

    fn finish(self) -> SimOutput {
        let end = self.cfg.horizon_s.unwrap_or(self.now);
        let w = self.cfg.window_s;
        let count = if end > 0.0 {
            (end / w).ceil() as usize
        } else {
            0
        };
        let windows: Vec<Window> = (0..count)
            .map(|k| {
                let start = k as f64 * w;
                let stop = ((k + 1) as f64 * w).min(end);
                let tokens = self.window_tokens.get(k).copied().unwrap_or(0.0);
                Window {
                    start_s: start,
                    end_s: stop,
                    tokens,
                    throughput_tps: if stop > start {
                        tokens / (stop - start)
                    } else {
                        0.0
                    },
                }
            })
            .collect();
        let total: f64 = windows.iter().map(|w| w.tokens).sum();
        let metrics = MetricsRecord {
            requests: self.rec,
            windows,
            summary: Summary {
                throughput_tps_mean: if end > 0.0 { total / end } else { 0.0 },
                transformation_count: self.scale_ups + self.scale_downs,
                stall_total_s: self.stall_total,
                peak_gpu_bytes: self.peak_gpu,
            },
            scale_ups: self.scale_ups,
            scale_downs: self.scale_downs,
            decode_tokens: self.decode_tokens,
            prefill_tokens: self.prefill_tokens,
            end_s: end,
        };
        SimOutput {
            metrics,
            events: self.events,
        }
    }
}
