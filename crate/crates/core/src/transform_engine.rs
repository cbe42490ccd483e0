//! Layer-by-layer orchestration of a TP transformation.
//!
//! Layers are processed from the last to the first, MLP weights before KV
//! cache within a layer, and at most `stagger_width` layers per decode step.
//! Because only a suffix of layers has switched at any time, an in-flight
//! forward pass changes parallelism exactly once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv_layout::{
    apply_migration, plan_migration, plan_migration_trim_with, retained_headers, KvError, KvLayout,
    KvStore, MigrationPlan, MigrationSpec,
};
use crate::model::ModelConfig;
use crate::page_store::{PageError, PageRange, PageSpace, Usage};
use crate::ranks;
use crate::weight_plan::{
    plan_layer_scale_down, plan_layer_scale_up, Piece, TensorLayout, WeightError, WeightStrategy,
    WeightTransformPlan,
};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("incompatible group: {0}")]
    IncompatibleGroup(String),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Page(#[from] PageError),
    #[error("transformation aborted after {completed_layers} layers: {source}")]
    Aborted {
        completed_layers: usize,
        source: Box<TransformError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Bytes per second per worker link.
    pub interconnect_bandwidth: f64,
    /// Synchronization cost of one all-to-all stage, seconds.
    pub per_stage_latency: f64,
    /// Cost of one batch of map/unmap calls, seconds.
    pub driver_call_cost: f64,
    /// Share of transformation time hidden behind decode compute.
    pub overlap_fraction: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            interconnect_bandwidth: 200e9,
            per_stage_latency: 5e-6,
            driver_call_cost: 20e-6,
            overlap_fraction: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), TransformError> {
        if !(self.interconnect_bandwidth > 0.0) {
            return Err(TransformError::IncompatibleGroup(
                "bandwidth must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(TransformError::IncompatibleGroup(
                "overlap fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn stall(&self, bytes: u64, stages: usize, driver_batches: usize) -> f64 {
        (1.0 - self.overlap_fraction)
            * (bytes as f64 / self.interconnect_bandwidth
                + stages as f64 * self.per_stage_latency
                + driver_batches as f64 * self.driver_call_cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ScaleUp,
    ScaleDown,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mlp,
    Kv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum StepAction {
    Weights(Arc<WeightTransformPlan>),
    Kv(Arc<MigrationPlan>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    pub layer: usize,
    pub phase: Phase,
    pub action: StepAction,
    /// Decode step (relative to the start) at which this step may run.
    pub earliest_step: usize,
    /// Bytes crossing the interconnect plus local copies.
    pub bytes_moved: u64,
    /// Pages newly mapped on the busiest worker before old ones are released.
    pub extra_bytes: u64,
    pub stall: f64,
}

/// Requests of the instances being transformed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupSpec {
    pub tp_from: usize,
    pub tp_to: usize,
    /// `(request, tokens)` held by each old instance, in group order.
    pub instances: Vec<Vec<(u64, u64)>>,
    /// Split only: request -> new instance.
    pub assignment: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvStrategy {
    InPlace,
    Trim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformOptions {
    pub stagger_width: usize,
    /// All-to-all stages per layer; `None` uses twice the target degree.
    pub kv_stages: Option<usize>,
    pub padded: bool,
    pub weights: WeightStrategy,
    pub kv: KvStrategy,
    pub tokens_per_block: u32,
    pub page_size: u64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        TransformOptions {
            stagger_width: 1,
            kv_stages: None,
            padded: true,
            weights: WeightStrategy::InPlace,
            kv: KvStrategy::InPlace,
            tokens_per_block: 16,
            page_size: crate::page_store::DEFAULT_PAGE_SIZE,
        }
    }
}

impl TransformOptions {
    /// Unpadded partial swap plus migrate-and-trim.
    pub fn baseline() -> Self {
        TransformOptions {
            padded: false,
            weights: WeightStrategy::PartialSwap,
            kv: KvStrategy::Trim,
            ..Default::default()
        }
    }

    pub fn kv_layout(&self, model: &ModelConfig) -> KvLayout {
        let make = match self.kv {
            KvStrategy::InPlace => KvLayout::header_centric,
            KvStrategy::Trim => KvLayout::page_friendly,
        };
        make(
            self.tokens_per_block,
            model.num_kv_heads as u32,
            model.head_dim as u32,
            model.element_bytes as u32,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformationPlan {
    pub direction: Direction,
    pub tp_from: usize,
    pub tp_to: usize,
    pub num_layers: usize,
    pub stagger_width: usize,
    pub steps: Vec<Step>,
    /// Largest extra allocation among steps sharing one decode step, per worker.
    pub peak_extra_bytes: Vec<u64>,
}

impl TransformationPlan {
    pub fn empty(tp: usize, num_layers: usize) -> Self {
        TransformationPlan {
            direction: Direction::Identity,
            tp_from: tp,
            tp_to: tp,
            num_layers,
            stagger_width: 1,
            steps: Vec::new(),
            peak_extra_bytes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn per_step_stall(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.stall).collect()
    }

    /// Decode steps the transformation spans.
    pub fn span_steps(&self) -> usize {
        self.steps.last().map_or(0, |s| s.earliest_step + 1)
    }

    /// Checks the ordering rules; returns a description of the first violation.
    pub fn check_order(&self) -> Result<(), String> {
        let mut last_layer: Option<usize> = None;
        let mut per_step: BTreeMap<usize, usize> = BTreeMap::new();
        let mut i = 0;
        while i < self.steps.len() {
            let layer = self.steps[i].layer;
            if let Some(prev) = last_layer {
                if layer >= prev {
                    return Err(format!("step {i}: layer {layer} after layer {prev}"));
                }
            }
            let mut j = i;
            while j < self.steps.len() && self.steps[j].layer == layer {
                j += 1;
            }
            let phases: Vec<Phase> = self.steps[i..j].iter().map(|s| s.phase).collect();
            if self.direction == Direction::ScaleUp && phases != [Phase::Mlp, Phase::Kv] {
                return Err(format!("layer {layer}: phases {phases:?}"));
            }
            if let Some(s) = self.steps[i..j].iter().find(|s| s.phase == Phase::Mlp) {
                *per_step.entry(s.earliest_step).or_default() += 1;
            }
            last_layer = Some(layer);
            i = j;
        }
        if let Some((step, n)) = per_step.iter().find(|(_, n)| **n > self.stagger_width) {
            return Err(format!("decode step {step} carries {n} layers"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "transformation {:?} tp {}->{} layers {} stagger {} steps {}",
            self.direction,
            self.tp_from,
            self.tp_to,
            self.num_layers,
            self.stagger_width,
            self.steps.len()
        );
        for st in &self.steps {
            let _ = writeln!(
                s,
                "  L{} {:?} at {} moved {} extra {} stall {:.9}",
                st.layer, st.phase, st.earliest_step, st.bytes_moved, st.extra_bytes, st.stall
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostSummary {
    pub total_stall: f64,
    pub weight_bytes_moved: u64,
    pub kv_bytes_moved: u64,
    pub steps: usize,
}

pub fn transformation_cost_summary(plan: &TransformationPlan) -> CostSummary {
    let mut s = CostSummary {
        steps: plan.steps.len(),
        ..Default::default()
    };
    for st in &plan.steps {
        s.total_stall += st.stall;
        match st.phase {
            Phase::Mlp => s.weight_bytes_moved += st.bytes_moved,
            Phase::Kv => s.kv_bytes_moved += st.bytes_moved,
        }
    }
    s
}

fn weight_step_cost(plan: &WeightTransformPlan, cost: &CostModel) -> (u64, f64) {
    let mut worst_bytes = 0;
    let mut worst_batches = 0;
    for w in &plan.workers {
        worst_bytes = worst_bytes.max(w.copied_bytes());
        let batches = usize::from(w.freed_pages() > 0) + usize::from(w.alloc_pages() > 0);
        worst_batches = worst_batches.max(batches);
    }
    (plan.copied_bytes, cost.stall(worst_bytes, 0, worst_batches))
}

fn kv_step_cost(plan: &MigrationPlan, cost: &CostModel) -> (u64, f64) {
    let n = plan.workers();
    let mut bytes_on_path = 0u64;
    let mut batches = 0usize;
    for st in &plan.stages {
        let mut recv = vec![0u64; n];
        for t in &st.transfers {
            recv[t.dst] += t.bytes;
        }
        bytes_on_path += recv.iter().copied().max().unwrap_or(0);
        batches += 1 + usize::from(st.new_pages.iter().any(|&p| p > 0));
    }
    let trim = plan.trim_copies.iter().copied().max().unwrap_or(0);
    if trim > 0 {
        batches += 1;
    }
    let moved = plan.moved_bytes() + plan.trim_copies_total();
    (
        moved,
        cost.stall(bytes_on_path + trim, plan.stages.len(), batches),
    )
}

/// One KV store per worker of the group, as the group holds them before the
/// transformation. Built in scratch page spaces; only the layout matters.
pub fn template_stores(
    model: &ModelConfig,
    group: &GroupSpec,
    opts: &TransformOptions,
) -> Result<Vec<KvStore>, TransformError> {
    let layout = opts.kv_layout(model);
    let heads = layout.num_headers;
    let n = ranks::group_size(group.tp_from, group.tp_to);
    let mut stores = Vec::with_capacity(n);
    for w in 0..n {
        let mv = ranks::rank_move(w, group.tp_from, group.tp_to);
        let held = retained_headers(mv.old_rank + 1, heads, group.tp_from)?;
        let reqs = &group.instances[mv.old_instance];
        let blocks: u64 = reqs
            .iter()
            .map(|(_, t)| t.div_ceil(opts.tokens_per_block as u64))
            .sum();
        let bytes = blocks * layout.bytes_for_headers(held.len()) + 2 * opts.page_size;
        let mut scratch = PageSpace::new(bytes.next_multiple_of(opts.page_size), opts.page_size);
        let mut store = KvStore::new(w, layout, held, opts.page_size);
        for &(r, t) in reqs {
            if t > 0 {
                store.append_tokens(&mut scratch, r, t)?;
            }
        }
        stores.push(store);
    }
    Ok(stores)
}

fn check_group(
    model: &ModelConfig,
    group: &GroupSpec,
    opts: &TransformOptions,
) -> Result<Direction, TransformError> {
    let (from, to) = (group.tp_from, group.tp_to);
    let bad = |m: String| Err(TransformError::IncompatibleGroup(m));
    if opts.stagger_width == 0 {
        return bad("stagger width must be at least 1".into());
    }
    if !ranks::compatible(from, to) {
        return bad(format!("TP{from} and TP{to} do not divide"));
    }
    for tp in [from, to] {
        if !model.supported_tp.contains(&tp) {
            return bad(format!("TP{tp} not supported by {}", model.name));
        }
    }
    let expected = if to >= from { to / from } else { 1 };
    if group.instances.len() != expected {
        return bad(format!(
            "TP{from}->TP{to} needs {expected} source instances, got {}",
            group.instances.len()
        ));
    }
    if !model
        .num_kv_heads
        .is_multiple_of(ranks::group_size(from, to) as u64)
    {
        return bad(format!(
            "{} KV heads do not split {}-ways",
            model.num_kv_heads,
            to.max(from)
        ));
    }
    Ok(match to.cmp(&from) {
        std::cmp::Ordering::Greater => Direction::ScaleUp,
        std::cmp::Ordering::Less => Direction::ScaleDown,
        std::cmp::Ordering::Equal => Direction::Identity,
    })
}

/// Build the ordered step list for transforming `group`.
pub fn build_plan(
    group: &GroupSpec,
    model: &ModelConfig,
    cost: &CostModel,
    opts: &TransformOptions,
) -> Result<TransformationPlan, TransformError> {
    cost.validate()?;
    let direction = check_group(model, group, opts)?;
    let (from, to) = (group.tp_from, group.tp_to);
    if direction == Direction::Identity {
        return Ok(TransformationPlan::empty(from, model.num_layers));
    }
    let weights = Arc::new(match direction {
        Direction::ScaleUp => plan_layer_scale_up(
            model,
            0,
            from,
            to,
            opts.weights,
            opts.padded,
            opts.page_size,
        )?,
        _ => plan_layer_scale_down(model, 0, from, to, opts.padded, opts.page_size)?,
    });
    let stores = template_stores(model, group, opts)?;
    let stages = opts.kv_stages.unwrap_or(2 * to).max(1);
    let spec = MigrationSpec::new(from, to, stages).with_assignment(group.assignment.clone());
    let kv = Arc::new(match opts.kv {
        KvStrategy::InPlace => plan_migration(&stores, &spec)?,
        KvStrategy::Trim => plan_migration_trim_with(&stores, &spec)?,
    });
    let (w_bytes, w_stall) = weight_step_cost(&weights, cost);
    let (k_bytes, k_stall) = kv_step_cost(&kv, cost);
    let n = ranks::group_size(from, to);
    let w_extra: Vec<u64> = (0..n)
        .map(|w| {
            weights
                .workers
                .get(w)
                .map_or(0, |o| o.alloc_pages() * opts.page_size)
        })
        .collect();
    let mut steps = Vec::with_capacity(2 * model.num_layers);
    let mut per_step_extra: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (ordinal, layer) in (0..model.num_layers).rev().enumerate() {
        let at = ordinal / opts.stagger_width;
        let acc = per_step_extra.entry(at).or_insert_with(|| vec![0; n]);
        for w in 0..n {
            acc[w] += w_extra[w] + kv.peak_extra_bytes[w];
        }
        steps.push(Step {
            layer,
            phase: Phase::Mlp,
            action: StepAction::Weights(weights.clone()),
            earliest_step: at,
            bytes_moved: w_bytes,
            extra_bytes: weights.extra_peak_bytes,
            stall: w_stall,
        });
        steps.push(Step {
            layer,
            phase: Phase::Kv,
            action: StepAction::Kv(kv.clone()),
            earliest_step: at,
            bytes_moved: k_bytes,
            extra_bytes: kv.peak_extra_max(),
            stall: k_stall,
        });
    }
    let mut peak = vec![0u64; n];
    for v in per_step_extra.values() {
        for w in 0..n {
            peak[w] = peak[w].max(v[w]);
        }
    }
    Ok(TransformationPlan {
        direction,
        tp_from: from,
        tp_to: to,
        num_layers: model.num_layers,
        stagger_width: opts.stagger_width,
        steps,
        peak_extra_bytes: peak,
    })
}

/// Page-level state of every worker in a transforming group.
#[derive(Debug, Clone)]
pub struct GroupState {
    pub spaces: Vec<PageSpace>,
    /// `[layer][worker][tensor]` page ranges of each MLP tensor shard.
    pub weights: Vec<Vec<Vec<Vec<PageRange>>>>,
    /// `[layer][worker]` KV stores.
    pub kv: Vec<Vec<KvStore>>,
    /// Current TP degree of each layer.
    pub layer_tp: Vec<usize>,
}

impl GroupState {
    /// Lay out `group` as it exists before the transformation: replicated
    /// non-MLP weights, MLP shards per `opts.padded`, and KV for every layer.
    pub fn load(
        model: &ModelConfig,
        group: &GroupSpec,
        opts: &TransformOptions,
        capacity_bytes: u64,
    ) -> Result<Self, TransformError> {
        let from = group.tp_from;
        let n = ranks::group_size(from, group.tp_to);
        let page = opts.page_size;
        let layouts: Vec<TensorLayout> = model
            .mlp_tensors()
            .iter()
            .map(|t| {
                Ok(if opts.padded {
                    TensorLayout::Padded(crate::weight_plan::make_padding_plan(
                        t,
                        &model.supported_tp,
                        page,
                    )?)
                } else {
                    TensorLayout::Packed { bytes: t.bytes() }
                })
            })
            .collect::<Result<_, WeightError>>()?;
        let mut spaces: Vec<PageSpace> = (0..n)
            .map(|_| PageSpace::new(capacity_bytes, page))
            .collect();
        for (w, sp) in spaces.iter_mut().enumerate() {
            sp.alloc(
                model.non_mlp_bytes().max(1),
                format!("w{w}/dense"),
                Usage::Weights,
            )?;
        }
        let mut weights = vec![vec![Vec::new(); n]; model.num_layers];
        for (l, layer) in weights.iter_mut().enumerate() {
            for (w, slot) in layer.iter_mut().enumerate() {
                let rank = ranks::rank_move(w, from, group.tp_to).old_rank;
                for (i, layout) in layouts.iter().enumerate() {
                    let len = layout.extent(from, rank).len;
                    let r = spaces[w].alloc(len, format!("w{w}/L{l}/t{i}"), Usage::Weights)?;
                    slot.push(vec![r]);
                }
            }
        }
        let template = template_stores(model, group, opts)?;
        let mut kv = Vec::with_capacity(model.num_layers);
        for _ in 0..model.num_layers {
            let mut layer = Vec::with_capacity(n);
            for (w, t) in template.iter().enumerate() {
                let mut s = KvStore::new(w, t.layout, t.held(), page);
                for (r, tokens) in t.requests() {
                    s.append_tokens(&mut spaces[w], r, tokens)?;
                }
                layer.push(s);
            }
            kv.push(layer);
        }
        Ok(GroupState {
            spaces,
            weights,
            kv,
            layer_tp: vec![from; model.num_layers],
        })
    }

    /// Number of TP changes met walking the layers front to back.
    pub fn parallelism_switches(&self) -> usize {
        self.layer_tp.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn high_water_marks(&self) -> Vec<u64> {
        self.spaces.iter().map(PageSpace::high_water_mark).collect()
    }
}

/// Pages `[first, first + pages)` of an allocation made of `ranges`.
fn slice_ranges(ranges: &[PageRange], first: u64, pages: u64) -> Vec<PageRange> {
    let mut out = Vec::new();
    let (mut skip, mut want) = (first as usize, pages as usize);
    for r in ranges {
        if want == 0 {
            break;
        }
        if skip >= r.length {
            skip -= r.length;
            continue;
        }
        let take = (r.length - skip).min(want);
        out.push(r.sub_range(skip, take));
        want -= take;
        skip = 0;
    }
    out
}

fn apply_weights(
    plan: &WeightTransformPlan,
    layer: usize,
    state: &mut GroupState,
) -> Result<(), TransformError> {
    let page = plan.page_size;
    for op in &plan.workers {
        let w = op.worker;
        let mut new_layout = Vec::with_capacity(op.tensors.len());
        let mut release = Vec::new();
        for (i, t) in op.tensors.iter().enumerate() {
            let old = &state.weights[layer][w][i];
            let old_pages: usize = old.iter().map(|r| r.length).sum();
            if old_pages as u64 != t.old_pages {
                return Err(KvError::PlanMismatch(format!(
                    "layer {layer} worker {w} tensor {i}: {old_pages} pages, plan expects {}",
                    t.old_pages
                ))
                .into());
            }
            let mut kept = vec![false; old_pages];
            let mut ranges = Vec::new();
            for piece in &t.pieces {
                match *piece {
                    Piece::Keep { first, pages } => {
                        kept[first as usize..(first + pages) as usize].fill(true);
                        ranges.extend(slice_ranges(old, first, pages));
                    }
                    Piece::Alloc { bytes } => {
                        let tag = format!("w{w}/L{layer}/t{i}");
                        ranges.push(state.spaces[w].alloc(bytes.max(1), tag, Usage::Weights)?);
                    }
                }
            }
            let mut p = 0;
            while p < old_pages {
                if kept[p] {
                    p += 1;
                    continue;
                }
                let q = (p..old_pages).find(|&q| kept[q]).unwrap_or(old_pages);
                release.extend(slice_ranges(old, p as u64, (q - p) as u64));
                p = q;
            }
            new_layout.push(ranges);
        }
        for r in release {
            state.spaces[w].unmap(&r)?;
        }
        state.weights[layer][w] = new_layout;
        debug_assert!(page > 0);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub completed_layers: usize,
    /// `(decode step, stall seconds)` per executed plan step.
    pub stall_schedule: Vec<(usize, f64)>,
    pub high_water_marks: Vec<u64>,
}

/// Run `plan` against `state`. A layer is atomic: if any of its steps fails,
/// that layer is restored and the error reports how many layers finished.
pub fn execute_plan(
    plan: &TransformationPlan,
    state: &mut GroupState,
    current_step: usize,
) -> Result<ExecutionReport, TransformError> {
    let mut report = ExecutionReport {
        completed_layers: 0,
        stall_schedule: Vec::new(),
        high_water_marks: Vec::new(),
    };
    let mut i = 0;
    while i < plan.steps.len() {
        let layer = plan.steps[i].layer;
        let mut j = i;
        while j < plan.steps.len() && plan.steps[j].layer == layer {
            j += 1;
        }
        let spaces = state.spaces.clone();
        let weights = state.weights[layer].clone();
        let kv = state.kv[layer].clone();
        let mut result = Ok(());
        for st in &plan.steps[i..j] {
            result = match &st.action {
                StepAction::Weights(p) => apply_weights(p, layer, state),
                StepAction::Kv(p) => apply_migration(p, &mut state.kv[layer], &mut state.spaces)
                    .map_err(TransformError::from),
            };
            if result.is_err() {
                break;
            }
        }
        if let Err(e) = result {
            state.spaces = spaces;
            state.weights[layer] = weights;
            state.kv[layer] = kv;
            report.high_water_marks = state.high_water_marks();
            return Err(TransformError::Aborted {
                completed_layers: report.completed_layers,
                source: Box::new(e),
            });
        }
        for st in &plan.steps[i..j] {
            report
                .stall_schedule
                .push((current_step + st.earliest_step, st.stall));
        }
        state.layer_tp[layer] = plan.tp_to;
        report.completed_layers += 1;
        i = j;
    }
    report.high_water_marks = state.high_water_marks();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::page_store::GB;

    fn up_group(tokens: u64) -> GroupSpec {
        GroupSpec {
            tp_from: 1,
            tp_to: 4,
            instances: (0..4).map(|i| vec![(i as u64 + 1, tokens)]).collect(),
            assignment: BTreeMap::new(),
        }
    }

    #[test]
    fn identity_is_empty() {
        let m = presets::qwen2_5_32b();
        let g = GroupSpec {
            tp_from: 2,
            tp_to: 2,
            instances: vec![vec![]],
            ..Default::default()
        };
        let p = build_plan(&g, &m, &CostModel::default(), &TransformOptions::default()).unwrap();
        assert!(p.is_empty());
        assert_eq!(transformation_cost_summary(&p), CostSummary::default());
    }

    #[test]
    fn qwen_scale_up_order() {
        let m = presets::qwen2_5_32b();
        let p = build_plan(
            &up_group(256),
            &m,
            &CostModel::default(),
            &TransformOptions::default(),
        )
        .unwrap();
        assert_eq!(p.steps.len(), 128);
        assert_eq!((p.steps[0].layer, p.steps[0].phase), (63, Phase::Mlp));
        assert_eq!((p.steps[1].layer, p.steps[1].phase), (63, Phase::Kv));
        p.check_order().unwrap();
        assert_eq!(transformation_cost_summary(&p).weight_bytes_moved, 0);
    }

    #[test]
    fn full_overlap_hides_stall() {
        let m = presets::qwen2_5_32b();
        let cost = CostModel {
            overlap_fraction: 1.0,
            ..Default::default()
        };
        let p = build_plan(&up_group(256), &m, &cost, &TransformOptions::default()).unwrap();
        assert_eq!(transformation_cost_summary(&p).total_stall, 0.0);
    }

    #[test]
    fn wrong_instance_count_rejected() {
        let m = presets::qwen2_5_32b();
        let mut g = up_group(16);
        g.instances.pop();
        assert!(matches!(
            build_plan(&g, &m, &CostModel::default(), &TransformOptions::default()),
            Err(TransformError::IncompatibleGroup(_))
        ));
    }

    #[test]
    fn execute_switches_once_and_frees_weights() {
        let m = presets::llama2_7b();
        let g = up_group(64);
        let opts = TransformOptions::default();
        let mut state = GroupState::load(&m, &g, &opts, 40 * GB).unwrap();
        let before = state.spaces[0].memory_report().mapped_weights;
        let p = build_plan(&g, &m, &CostModel::default(), &opts).unwrap();
        let rep = execute_plan(&p, &mut state, 10).unwrap();
        assert_eq!(rep.completed_layers, 32);
        assert_eq!(state.parallelism_switches(), 0);
        assert!(state.layer_tp.iter().all(|&t| t == 4));
        assert!(state.spaces[0].memory_report().mapped_weights < before);
        assert_eq!(rep.stall_schedule[0].0, 10);
    }

    #[test]
    fn oom_rolls_back_the_failing_layer() {
        let m = presets::llama2_7b();
        let g = GroupSpec {
            tp_from: 4,
            tp_to: 1,
            instances: vec![vec![(1, 32), (2, 32)]],
            ..Default::default()
        };
        let opts = TransformOptions::default();
        let mut state = GroupState::load(&m, &g, &opts, 12 * GB).unwrap();
        let p = build_plan(&g, &m, &CostModel::default(), &opts).unwrap();
        let err = execute_plan(&p, &mut state, 0).unwrap_err();
        let TransformError::Aborted {
            completed_layers, ..
        } = err
        else {
            panic!("expected abort, got {err}");
        };
        assert!(completed_layers < 32);
        let switched = state.layer_tp.iter().filter(|&&t| t == 1).count();
        assert_eq!(switched, completed_layers);
        assert!(state.parallelism_switches() <= 1);
    }
}
