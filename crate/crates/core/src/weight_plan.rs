//! MLP weight footprints, alignment padding and weight repartitioning plans.
//!
//! A TP shard of an MLP tensor is a contiguous slice of its bytes: shard `k`
//! of `tp` covers `[k/tp, (k+1)/tp)` of the tensor. Whether a worker can drop
//! the part of a shard it no longer needs without copying depends on whether
//! the new shard boundaries fall on page boundaries.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::ranks;

/// Exact page count; integral iff the underlying bytes are page-aligned.
pub type PageCount = Ratio<u64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WeightError {
    #[error("tp {tp} does not divide the sharded dimension {dim} of {tensor}")]
    IndivisibleShard { tensor: String, tp: usize, dim: u64 },
    #[error("invalid transformation TP{from} -> TP{to}: {reason}")]
    InvalidTp {
        from: usize,
        to: usize,
        reason: String,
    },
    #[error(
        "{tensor} shard of worker {worker} is not page-aligned; in-place release needs padding"
    )]
    MisalignedWithoutPadding { tensor: String, worker: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    UpProj,
    GateUpProj,
    DownProj,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub hidden_size: u64,
    pub inter_size: u64,
    pub num_experts: u64,
    pub element_bytes: u64,
    pub role: TensorRole,
}

impl TensorSpec {
    pub fn new(name: &str, hidden: u64, inter: u64, experts: u64, role: TensorRole) -> Self {
        TensorSpec {
            name: name.to_string(),
            hidden_size: hidden,
            inter_size: inter,
            num_experts: experts,
            element_bytes: 2,
            role,
        }
    }

    /// Size of the dimension TP splits. A fused gate_up tensor counts both halves.
    pub fn sharded_dim(&self) -> u64 {
        match self.role {
            TensorRole::GateUpProj => 2 * self.inter_size,
            _ => self.inter_size,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.hidden_size * self.sharded_dim() * self.num_experts * self.element_bytes
    }

    fn check_tp(&self, tp: usize) -> Result<(), WeightError> {
        if tp == 0 || !self.inter_size.is_multiple_of(tp as u64) {
            return Err(WeightError::IndivisibleShard {
                tensor: self.name.clone(),
                tp,
                dim: self.inter_size,
            });
        }
        Ok(())
    }
}

/// Pages one TP shard of `spec` occupies, as an exact rational.
pub fn pages_per_tensor(
    spec: &TensorSpec,
    tp: usize,
    page_size: u64,
) -> Result<PageCount, WeightError> {
    spec.check_tp(tp)?;
    Ok(Ratio::new(spec.bytes(), tp as u64 * page_size))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadBoundary {
    pub index: usize,
    /// Position of the boundary as a fraction of the tensor.
    pub fraction: Ratio<u64>,
    /// Unpadded byte offset of the boundary.
    pub raw_offset: u64,
    /// Zero bytes inserted right after the data ending at this boundary.
    pub pad_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingPlan {
    pub tensor: TensorSpec,
    pub tp_set: Vec<usize>,
    pub page_size: u64,
    pub boundaries: Vec<PadBoundary>,
    pub total_pad_bytes: u64,
    pub unpadded_bytes: u64,
}

/// Byte extent of one shard inside a (possibly padded) tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardExtent {
    pub offset: u64,
    /// Length including trailing padding.
    pub len: u64,
    /// Real weight bytes in the shard.
    pub data: u64,
}

impl PaddingPlan {
    pub fn overhead_fraction(&self) -> f64 {
        self.total_pad_bytes as f64 / self.unpadded_bytes as f64
    }

    pub fn overhead_ratio(&self) -> Ratio<u64> {
        Ratio::new(self.total_pad_bytes, self.unpadded_bytes)
    }

    pub fn padded_bytes(&self) -> u64 {
        self.unpadded_bytes + self.total_pad_bytes
    }

    pub fn pad_bytes_at(&self, index: usize) -> Option<u64> {
        self.boundaries.get(index).map(|b| b.pad_bytes)
    }

    /// Padded offset of the boundary at `fraction`, including its own padding.
    fn padded_position(&self, fraction: Ratio<u64>) -> u64 {
        if fraction == Ratio::from_integer(0) {
            return 0;
        }
        let mut pos = 0;
        for b in &self.boundaries {
            pos = b.raw_offset
                + self.boundaries[..=b.index]
                    .iter()
                    .map(|x| x.pad_bytes)
                    .sum::<u64>();
            if b.fraction == fraction {
                return pos;
            }
        }
        debug_assert!(false, "fraction {fraction} is not a boundary");
        pos
    }

    pub fn shard_extent(&self, tp: usize, idx: usize) -> ShardExtent {
        let start = self.padded_position(Ratio::new(idx as u64, tp as u64));
        let end = self.padded_position(Ratio::new(idx as u64 + 1, tp as u64));
        ShardExtent {
            offset: start,
            len: end - start,
            data: self.unpadded_bytes / tp as u64,
        }
    }

    /// Padded page count of shard `idx` at `tp`.
    pub fn shard_pages(&self, tp: usize, idx: usize) -> PageCount {
        Ratio::new(self.shard_extent(tp, idx).len, self.page_size)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "tensor {} bytes {}",
            self.tensor.name, self.unpadded_bytes
        );
        let tps: Vec<String> = self.tp_set.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "tp_set {}", tps.join(","));
        let _ = writeln!(s, "page_size {}", self.page_size);
        for b in &self.boundaries {
            let _ = writeln!(
                s,
                "boundary {} at {} raw {} pad {}",
                b.index, b.fraction, b.raw_offset, b.pad_bytes
            );
        }
        let _ = writeln!(s, "total_pad {}", self.total_pad_bytes);
        let _ = writeln!(s, "overhead {}", self.overhead_ratio());
        s
    }
}

/// Distinct shard boundaries (as tensor fractions) over all degrees in `tp_set`,
/// excluding 0 and including 1.
fn boundary_fractions(tp_set: &[usize]) -> Vec<Ratio<u64>> {
    let set: BTreeSet<Ratio<u64>> = tp_set
        .iter()
        .flat_map(|&tp| (1..=tp as u64).map(move |k| Ratio::new(k, tp as u64)))
        .collect();
    set.into_iter().collect()
}

/// Minimal post-padding that page-aligns every shard boundary for every TP
/// degree in `tp_set`.
///
/// Each boundary takes the smallest pad that makes its padded offset a page
/// multiple given the pads before it. Cumulative padding at every boundary is
/// then the least value in its residue class, so the total is minimal.
pub fn make_padding_plan(
    spec: &TensorSpec,
    tp_set: &[usize],
    page_size: u64,
) -> Result<PaddingPlan, WeightError> {
    for &tp in tp_set {
        spec.check_tp(tp)?;
    }
    let total = spec.bytes();
    let mut tps: Vec<usize> = tp_set.to_vec();
    tps.sort_unstable();
    tps.dedup();
    let mut cumulative = 0u64;
    let mut boundaries = Vec::new();
    for (index, fraction) in boundary_fractions(&tps).into_iter().enumerate() {
        let raw_offset = total / fraction.denom() * fraction.numer();
        let pos = raw_offset + cumulative;
        let pad = (page_size - pos % page_size) % page_size;
        cumulative += pad;
        boundaries.push(PadBoundary {
            index,
            fraction,
            raw_offset,
            pad_bytes: pad,
        });
    }
    Ok(PaddingPlan {
        tensor: spec.clone(),
        tp_set: tps,
        page_size,
        boundaries,
        total_pad_bytes: cumulative,
        unpadded_bytes: total,
    })
}

/// Physical arrangement of a tensor: either packed, or padded at all shard
/// boundaries of its padding plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorLayout {
    Packed { bytes: u64 },
    Padded(PaddingPlan),
}

impl TensorLayout {
    pub fn extent(&self, tp: usize, idx: usize) -> ShardExtent {
        match self {
            TensorLayout::Packed { bytes } => {
                let len = bytes / tp as u64;
                ShardExtent {
                    offset: len * idx as u64,
                    len,
                    data: len,
                }
            }
            TensorLayout::Padded(p) => p.shard_extent(tp, idx),
        }
    }
}

/// Padding bytes summed over every MLP tensor of every layer, as a fraction of
/// the model's total weight bytes.
pub fn model_padding_overhead(
    model: &ModelConfig,
    tp_set: &[usize],
    page_size: u64,
) -> Result<f64, WeightError> {
    let mut pad = 0u64;
    for t in model.mlp_tensors() {
        pad += make_padding_plan(&t, tp_set, page_size)?.total_pad_bytes;
    }
    Ok((pad * model.num_layers as u64) as f64 / model.weight_bytes() as f64)
}

/// Bytes of weights one worker holds under conventional TP, where every
/// weight is split evenly.
pub fn static_weight_bytes(model: &ModelConfig, tp: usize) -> u64 {
    model.weight_bytes().div_ceil(tp as u64)
}

/// Page-rounded weight bytes one worker holds when MLP tensors are sharded
/// and everything else is replicated.
pub fn resident_weight_bytes(
    model: &ModelConfig,
    tp: usize,
    padded: bool,
    page_size: u64,
) -> Result<u64, WeightError> {
    let layouts = layer_layouts(model, padded, page_size)?;
    let mut pages = model.non_mlp_bytes().div_ceil(page_size);
    for (spec, layout) in model.mlp_tensors().iter().zip(&layouts) {
        spec.check_tp(tp)?;
        let shard = (0..tp).map(|k| layout.extent(tp, k).len).max().unwrap_or(0);
        pages += shard.div_ceil(page_size) * model.num_layers as u64;
    }
    Ok(pages * page_size)
}

fn layer_layouts(
    model: &ModelConfig,
    padded: bool,
    page_size: u64,
) -> Result<Vec<TensorLayout>, WeightError> {
    model
        .mlp_tensors()
        .iter()
        .map(|t| {
            Ok(if padded {
                TensorLayout::Padded(make_padding_plan(t, &model.supported_tp, page_size)?)
            } else {
                TensorLayout::Packed { bytes: t.bytes() }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    /// Release in place where aligned, copy unaligned remainders elsewhere.
    PartialSwap,
    /// Release in place only; misalignment is an error.
    InPlace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightTransformKind {
    WholeCopy,
    PartialSwap,
    InPlace,
}

/// One piece of a tensor's new page layout on a worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    /// Keep `pages` of the old allocation starting at page `first`.
    Keep { first: u64, pages: u64 },
    /// Fresh allocation of `bytes` (copied locally or received).
    Alloc { bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorOp {
    pub tensor: String,
    /// Pages of the tensor's allocation before the step.
    pub old_pages: u64,
    pub pieces: Vec<Piece>,
    pub copied_bytes: u64,
    pub received_bytes: u64,
    pub alloc_pages: u64,
    pub freed_pages: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerWeightOps {
    pub worker: usize,
    pub old_rank: usize,
    pub new_rank: usize,
    pub tensors: Vec<TensorOp>,
}

impl WorkerWeightOps {
    pub fn alloc_pages(&self) -> u64 {
        self.tensors.iter().map(|t| t.alloc_pages).sum()
    }
    pub fn freed_pages(&self) -> u64 {
        self.tensors.iter().map(|t| t.freed_pages).sum()
    }
    pub fn copied_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.copied_bytes).sum()
    }
    pub fn old_pages(&self) -> u64 {
        self.tensors.iter().map(|t| t.old_pages).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightTransformPlan {
    /// Layer index, or `None` for whole-model plans.
    pub layer: Option<usize>,
    pub kind: WeightTransformKind,
    pub tp_from: usize,
    pub tp_to: usize,
    pub page_size: u64,
    /// Local copies plus received bytes, summed over workers.
    pub copied_bytes: u64,
    pub received_bytes: u64,
    pub freed_pages: u64,
    pub alloc_pages: u64,
    /// Largest per-worker allocation made before old pages are released.
    pub extra_peak_bytes: u64,
    pub workers: Vec<WorkerWeightOps>,
}

impl WeightTransformPlan {
    fn from_workers(
        layer: Option<usize>,
        tp_from: usize,
        tp_to: usize,
        page_size: u64,
        workers: Vec<WorkerWeightOps>,
    ) -> Self {
        let copied: u64 = workers.iter().map(|w| w.copied_bytes()).sum();
        let received = workers
            .iter()
            .flat_map(|w| &w.tensors)
            .map(|t| t.received_bytes)
            .sum();
        let kind = if copied == 0 {
            WeightTransformKind::InPlace
        } else {
            WeightTransformKind::PartialSwap
        };
        WeightTransformPlan {
            layer,
            kind,
            tp_from,
            tp_to,
            page_size,
            copied_bytes: copied,
            received_bytes: received,
            freed_pages: workers.iter().map(|w| w.freed_pages()).sum(),
            alloc_pages: workers.iter().map(|w| w.alloc_pages()).sum(),
            extra_peak_bytes: workers
                .iter()
                .map(|w| w.alloc_pages() * page_size)
                .max()
                .unwrap_or(0),
            workers,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    /// Bytes crossing the interconnect.
    pub fn moved_bytes(&self) -> u64 {
        self.received_bytes
    }
}

fn check_pair(model: &ModelConfig, tp_from: usize, tp_to: usize) -> Result<(), WeightError> {
    let err = |reason: &str| WeightError::InvalidTp {
        from: tp_from,
        to: tp_to,
        reason: reason.to_string(),
    };
    if !ranks::compatible(tp_from, tp_to) {
        return Err(err("degrees must divide one another"));
    }
    for tp in [tp_from, tp_to] {
        if !model.supported_tp.contains(&tp) {
            return Err(err("degree not in the model's supported set"));
        }
    }
    Ok(())
}

fn scale_up_op(
    spec: &TensorSpec,
    layout: &TensorLayout,
    worker: usize,
    tp_from: usize,
    tp_to: usize,
    strategy: WeightStrategy,
    page: u64,
) -> Result<(TensorOp, usize, usize), WeightError> {
    let mv = ranks::rank_move(worker, tp_from, tp_to);
    let old = layout.extent(tp_from, mv.old_rank);
    let new = layout.extent(tp_to, mv.new_rank);
    let old_pages = old.len.div_ceil(page);
    let c = new.offset - old.offset;
    let d = c + new.len;
    let end_ok = d.is_multiple_of(page) || d == old.len;
    let (pieces, copied) = if c.is_multiple_of(page) && end_ok {
        let first = c / page;
        (
            vec![Piece::Keep {
                first,
                pages: d.div_ceil(page) - first,
            }],
            0,
        )
    } else if strategy == WeightStrategy::InPlace {
        return Err(WeightError::MisalignedWithoutPadding {
            tensor: spec.name.clone(),
            worker,
        });
    } else if c.is_multiple_of(page) {
        let first = c / page;
        let whole = d / page - first;
        let tail = d - (first + whole) * page;
        let mut p = Vec::new();
        if whole > 0 {
            p.push(Piece::Keep {
                first,
                pages: whole,
            });
        }
        p.push(Piece::Alloc { bytes: tail });
        (p, tail)
    } else {
        (vec![Piece::Alloc { bytes: new.len }], new.len)
    };
    Ok((
        finish_op(spec, old_pages, pieces, copied, 0, page),
        mv.old_rank,
        mv.new_rank,
    ))
}

fn finish_op(
    spec: &TensorSpec,
    old_pages: u64,
    pieces: Vec<Piece>,
    copied: u64,
    received: u64,
    page: u64,
) -> TensorOp {
    let kept: u64 = pieces
        .iter()
        .map(|p| match p {
            Piece::Keep { pages, .. } => *pages,
            Piece::Alloc { .. } => 0,
        })
        .sum();
    let alloc: u64 = pieces
        .iter()
        .map(|p| match p {
            Piece::Alloc { bytes } => bytes.div_ceil(page),
            Piece::Keep { .. } => 0,
        })
        .sum();
    TensorOp {
        tensor: spec.name.clone(),
        old_pages,
        pieces,
        copied_bytes: copied,
        received_bytes: received,
        alloc_pages: alloc,
        freed_pages: old_pages - kept,
    }
}

/// Weight plan for one layer when `tp_to / tp_from` instances merge.
pub fn plan_layer_scale_up(
    model: &ModelConfig,
    layer: usize,
    tp_from: usize,
    tp_to: usize,
    strategy: WeightStrategy,
    padded: bool,
    page_size: u64,
) -> Result<WeightTransformPlan, WeightError> {
    check_pair(model, tp_from, tp_to)?;
    if tp_to <= tp_from {
        return Err(WeightError::InvalidTp {
            from: tp_from,
            to: tp_to,
            reason: "scale-up needs a larger target degree".into(),
        });
    }
    let specs = model.mlp_tensors();
    let layouts = layer_layouts(model, padded, page_size)?;
    let mut workers = Vec::with_capacity(tp_to);
    for w in 0..tp_to {
        let mut tensors = Vec::new();
        let (mut old_rank, mut new_rank) = (0, 0);
        for (spec, layout) in specs.iter().zip(&layouts) {
            spec.check_tp(tp_to)?;
            let (op, o, n) = scale_up_op(spec, layout, w, tp_from, tp_to, strategy, page_size)?;
            tensors.push(op);
            (old_rank, new_rank) = (o, n);
        }
        workers.push(WorkerWeightOps {
            worker: w,
            old_rank,
            new_rank,
            tensors,
        });
    }
    Ok(WeightTransformPlan::from_workers(
        Some(layer),
        tp_from,
        tp_to,
        page_size,
        workers,
    ))
}

/// Per-layer weight plans for a scale-up, last layer first.
pub fn plan_weight_scale_up(
    model: &ModelConfig,
    tp_from: usize,
    tp_to: usize,
    strategy: WeightStrategy,
    padded: bool,
    page_size: u64,
) -> Result<Vec<WeightTransformPlan>, WeightError> {
    let template = plan_layer_scale_up(model, 0, tp_from, tp_to, strategy, padded, page_size)?;
    Ok(per_layer(model, template))
}

fn per_layer(model: &ModelConfig, template: WeightTransformPlan) -> Vec<WeightTransformPlan> {
    (0..model.num_layers)
        .rev()
        .map(|l| WeightTransformPlan {
            layer: Some(l),
            ..template.clone()
        })
        .collect()
}

/// Weight plan for one layer when one instance splits into `tp_from / tp_to`.
pub fn plan_layer_scale_down(
    model: &ModelConfig,
    layer: usize,
    tp_from: usize,
    tp_to: usize,
    padded: bool,
    page_size: u64,
) -> Result<WeightTransformPlan, WeightError> {
    check_pair(model, tp_from, tp_to)?;
    if tp_to > tp_from {
        return Err(WeightError::InvalidTp {
            from: tp_from,
            to: tp_to,
            reason: "scale-down needs a smaller target degree".into(),
        });
    }
    if tp_to == tp_from {
        return Ok(WeightTransformPlan::from_workers(
            Some(layer),
            tp_from,
            tp_to,
            page_size,
            Vec::new(),
        ));
    }
    let m = tp_from / tp_to;
    let specs = model.mlp_tensors();
    let layouts = layer_layouts(model, padded, page_size)?;
    let mut workers = Vec::with_capacity(tp_from);
    for w in 0..tp_from {
        let mv = ranks::rank_move(w, tp_from, tp_to);
        let mut tensors = Vec::new();
        for (spec, layout) in specs.iter().zip(&layouts) {
            spec.check_tp(tp_from)?;
            let new = layout.extent(tp_to, mv.new_rank);
            let parts: Vec<ShardExtent> = (mv.new_rank * m..(mv.new_rank + 1) * m)
                .map(|k| layout.extent(tp_from, k))
                .collect();
            let own = layout.extent(tp_from, mv.old_rank);
            let old_pages = own.len.div_ceil(page_size);
            let aligned = parts.iter().enumerate().all(|(i, p)| {
                (p.offset - new.offset) % page_size == 0
                    && (i + 1 == parts.len() || p.len % page_size == 0)
            });
            let received: u64 = parts
                .iter()
                .filter(|p| p.offset != own.offset)
                .map(|p| p.data)
                .sum();
            let op = if aligned {
                let pieces = parts
                    .iter()
                    .map(|p| {
                        if p.offset == own.offset {
                            Piece::Keep {
                                first: 0,
                                pages: old_pages,
                            }
                        } else {
                            Piece::Alloc { bytes: p.len }
                        }
                    })
                    .collect();
                finish_op(spec, old_pages, pieces, received, received, page_size)
            } else {
                let pieces = vec![Piece::Alloc { bytes: new.len }];
                finish_op(
                    spec,
                    old_pages,
                    pieces,
                    received + own.data,
                    received,
                    page_size,
                )
            };
            tensors.push(op);
        }
        workers.push(WorkerWeightOps {
            worker: w,
            old_rank: mv.old_rank,
            new_rank: mv.new_rank,
            tensors,
        });
    }
    Ok(WeightTransformPlan::from_workers(
        Some(layer),
        tp_from,
        tp_to,
        page_size,
        workers,
    ))
}

/// Per-layer weight plans for a scale-down, last layer first.
pub fn plan_weight_scale_down(
    model: &ModelConfig,
    tp_from: usize,
    tp_to: usize,
    padded: bool,
    page_size: u64,
) -> Result<Vec<WeightTransformPlan>, WeightError> {
    if tp_from == tp_to {
        return Ok(Vec::new());
    }
    let template = plan_layer_scale_down(model, 0, tp_from, tp_to, padded, page_size)?;
    Ok(per_layer(model, template))
}

/// The naive scale-up: every worker allocates its whole new shard of all
/// weights, copies into it, then releases the old copy.
pub fn plan_whole_copy_scale_up(
    model: &ModelConfig,
    tp_from: usize,
    tp_to: usize,
    page_size: u64,
) -> Result<WeightTransformPlan, WeightError> {
    check_pair(model, tp_from, tp_to)?;
    let new_bytes = static_weight_bytes(model, tp_to);
    let old_pages = static_weight_bytes(model, tp_from).div_ceil(page_size);
    let alloc = new_bytes.div_ceil(page_size);
    let workers: Vec<WorkerWeightOps> = (0..tp_to)
        .map(|w| {
            let mv = ranks::rank_move(w, tp_from, tp_to);
            WorkerWeightOps {
                worker: w,
                old_rank: mv.old_rank,
                new_rank: mv.new_rank,
                tensors: vec![TensorOp {
                    tensor: "all".into(),
                    old_pages,
                    pieces: vec![Piece::Alloc { bytes: new_bytes }],
                    copied_bytes: new_bytes,
                    received_bytes: 0,
                    alloc_pages: alloc,
                    freed_pages: old_pages,
                }],
            }
        })
        .collect();
    let mut plan = WeightTransformPlan::from_workers(None, tp_from, tp_to, page_size, workers);
    plan.kind = WeightTransformKind::WholeCopy;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::page_store::DEFAULT_PAGE_SIZE as P;

    fn r(n: u64, d: u64) -> PageCount {
        Ratio::new(n, d)
    }

    #[test]
    fn qwen_pages() {
        let t = TensorSpec::new("up", 5120, 27648, 1, TensorRole::UpProj);
        assert_eq!(pages_per_tensor(&t, 1, P).unwrap(), r(135, 1));
        assert_eq!(pages_per_tensor(&t, 4, P).unwrap(), r(135, 4));
    }

    #[test]
    fn gpt_oss_fused_is_double() {
        let up = TensorSpec::new("gu", 2880, 2880, 128, TensorRole::GateUpProj);
        let down = TensorSpec::new("d", 2880, 2880, 128, TensorRole::DownProj);
        assert_eq!(pages_per_tensor(&down, 1, P).unwrap(), r(2025, 2));
        assert_eq!(pages_per_tensor(&up, 1, P).unwrap(), r(2025, 1));
    }

    #[test]
    fn indivisible_tp_is_an_error() {
        let t = TensorSpec::new("x", 8, 6, 1, TensorRole::UpProj);
        assert!(pages_per_tensor(&t, 4, 4096).is_err());
    }

    #[test]
    fn qwen_padding_quarter_page_per_boundary() {
        let t = TensorSpec::new("up", 5120, 27648, 1, TensorRole::UpProj);
        let p = make_padding_plan(&t, &[1, 2, 4], P).unwrap();
        assert_eq!(p.boundaries.len(), 4);
        for b in &p.boundaries {
            assert_eq!(b.pad_bytes, 512 * 1024);
        }
        assert_eq!(p.overhead_ratio(), r(1, 135));
        for tp in [1, 2, 4] {
            for k in 0..tp {
                let e = p.shard_extent(tp, k);
                assert_eq!(e.offset % P, 0);
                assert_eq!(e.len % P, 0);
            }
        }
        assert_eq!(p.shard_pages(4, 3), r(34, 1));
    }

    #[test]
    fn aligned_tensor_needs_no_padding() {
        let t = TensorSpec::new("up", 8192, 28672, 1, TensorRole::UpProj);
        assert_eq!(
            make_padding_plan(&t, &[1, 2, 4], P)
                .unwrap()
                .total_pad_bytes,
            0
        );
    }

    #[test]
    fn padded_scale_up_frees_three_quarters_without_copy() {
        let m = presets::qwen2_5_32b();
        let plan = plan_layer_scale_up(&m, 0, 1, 4, WeightStrategy::InPlace, true, P).unwrap();
        assert_eq!(plan.copied_bytes, 0);
        assert_eq!(plan.extra_peak_bytes, 0);
        for w in &plan.workers {
            for t in &w.tensors {
                assert_eq!(t.old_pages, 136);
                assert_eq!(t.freed_pages, 102);
            }
        }
    }

    #[test]
    fn unpadded_misaligned_in_place_fails() {
        let m = presets::qwen2_5_32b();
        let e = plan_layer_scale_up(&m, 0, 1, 4, WeightStrategy::InPlace, false, P).unwrap_err();
        assert!(matches!(e, WeightError::MisalignedWithoutPadding { .. }));
    }

    #[test]
    fn partial_swap_copies_remainders() {
        let m = presets::qwen2_5_32b();
        let plan = plan_layer_scale_up(&m, 0, 1, 4, WeightStrategy::PartialSwap, false, P).unwrap();
        assert_eq!(plan.kind, WeightTransformKind::PartialSwap);
        assert!(plan.copied_bytes > 0);
        assert!(plan.extra_peak_bytes > 0);
    }

    #[test]
    fn aligned_llama70b_in_place_without_padding() {
        let m = presets::llama3_1_70b();
        let plan = plan_layer_scale_up(&m, 0, 1, 4, WeightStrategy::InPlace, false, P).unwrap();
        assert_eq!(plan.copied_bytes, 0);
    }

    #[test]
    fn scale_down_identity_is_empty() {
        let m = presets::qwen2_5_32b();
        assert!(plan_weight_scale_down(&m, 4, 4, true, P)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn scale_down_receives_missing_shards() {
        let m = presets::qwen2_5_32b();
        let plan = plan_layer_scale_down(&m, 0, 4, 1, true, P).unwrap();
        let per_layer = m.mlp_bytes_per_layer();
        for w in &plan.workers {
            let rec: u64 = w.tensors.iter().map(|t| t.received_bytes).sum();
            assert_eq!(rec, per_layer / 4 * 3);
            assert_eq!(w.freed_pages(), 0);
        }
        assert_eq!(plan.copied_bytes, plan.received_bytes);
    }

    #[test]
    fn unpadded_scale_down_reassembles() {
        let m = presets::qwen2_5_32b();
        let plan = plan_layer_scale_down(&m, 0, 4, 1, false, P).unwrap();
        assert!(plan.copied_bytes > plan.received_bytes);
        assert!(plan
            .workers
            .iter()
            .all(|w| w.freed_pages() == w.old_pages()));
    }

    #[test]
    fn whole_copy_peak() {
        let m = presets::qwen2_5_32b();
        let plan = plan_whole_copy_scale_up(&m, 1, 4, P).unwrap();
        let gb = plan.extra_peak_bytes as f64 / 1e9;
        assert!((gb - 15.58).abs() < 0.1, "{gb}");
    }

    #[test]
    fn padding_text_lists_boundaries() {
        let t = TensorSpec::new("up", 5120, 27648, 1, TensorRole::UpProj);
        let text = make_padding_plan(&t, &[1, 2], P).unwrap().to_text();
        assert!(text.contains("boundary 0 at 1/2"));
        assert!(text.contains("overhead 1/135"));
    }
}
