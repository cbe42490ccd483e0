//! Head-partitioned KV migration between TP degrees.
//!
//! On a merge, worker `w` keeps the header group of its new rank for its own
//! requests and sends every other group to the worker that will own it. On a
//! split, each worker gathers its header group of the requests assigned to
//! its new instance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::store::{Fragment, KvStore};
use super::{retained_headers, HeaderRange, KvError};
use crate::page_store::{PageSpace, Usage};
use crate::ranks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationKind {
    /// Phased all-to-all into freed slots; header-centric layout only.
    InPlace,
    /// Receive into new pages, then compact retained headers.
    Trim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMove {
    pub request: u64,
    pub block: u32,
    pub tokens: u32,
    pub headers: HeaderRange,
    pub src_slot: usize,
    /// Destination slot; for trim plans, the index in the receive buffer.
    pub dst_slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub headers: Vec<HeaderRange>,
    pub moves: Vec<ChunkMove>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stage {
    /// Ordered by `(src, dst)`.
    pub transfers: Vec<Transfer>,
    /// Slots each worker frees once the stage completes, as `(worker, slots)`.
    pub freed_after: Vec<(usize, Vec<usize>)>,
    /// Pages each worker maps before the stage to hold incoming data.
    pub new_pages: Vec<usize>,
}

impl Stage {
    pub fn bytes(&self) -> u64 {
        self.transfers.iter().map(|t| t.bytes).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub kind: MigrationKind,
    pub tp_from: usize,
    pub tp_to: usize,
    /// Headers per moved chunk.
    pub width: u32,
    pub chunk_bytes: u64,
    pub page_size: u64,
    pub stages: Vec<Stage>,
    /// Bytes each worker copies locally to compact retained headers.
    pub trim_copies: Vec<u64>,
    /// Pages each worker maps for receiving (trim plans).
    pub receive_pages: Vec<usize>,
    /// Pages each worker's KV region holds before the migration.
    pub initial_pages: Vec<usize>,
    pub peak_extra_bytes: Vec<u64>,
    /// Header range each worker holds for new blocks afterwards.
    pub final_held: Vec<HeaderRange>,
}

impl MigrationPlan {
    pub fn workers(&self) -> usize {
        self.peak_extra_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.iter().all(|s| s.transfers.is_empty())
    }

    pub fn trim_copies_total(&self) -> u64 {
        self.trim_copies.iter().sum()
    }

    pub fn moved_bytes(&self) -> u64 {
        self.stages.iter().map(Stage::bytes).sum()
    }

    pub fn peak_extra_max(&self) -> u64 {
        self.peak_extra_bytes.iter().copied().max().unwrap_or(0)
    }

    /// Bytes each worker receives over the whole plan.
    pub fn received_by(&self, worker: usize) -> u64 {
        self.stages
            .iter()
            .flat_map(|s| &s.transfers)
            .filter(|t| t.dst == worker)
            .map(|t| t.bytes)
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.kind {
            MigrationKind::InPlace => "in_place",
            MigrationKind::Trim => "trim",
        };
        let _ = writeln!(
            s,
            "kv-migration {kind} tp {}->{} width {} chunk_bytes {} stages {}",
            self.tp_from,
            self.tp_to,
            self.width,
            self.chunk_bytes,
            self.stages.len()
        );
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(s, "stage {}", i + 1);
            for (w, p) in st.new_pages.iter().enumerate() {
                if *p > 0 {
                    let _ = writeln!(s, "  map w{w} pages {p}");
                }
            }
            for t in &st.transfers {
                let hs: Vec<String> = t.headers.iter().map(|h| h.to_string()).collect();
                let _ = writeln!(
                    s,
                    "  transfer w{}->w{} bytes {} headers {} chunks {}",
                    t.src,
                    t.dst,
                    t.bytes,
                    hs.join(","),
                    t.moves.len()
                );
            }
            for (w, slots) in &st.freed_after {
                let _ = writeln!(s, "  freed w{w} slots {}", runs(slots));
            }
        }
        for w in 0..self.workers() {
            let _ = writeln!(
                s,
                "worker w{w} held {} trim_copies {} receive_pages {} peak_extra {}",
                self.final_held[w],
                self.trim_copies[w],
                self.receive_pages[w],
                self.peak_extra_bytes[w]
            );
        }
        s
    }
}

fn runs(slots: &[usize]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < slots.len() {
        let mut j = i;
        while j + 1 < slots.len() && slots[j + 1] == slots[j] + 1 {
            j += 1;
        }
        out.push(if i == j {
            slots[i].to_string()
        } else {
            format!("{}-{}", slots[i], slots[j])
        });
        i = j + 1;
    }
    out.join(",")
}

/// Parameters of a migration beyond the stores themselves.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MigrationSpec {
    pub tp_from: usize,
    pub tp_to: usize,
    pub stages: usize,
    /// Split only: request -> new instance. Missing requests are placed by a
    /// largest-first balanced split.
    pub assignment: BTreeMap<u64, usize>,
    /// Free bytes per worker available for stage buffers.
    pub budget: Option<Vec<u64>>,
}

impl MigrationSpec {
    pub fn new(tp_from: usize, tp_to: usize, stages: usize) -> Self {
        MigrationSpec {
            tp_from,
            tp_to,
            stages,
            ..Default::default()
        }
    }

    pub fn with_assignment(mut self, assignment: BTreeMap<u64, usize>) -> Self {
        self.assignment = assignment;
        self
    }

    pub fn with_budget(mut self, free_bytes: Vec<u64>) -> Self {
        self.budget = Some(free_bytes);
        self
    }
}

/// Everything the planners share: validated inputs and the owner mapping.
struct Setup {
    from: usize,
    to: usize,
    width: u32,
    heads: u32,
    assignment: BTreeMap<u64, usize>,
}

impl Setup {
    fn new(stores: &[KvStore], spec: &MigrationSpec) -> Result<Self, KvError> {
        let (from, to) = (spec.tp_from, spec.tp_to);
        if !ranks::compatible(from, to) {
            return Err(KvError::PlanMismatch(format!(
                "cannot move TP{from} -> TP{to}"
            )));
        }
        let n = ranks::group_size(from, to);
        if stores.len() != n {
            return Err(KvError::GroupSize {
                expected: n,
                got: stores.len(),
            });
        }
        let heads = stores[0].layout.num_headers;
        let g = n as u32;
        if !heads.is_multiple_of(g) {
            return Err(KvError::IndivisibleHeads { heads, tp: n });
        }
        for (w, s) in stores.iter().enumerate() {
            let rank = ranks::rank_move(w, from, to).old_rank;
            let expect = retained_headers(rank + 1, heads, from)?;
            if s.held() != expect || s.layout.num_headers != heads {
                return Err(KvError::PlanMismatch(format!(
                    "worker {w} holds {} but TP{from} rank {rank} should hold {expect}",
                    s.held()
                )));
            }
        }
        let mut assignment = BTreeMap::new();
        if to < from {
            let m = from / to;
            let mut missing = BTreeMap::new();
            for (r, t) in stores[0].requests() {
                match spec.assignment.get(&r) {
                    Some(&g) if g < m => {
                        assignment.insert(r, g);
                    }
                    _ => {
                        missing.insert(r, t);
                    }
                }
            }
            assignment.extend(ranks::lpt_split(&missing, m));
        }
        Ok(Setup {
            from,
            to,
            width: heads / g,
            heads,
            assignment,
        })
    }

    /// Worker that owns `f` (one chunk of `width` headers) afterwards.
    fn target(&self, f: &Fragment) -> usize {
        let c = (f.headers.start / self.width) as usize;
        if self.to >= self.from {
            ranks::worker_for(0, c, self.from, self.to)
        } else {
            let m = self.from / self.to;
            ranks::worker_for(self.assignment[&f.request], c / m, self.from, self.to)
        }
    }

    fn final_held(&self, worker: usize) -> HeaderRange {
        let mv = ranks::rank_move(worker, self.from, self.to);
        retained_headers(mv.new_rank + 1, self.heads, self.to).expect("validated heads")
    }

    fn identity(&self, stores: &[KvStore], kind: MigrationKind, page_size: u64) -> MigrationPlan {
        let n = stores.len();
        MigrationPlan {
            kind,
            tp_from: self.from,
            tp_to: self.to,
            width: self.width,
            chunk_bytes: stores[0].layout.bytes_for_headers(self.width),
            page_size,
            stages: Vec::new(),
            trim_copies: vec![0; n],
            receive_pages: vec![0; n],
            initial_pages: stores.iter().map(KvStore::region_pages).collect(),
            peak_extra_bytes: vec![0; n],
            final_held: stores.iter().map(KvStore::held).collect(),
        }
    }
}

/// All chunk moves `(src, dst) -> moves`, with `dst_slot` unset.
fn collect_moves(setup: &Setup, views: &[KvStore]) -> BTreeMap<(usize, usize), Vec<ChunkMove>> {
    let mut pairs: BTreeMap<(usize, usize), Vec<ChunkMove>> = BTreeMap::new();
    for (src, store) in views.iter().enumerate() {
        for p in store.placed() {
            for headers in p.fragment.headers.chunks(setup.width) {
                let f = Fragment {
                    headers,
                    ..p.fragment
                };
                let dst = setup.target(&f);
                if dst != src {
                    pairs.entry((src, dst)).or_default().push(ChunkMove {
                        request: f.request,
                        block: f.block,
                        tokens: f.tokens,
                        headers,
                        src_slot: p.slot,
                        dst_slot: usize::MAX,
                    });
                }
            }
        }
    }
    for moves in pairs.values_mut() {
        moves.sort_by_key(|m| (m.request, m.block, m.headers, m.src_slot));
    }
    pairs
}

/// Split `n` items into `s` consecutive parts, larger parts first.
fn part_bounds(n: usize, s: usize) -> Vec<(usize, usize)> {
    let (base, rem) = (n / s, n % s);
    let mut out = Vec::with_capacity(s);
    let mut start = 0;
    for i in 0..s {
        let len = base + usize::from(i < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Slot pool of one worker's region, mirroring [`KvStore`] growth.
struct Pool {
    free: BTreeSet<usize>,
    slot_count: usize,
    region_bytes: u64,
    slot_bytes: u64,
    page_size: u64,
}

impl Pool {
    fn of(store: &KvStore) -> Self {
        Pool {
            free: store.free_slots().clone(),
            slot_count: store.slot_count(),
            region_bytes: store.region_bytes(),
            slot_bytes: store.slot_bytes(),
            page_size: store.page_size(),
        }
    }

    /// Grow so `extra` more slots exist; returns pages mapped.
    fn grow(&mut self, extra: usize) -> usize {
        let want = self.slot_count + extra;
        let need = want as u64 * self.slot_bytes;
        let mut pages = 0;
        if need > self.region_bytes {
            pages = (need - self.region_bytes).div_ceil(self.page_size) as usize;
            self.region_bytes += pages as u64 * self.page_size;
        }
        let cap = (self.region_bytes / self.slot_bytes) as usize;
        self.free.extend(self.slot_count..cap);
        self.slot_count = cap;
        pages
    }

    fn take(&mut self) -> usize {
        let s = *self.free.iter().next().expect("pool grown before take");
        self.free.remove(&s);
        s
    }
}

/// Phased in-place migration over header-centric stores.
///
/// Each `(src, dst)` chunk list is cut into `spec.stages` parts; stage `k`
/// sends part `k` of every list. Incoming chunks fill slots freed by earlier
/// stages and fall back to newly mapped pages, so only the first stage needs a
/// dedicated buffer on balanced inputs.
pub fn plan_migration(stores: &[KvStore], spec: &MigrationSpec) -> Result<MigrationPlan, KvError> {
    if spec.stages == 0 {
        return Err(KvError::NoStages);
    }
    if stores.iter().any(|s| !s.layout.is_header_centric()) {
        return Err(KvError::NotHeaderCentric);
    }
    let setup = Setup::new(stores, spec)?;
    let page_size = stores[0].page_size();
    let mut plan = setup.identity(stores, MigrationKind::InPlace, page_size);
    if setup.from == setup.to {
        return Ok(plan);
    }
    let views: Vec<KvStore> = stores
        .iter()
        .map(|s| {
            let mut v = s.clone();
            v.refine(setup.width);
            v
        })
        .collect();
    let chunk_bytes = views[0].slot_bytes();
    let pairs = collect_moves(&setup, &views);
    let mut pools: Vec<Pool> = views.iter().map(Pool::of).collect();
    let initial: Vec<u64> = pools.iter().map(|p| p.region_bytes).collect();
    let n = stores.len();
    let split: BTreeMap<(usize, usize), Vec<(usize, usize)>> = pairs
        .iter()
        .map(|(k, v)| (*k, part_bounds(v.len(), spec.stages)))
        .collect();
    for k in 0..spec.stages {
        let mut stage = Stage {
            new_pages: vec![0; n],
            ..Default::default()
        };
        let mut incoming = vec![0usize; n];
        for ((_, dst), b) in &split {
            incoming[*dst] += b[k].1 - b[k].0;
        }
        for (w, pool) in pools.iter_mut().enumerate() {
            let short = incoming[w].saturating_sub(pool.free.len());
            if short > 0 {
                stage.new_pages[w] = pool.grow(short);
            }
        }
        let mut freed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for ((src, dst), moves) in &pairs {
            let (a, b) = split[&(*src, *dst)][k];
            if a == b {
                continue;
            }
            let mut part: Vec<ChunkMove> = moves[a..b].to_vec();
            let mut headers = BTreeSet::new();
            for m in &mut part {
                m.dst_slot = pools[*dst].take();
                headers.insert(m.headers);
                freed.entry(*src).or_default().push(m.src_slot);
            }
            stage.transfers.push(Transfer {
                src: *src,
                dst: *dst,
                bytes: part.len() as u64 * chunk_bytes,
                headers: headers.into_iter().collect(),
                moves: part,
            });
        }
        for (w, mut slots) in freed {
            slots.sort_unstable();
            pools[w].free.extend(slots.iter().copied());
            stage.freed_after.push((w, slots));
        }
        plan.stages.push(stage);
    }
    if let Some(budget) = &spec.budget {
        for w in 0..n {
            let needed = pools[w].region_bytes - initial[w];
            let free = budget.get(w).copied().unwrap_or(0);
            if needed > free {
                return Err(KvError::InsufficientStageBuffer {
                    worker: w,
                    needed,
                    free,
                });
            }
        }
    }
    plan.chunk_bytes = chunk_bytes;
    plan.peak_extra_bytes = (0..n).map(|w| pools[w].region_bytes - initial[w]).collect();
    plan.final_held = (0..n).map(|w| setup.final_held(w)).collect();
    Ok(plan)
}

/// In-place migration from `tp_from` to `tp_to` in `stages` stages.
pub fn plan_migration_inplace(
    stores: &[KvStore],
    tp_from: usize,
    tp_to: usize,
    stages: usize,
) -> Result<MigrationPlan, KvError> {
    plan_migration(stores, &MigrationSpec::new(tp_from, tp_to, stages))
}

/// Baseline: every worker maps pages for everything it receives, then
/// compacts the headers it keeps so they no longer leave holes.
pub fn plan_migration_trim(
    stores: &[KvStore],
    tp_from: usize,
    tp_to: usize,
) -> Result<MigrationPlan, KvError> {
    plan_migration_trim_with(stores, &MigrationSpec::new(tp_from, tp_to, 1))
}

pub fn plan_migration_trim_with(
    stores: &[KvStore],
    spec: &MigrationSpec,
) -> Result<MigrationPlan, KvError> {
    let setup = Setup::new(stores, spec)?;
    let page_size = stores[0].page_size();
    let mut plan = setup.identity(stores, MigrationKind::Trim, page_size);
    if setup.from == setup.to {
        return Ok(plan);
    }
    let n = stores.len();
    let chunk_bytes = stores[0].layout.bytes_for_headers(setup.width);
    let pairs = collect_moves(&setup, stores);
    let mut stage = Stage {
        new_pages: vec![0; n],
        ..Default::default()
    };
    let mut next = vec![0usize; n];
    for ((src, dst), moves) in &pairs {
        let mut part = moves.clone();
        let mut headers = BTreeSet::new();
        for m in &mut part {
            m.dst_slot = next[*dst];
            next[*dst] += 1;
            headers.insert(m.headers);
        }
        stage.transfers.push(Transfer {
            src: *src,
            dst: *dst,
            bytes: part.len() as u64 * chunk_bytes,
            headers: headers.into_iter().collect(),
            moves: part,
        });
    }
    for w in 0..n {
        let pages = (next[w] as u64 * chunk_bytes).div_ceil(page_size) as usize;
        stage.new_pages[w] = pages;
        plan.receive_pages[w] = pages;
        plan.peak_extra_bytes[w] = pages as u64 * page_size;
        let held = setup.final_held(w);
        if held.len() < stores[w].held().len() {
            let retained_chunks = stores[w]
                .placed()
                .flat_map(|p| p.fragment.headers.chunks(setup.width).collect::<Vec<_>>())
                .filter(|h| held.contains(h))
                .count();
            plan.trim_copies[w] = retained_chunks as u64 * chunk_bytes;
        }
        plan.final_held[w] = held;
    }
    plan.chunk_bytes = chunk_bytes;
    plan.stages.push(stage);
    Ok(plan)
}

/// Carry out `plan` on `stores`, charging pages in `spaces` (one per worker).
pub fn apply_migration(
    plan: &MigrationPlan,
    stores: &mut [KvStore],
    spaces: &mut [PageSpace],
) -> Result<(), KvError> {
    if stores.len() != plan.workers() || spaces.len() != stores.len() {
        return Err(KvError::GroupSize {
            expected: plan.workers(),
            got: stores.len().min(spaces.len()),
        });
    }
    if plan.tp_from == plan.tp_to {
        return Ok(());
    }
    match plan.kind {
        MigrationKind::InPlace => apply_inplace(plan, stores, spaces),
        MigrationKind::Trim => apply_trim(plan, stores, spaces),
    }
}

fn check_move(store: &KvStore, m: &ChunkMove) -> Result<Fragment, KvError> {
    let f = store.fragment_at(m.src_slot).ok_or_else(|| {
        KvError::PlanMismatch(format!(
            "worker {} slot {} is empty",
            store.worker, m.src_slot
        ))
    })?;
    if f.request != m.request || f.block != m.block || !f.headers.contains(&m.headers) {
        return Err(KvError::PlanMismatch(format!(
            "worker {} slot {} holds request {} block {}",
            store.worker, m.src_slot, f.request, f.block
        )));
    }
    Ok(*f)
}

fn apply_inplace(
    plan: &MigrationPlan,
    stores: &mut [KvStore],
    spaces: &mut [PageSpace],
) -> Result<(), KvError> {
    for s in stores.iter_mut() {
        s.refine(plan.width);
    }
    for stage in &plan.stages {
        let mut arriving = Vec::new();
        for t in &stage.transfers {
            for m in &t.moves {
                let f = check_move(&stores[t.src], m)?;
                stores[t.src].take(m.src_slot);
                arriving.push((t.dst, m.dst_slot, f));
            }
        }
        for (dst, slot, f) in arriving {
            stores[dst].put(&mut spaces[dst], slot, f)?;
        }
    }
    for (w, s) in stores.iter_mut().enumerate() {
        s.set_held(plan.final_held[w]);
        s.recount_blocks();
    }
    Ok(())
}

fn apply_trim(
    plan: &MigrationPlan,
    stores: &mut [KvStore],
    spaces: &mut [PageSpace],
) -> Result<(), KvError> {
    let n = stores.len();
    let mut outgoing: Vec<BTreeSet<(usize, HeaderRange)>> = vec![BTreeSet::new(); n];
    let mut incoming: Vec<Vec<(usize, Fragment)>> = vec![Vec::new(); n];
    for stage in &plan.stages {
        for t in &stage.transfers {
            for m in &t.moves {
                let f = check_move(&stores[t.src], m)?;
                outgoing[t.src].insert((m.src_slot, m.headers));
                incoming[t.dst].push((
                    m.dst_slot,
                    Fragment {
                        headers: m.headers,
                        ..f
                    },
                ));
            }
        }
    }
    let mut buffers = Vec::with_capacity(n);
    for w in 0..n {
        let pages = plan.receive_pages[w];
        buffers.push(if pages > 0 {
            vec![spaces[w].alloc(pages as u64 * plan.page_size, stores[w].tag(), Usage::Kv)?]
        } else {
            Vec::new()
        });
    }
    for (w, buffer) in buffers.into_iter().enumerate() {
        let kept: Vec<Fragment> = stores[w]
            .placed()
            .flat_map(|p| {
                p.fragment
                    .headers
                    .chunks(plan.width)
                    .filter(|h| !outgoing[w].contains(&(p.slot, *h)))
                    .map(|headers| Fragment {
                        headers,
                        ..p.fragment
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut arriving = std::mem::take(&mut incoming[w]);
        arriving.sort_by_key(|(slot, _)| *slot);
        let extra = arriving.into_iter().map(|(_, f)| f).collect();
        stores[w].compact(&mut spaces[w], plan.width, kept, extra, buffer)?;
        stores[w].set_held(plan.final_held[w]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_layout::KvLayout;
    use crate::page_store::KIB;

    const PAGE: u64 = 4 * KIB;

    fn group(n: usize, h: u32, tokens: &[u64]) -> (Vec<KvStore>, Vec<PageSpace>) {
        let layout = KvLayout::header_centric(4, h, 8, 2);
        let mut stores = Vec::new();
        let mut spaces = Vec::new();
        for w in 0..n {
            let mut sp = PageSpace::new(16 * 1024 * KIB, PAGE);
            let mut s = KvStore::new(w, layout, HeaderRange::all(h), PAGE);
            s.append_tokens(&mut sp, w as u64 + 1, tokens[w]).unwrap();
            stores.push(s);
            spaces.push(sp);
        }
        (stores, spaces)
    }

    #[test]
    fn part_bounds_front_loaded() {
        assert_eq!(part_bounds(7, 3), vec![(0, 3), (3, 5), (5, 7)]);
        assert_eq!(part_bounds(2, 4), vec![(0, 1), (1, 2), (2, 2), (2, 2)]);
    }

    #[test]
    fn runs_compress() {
        assert_eq!(runs(&[1, 3, 4, 5, 9]), "1,3-5,9");
    }

    #[test]
    fn identity_plan_is_empty() {
        let (stores, _) = group(1, 8, &[40]);
        let p = plan_migration_inplace(&stores, 1, 1, 4).unwrap();
        assert!(p.is_empty());
        let t = plan_migration_trim(&stores, 1, 1).unwrap();
        assert_eq!(t.trim_copies_total(), 0);
    }

    #[test]
    fn figure_seven_scenario() {
        let (mut stores, mut spaces) = group(4, 8, &[10, 12, 7, 16]);
        let plan = plan_migration_inplace(&stores, 1, 4, 2).unwrap();
        apply_migration(&plan, &mut stores, &mut spaces).unwrap();
        let w1: BTreeSet<u64> = stores[0].placed().map(|p| p.fragment.request).collect();
        assert_eq!(w1, [1, 2, 3, 4].into_iter().collect());
        for p in stores[0].placed() {
            assert_eq!(p.fragment.headers, HeaderRange::new(0, 2));
        }
        assert_eq!(stores[0].held().to_string(), "H1-H2");
    }

    #[test]
    fn trim_compacts_retained() {
        let (stores, _) = group(4, 8, &[16, 16, 16, 16]);
        let t = plan_migration_trim(&stores, 1, 4).unwrap();
        let local = stores[0].used_bytes();
        for w in 0..4 {
            assert_eq!(t.trim_copies[w], local / 4);
            assert_eq!(t.received_by(w), 3 * local / 4);
        }
        let p = plan_migration_inplace(&stores, 1, 4, 4).unwrap();
        assert_eq!(p.trim_copies_total(), 0);
    }

    #[test]
    fn wrong_layout_rejected() {
        let layout = KvLayout::page_friendly(4, 8, 8, 2);
        let stores: Vec<KvStore> = (0..2)
            .map(|w| KvStore::new(w, layout, HeaderRange::all(8), PAGE))
            .collect();
        assert_eq!(
            plan_migration_inplace(&stores, 1, 2, 2).unwrap_err(),
            KvError::NotHeaderCentric
        );
        assert!(matches!(
            plan_migration_inplace(&stores[..1], 1, 2, 2),
            Err(KvError::NotHeaderCentric) | Err(KvError::GroupSize { .. })
        ));
    }

    #[test]
    fn budget_too_small() {
        let (stores, _) = group(2, 8, &[64, 64]);
        let spec = MigrationSpec::new(1, 2, 1).with_budget(vec![0, 0]);
        assert!(matches!(
            plan_migration(&stores, &spec),
            Err(KvError::InsufficientStageBuffer { .. })
        ));
    }

    #[test]
    fn split_gathers_assigned_requests() {
        let (mut stores, mut spaces) = group(2, 8, &[16, 16]);
        let up = plan_migration_inplace(&stores, 1, 2, 2).unwrap();
        apply_migration(&up, &mut stores, &mut spaces).unwrap();
        let before: Vec<_> = {
            let mut all: Vec<_> = stores.iter().flat_map(|s| s.cells()).collect();
            all.sort();
            all
        };
        let down = plan_migration(
            &stores,
            &MigrationSpec::new(2, 1, 2).with_assignment([(1, 1), (2, 0)].into_iter().collect()),
        )
        .unwrap();
        apply_migration(&down, &mut stores, &mut spaces).unwrap();
        let reqs: Vec<BTreeSet<u64>> = stores
            .iter()
            .map(|s| s.placed().map(|p| p.fragment.request).collect())
            .collect();
        assert_eq!(reqs[0], [2].into_iter().collect());
        assert_eq!(reqs[1], [1].into_iter().collect());
        let mut after: Vec<_> = stores.iter().flat_map(|s| s.cells()).collect();
        after.sort();
        assert_eq!(before, after);
        assert!(stores.iter().all(|s| s.held() == HeaderRange::all(8)));
    }

    #[test]
    fn text_form_is_stable() {
        let (stores, _) = group(2, 4, &[4, 4]);
        let plan = plan_migration_inplace(&stores, 1, 2, 1).unwrap();
        let text = plan.to_text();
        assert_eq!(
            text,
            "kv-migration in_place tp 1->2 width 2 chunk_bytes 256 stages 1\n\
             stage 1\n  \
             transfer w0->w1 bytes 256 headers H3-H4 chunks 1\n  \
             transfer w1->w0 bytes 256 headers H1-H2 chunks 1\n  \
             freed w0 slots 1\n  \
             freed w1 slots 0\n\
             worker w0 held H1-H2 trim_copies 0 receive_pages 0 peak_extra 0\n\
             worker w1 held H3-H4 trim_copies 0 receive_pages 0 peak_extra 0\n"
        );
    }
}
