use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{HeaderRange, KvError, KvLayout};
use crate::page_store::{PageRange, PageSpace, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub request: u64,
    pub block: u32,
}

/// The part of one KV block held in one slot: `tokens` tokens of block
/// `block` of `request`, for the headers in `headers`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fragment {
    pub request: u64,
    pub block: u32,
    pub tokens: u32,
    pub headers: HeaderRange,
}

impl Fragment {
    pub fn key(&self) -> BlockKey {
        BlockKey {
            request: self.request,
            block: self.block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placed {
    pub slot: usize,
    pub fragment: Fragment,
}

/// One stored value: K (`kv = 0`) or V (`kv = 1`) of one header of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub request: u64,
    pub token: u32,
    pub header: u32,
    pub kv: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AppendResult {
    pub new_blocks: usize,
    pub new_pages: usize,
    /// Existing bytes moved to make room.
    pub shift_bytes: u64,
}

impl std::ops::AddAssign for AppendResult {
    fn add_assign(&mut self, o: Self) {
        self.new_blocks += o.new_blocks;
        self.new_pages += o.new_pages;
        self.shift_bytes += o.shift_bytes;
    }
}

/// One worker's KV cache for one layer.
///
/// The store's region is a virtually contiguous run of equal-size slots backed
/// by page ranges in the worker's [`PageSpace`]. Each slot holds one fragment
/// covering `slot_headers` headers of one block.
#[derive(Debug, Clone)]
pub struct KvStore {
    pub worker: usize,
    /// Layout of a full block; `num_headers` is the model's header count.
    pub layout: KvLayout,
    held: HeaderRange,
    slot_headers: u32,
    slots: BTreeMap<usize, Fragment>,
    free: BTreeSet<usize>,
    slot_count: usize,
    backing: Vec<PageRange>,
    region_bytes: u64,
    page_size: u64,
    blocks: usize,
}

impl KvStore {
    /// Empty store whose new blocks cover `held` headers.
    pub fn new(worker: usize, layout: KvLayout, held: HeaderRange, page_size: u64) -> Self {
        KvStore {
            worker,
            layout,
            held,
            slot_headers: held.len(),
            slots: BTreeMap::new(),
            free: BTreeSet::new(),
            slot_count: 0,
            backing: Vec::new(),
            region_bytes: 0,
            page_size,
            blocks: 0,
        }
    }

    pub fn tag(&self) -> String {
        format!("kv/w{}", self.worker)
    }

    pub fn held(&self) -> HeaderRange {
        self.held
    }

    pub fn slot_headers(&self) -> u32 {
        self.slot_headers
    }

    pub fn slot_bytes(&self) -> u64 {
        self.layout.bytes_for_headers(self.slot_headers)
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn placed(&self) -> impl Iterator<Item = Placed> + '_ {
        self.slots
            .iter()
            .map(|(&slot, &fragment)| Placed { slot, fragment })
    }

    pub fn fragment_at(&self, slot: usize) -> Option<&Fragment> {
        self.slots.get(&slot)
    }

    pub fn fragment_count(&self) -> usize {
        self.slots.len()
    }

    pub fn free_slots(&self) -> &BTreeSet<usize> {
        &self.free
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn backing(&self) -> &[PageRange] {
        &self.backing
    }

    pub fn region_bytes(&self) -> u64 {
        self.region_bytes
    }

    pub fn region_pages(&self) -> usize {
        (self.region_bytes / self.page_size) as usize
    }

    /// Bytes of slots holding data.
    pub fn used_bytes(&self) -> u64 {
        self.slots.len() as u64 * self.slot_bytes()
    }

    pub fn block_count(&self) -> usize {
        self.blocks
    }

    /// Tokens stored per request.
    pub fn requests(&self) -> BTreeMap<u64, u64> {
        let mut seen: BTreeMap<BlockKey, u32> = BTreeMap::new();
        for f in self.slots.values() {
            seen.insert(f.key(), f.tokens);
        }
        let mut out = BTreeMap::new();
        for (k, t) in seen {
            *out.entry(k.request).or_insert(0) += t as u64;
        }
        out
    }

    /// PageSpace page index backing `slot`'s first byte.
    pub fn slot_page(&self, slot: usize) -> Option<usize> {
        let mut offset = slot as u64 * self.slot_bytes();
        for r in &self.backing {
            let bytes = r.bytes(self.page_size);
            if offset < bytes {
                return Some(r.start_page + (offset / self.page_size) as usize);
            }
            offset -= bytes;
        }
        None
    }

    /// Every stored cell, sorted.
    pub fn cells(&self) -> Vec<Cell> {
        let tpb = self.layout.tokens_per_block;
        let mut out = Vec::new();
        for f in self.slots.values() {
            for t in 0..f.tokens {
                for h in f.headers.iter() {
                    for kv in 0..2 {
                        out.push(Cell {
                            request: f.request,
                            token: f.block * tpb + t,
                            header: h,
                            kv,
                        });
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Extend the region with new pages until it holds at least `slots` slots.
    pub(crate) fn grow_to(
        &mut self,
        space: &mut PageSpace,
        slots: usize,
    ) -> Result<usize, KvError> {
        if slots <= self.slot_count {
            return Ok(0);
        }
        let need = slots as u64 * self.slot_bytes();
        let mut pages = 0;
        if need > self.region_bytes {
            let range = space.alloc(need - self.region_bytes, self.tag(), Usage::Kv)?;
            pages = range.length;
            self.region_bytes += range.bytes(self.page_size);
            self.backing.push(range);
        }
        let cap = (self.region_bytes / self.slot_bytes()) as usize;
        self.free.extend(self.slot_count..cap);
        self.slot_count = cap;
        Ok(pages)
    }

    fn take_free_slots(
        &mut self,
        space: &mut PageSpace,
        n: usize,
    ) -> Result<(Vec<usize>, usize), KvError> {
        let mut pages = 0;
        if self.free.len() < n {
            let short = n - self.free.len();
            pages = self.grow_to(space, self.slot_count + short)?;
        }
        let picked: Vec<usize> = self.free.iter().take(n).copied().collect();
        for s in &picked {
            self.free.remove(s);
        }
        Ok((picked, pages))
    }

    fn next_block(&self, request: u64) -> (u32, Option<(u32, Vec<usize>)>) {
        let mut last: Option<(u32, u32)> = None;
        let mut slots = Vec::new();
        for (&s, f) in &self.slots {
            if f.request != request {
                continue;
            }
            match last {
                Some((b, _)) if b > f.block => {}
                Some((b, _)) if b == f.block => slots.push(s),
                _ => {
                    last = Some((f.block, f.tokens));
                    slots = vec![s];
                }
            }
        }
        match last {
            None => (0, None),
            Some((b, t)) => (b + 1, Some((t, slots))),
        }
    }

    /// Append one block of `tokens` tokens to `request`.
    pub fn append_block(
        &mut self,
        space: &mut PageSpace,
        request: u64,
        tokens: u32,
    ) -> Result<AppendResult, KvError> {
        let tpb = self.layout.tokens_per_block;
        if tokens == 0 || tokens > tpb {
            return Err(KvError::BlockOverflow {
                max: tpb,
                got: tokens,
            });
        }
        let (block, _) = self.next_block(request);
        let chunks: Vec<HeaderRange> = self.held.chunks(self.slot_headers).collect();
        let (slots, new_pages) = self.take_free_slots(space, chunks.len())?;
        for (slot, headers) in slots.into_iter().zip(chunks) {
            self.slots.insert(
                slot,
                Fragment {
                    request,
                    block,
                    tokens,
                    headers,
                },
            );
        }
        // Raw layout keeps all K before all V, so the V half of every
        // existing block slides to make room for the new block's K half.
        let shift_bytes = if self.layout.is_page_friendly() {
            0
        } else {
            self.blocks as u64 * self.layout.bytes_for_headers(self.held.len()) / 2
        };
        self.blocks += 1;
        Ok(AppendResult {
            new_blocks: 1,
            new_pages,
            shift_bytes,
        })
    }

    /// Append `tokens` tokens to `request`, topping up its last block first.
    pub fn append_tokens(
        &mut self,
        space: &mut PageSpace,
        request: u64,
        mut tokens: u64,
    ) -> Result<AppendResult, KvError> {
        let tpb = self.layout.tokens_per_block;
        let mut res = AppendResult::default();
        if let (_, Some((filled, slots))) = self.next_block(request) {
            if filled < tpb && tokens > 0 {
                let add = (tpb - filled).min(tokens as u32);
                for s in slots {
                    if let Some(f) = self.slots.get_mut(&s) {
                        f.tokens += add;
                    }
                }
                tokens -= add as u64;
            }
        }
        while tokens > 0 {
            let n = tokens.min(tpb as u64) as u32;
            res += self.append_block(space, request, n)?;
            tokens -= n as u64;
        }
        Ok(res)
    }

    /// Drop a request's fragments; their slots become free.
    pub fn release_request(&mut self, request: u64) -> usize {
        let slots: Vec<usize> = self
            .slots
            .iter()
            .filter(|(_, f)| f.request == request)
            .map(|(&s, _)| s)
            .collect();
        let keys: BTreeSet<BlockKey> = slots.iter().map(|s| self.slots[s].key()).collect();
        for s in &slots {
            self.slots.remove(s);
            self.free.insert(*s);
        }
        self.blocks -= keys.len().min(self.blocks);
        slots.len()
    }

    /// Return every backing page to `space`.
    pub fn release_all(&mut self, space: &mut PageSpace) -> Result<usize, KvError> {
        let mut n = 0;
        for r in self.backing.drain(..) {
            n += space.unmap(&r)?;
        }
        self.slots.clear();
        self.free.clear();
        self.slot_count = 0;
        self.region_bytes = 0;
        self.blocks = 0;
        Ok(n)
    }

    /// Split every slot into `slot_headers / width` narrower slots. Only
    /// meaningful for layouts where a header group's bytes are contiguous.
    pub(crate) fn refine(&mut self, width: u32) {
        if width == self.slot_headers {
            return;
        }
        debug_assert!(self.slot_headers.is_multiple_of(width));
        let k = (self.slot_headers / width) as usize;
        let mut slots = BTreeMap::new();
        for (s, f) in std::mem::take(&mut self.slots) {
            for (j, headers) in f.headers.chunks(width).enumerate() {
                slots.insert(s * k + j, Fragment { headers, ..f });
            }
        }
        self.slots = slots;
        self.free = self.free.iter().flat_map(|s| s * k..s * k + k).collect();
        self.slot_count *= k;
        self.slot_headers = width;
    }

    pub(crate) fn take(&mut self, slot: usize) -> Option<Fragment> {
        let f = self.slots.remove(&slot)?;
        self.free.insert(slot);
        Some(f)
    }

    pub(crate) fn put(
        &mut self,
        space: &mut PageSpace,
        slot: usize,
        f: Fragment,
    ) -> Result<usize, KvError> {
        let pages = self.grow_to(space, slot + 1)?;
        if !self.free.remove(&slot) {
            return Err(KvError::PlanMismatch(format!(
                "worker {} slot {slot} is occupied",
                self.worker
            )));
        }
        self.slots.insert(slot, f);
        Ok(pages)
    }

    pub(crate) fn set_held(&mut self, held: HeaderRange) {
        self.held = held;
    }

    pub(crate) fn recount_blocks(&mut self) {
        let keys: BTreeSet<BlockKey> = self.slots.values().map(Fragment::key).collect();
        self.blocks = keys.len();
    }

    /// Rebuild the store compactly at `width` headers per slot: `kept`
    /// fragments are moved to the front of the existing region, the tail pages
    /// are released, and `extra` fragments go into `extra_pages` appended after.
    pub(crate) fn compact(
        &mut self,
        space: &mut PageSpace,
        width: u32,
        kept: Vec<Fragment>,
        extra: Vec<Fragment>,
        extra_pages: Vec<PageRange>,
    ) -> Result<(), KvError> {
        self.slots.clear();
        self.slot_headers = width;
        let sb = self.slot_bytes();
        let keep_pages = (kept.len() as u64 * sb).div_ceil(self.page_size) as usize;
        let mut backing = Vec::new();
        let mut left = keep_pages;
        for r in std::mem::take(&mut self.backing) {
            let keep = left.min(r.length);
            left -= keep;
            if keep > 0 {
                backing.push(r.sub_range(0, keep));
            }
            if keep < r.length {
                space.unmap(&r.sub_range(keep, r.length - keep))?;
            }
        }
        self.backing = backing;
        self.region_bytes = keep_pages as u64 * self.page_size;
        self.slot_count = (self.region_bytes / sb) as usize;
        self.free = (0..self.slot_count).collect();
        for (i, f) in kept.into_iter().enumerate() {
            self.free.remove(&i);
            self.slots.insert(i, f);
        }
        let start = self.slot_count;
        for r in extra_pages {
            self.region_bytes += r.bytes(self.page_size);
            self.backing.push(r);
        }
        self.slot_count = (self.region_bytes / sb) as usize;
        self.free.extend(start..self.slot_count);
        for (i, f) in extra.into_iter().enumerate() {
            let slot = start + i;
            if !self.free.remove(&slot) {
                return Err(KvError::PlanMismatch("receive pages too small".into()));
            }
            self.slots.insert(slot, f);
        }
        self.recount_blocks();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::page_store::KIB;

    fn space() -> PageSpace {
        PageSpace::new(4096 * KIB, 4 * KIB)
    }

    #[test]
    fn first_block_never_shifts() {
        for l in [
            KvLayout::raw(4, 2, 8, 2),
            KvLayout::page_friendly(4, 2, 8, 2),
            KvLayout::header_centric(4, 2, 8, 2),
        ] {
            let mut sp = space();
            let mut s = KvStore::new(0, l, HeaderRange::all(2), 4 * KIB);
            assert_eq!(s.append_block(&mut sp, 1, 4).unwrap().shift_bytes, 0);
        }
    }

    #[test]
    fn raw_shift_grows_with_blocks() {
        let l = KvLayout::raw(4, 2, 8, 2);
        let mut sp = space();
        let mut s = KvStore::new(0, l, HeaderRange::all(2), 4 * KIB);
        for k in 0..5u64 {
            let r = s.append_block(&mut sp, 1, 4).unwrap();
            assert_eq!(r.shift_bytes, k * l.block_bytes() / 2);
        }
    }

    #[test]
    fn append_tokens_tops_up_last_block() {
        let l = KvLayout::page_friendly(4, 2, 8, 2);
        let mut sp = space();
        let mut s = KvStore::new(0, l, HeaderRange::all(2), 4 * KIB);
        s.append_tokens(&mut sp, 7, 6).unwrap();
        assert_eq!(s.block_count(), 2);
        let r = s.append_tokens(&mut sp, 7, 3).unwrap();
        assert_eq!(r.new_blocks, 1);
        assert_eq!(s.requests()[&7], 9);
        assert_eq!(s.cells().len(), 9 * 2 * 2);
    }

    #[test]
    fn region_grows_by_pages() {
        let l = KvLayout::page_friendly(16, 8, 16, 2); // 8 KiB blocks
        let mut sp = space();
        let mut s = KvStore::new(0, l, HeaderRange::all(8), 4 * KIB);
        let r = s.append_block(&mut sp, 1, 16).unwrap();
        assert_eq!(r.new_pages, 2);
        assert_eq!(sp.memory_report().mapped_kv, 8 * KIB);
        s.release_all(&mut sp).unwrap();
        assert_eq!(sp.occupied_pages(), 0);
    }

    #[test]
    fn refine_splits_fragments() {
        let l = KvLayout::header_centric(4, 4, 8, 2);
        let mut sp = space();
        let mut s = KvStore::new(0, l, HeaderRange::all(4), 4 * KIB);
        s.append_tokens(&mut sp, 1, 8).unwrap();
        let before = s.cells();
        s.refine(1);
        assert_eq!(s.fragment_count(), 8);
        assert_eq!(s.cells(), before);
    }
}
