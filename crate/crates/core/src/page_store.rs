//! Page-granular model of a single worker's device memory.
//!
//! Every byte that the planners and the simulator charge against a GPU goes
//! through a [`PageSpace`]. Allocation happens in whole pages (2 MiB by
//! default), so a request for one byte still maps a full page; the difference
//! is tracked as internal fragmentation.
//!
//! Units: model and weight sizes quoted in "GB" are decimal (10^9 bytes, see
//! [`GB`]); page arithmetic is binary ([`MIB`]).

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
/// Decimal gigabyte, the unit used for model weight sizes.
pub const GB: u64 = 1_000_000_000;
pub const DEFAULT_PAGE_SIZE: u64 = 2 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageState {
    Free,
    MappedWeights,
    MappedKv,
    Reserved,
}

/// What an allocation is for. Maps one-to-one onto the non-free page states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usage {
    Weights,
    Kv,
    Reserved,
}

impl Usage {
    fn state(self) -> PageState {
        match self {
            Usage::Weights => PageState::MappedWeights,
            Usage::Kv => PageState::MappedKv,
            Usage::Reserved => PageState::Reserved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PageError {
    #[error("out of memory: need {needed} contiguous pages, {free} free")]
    OutOfMemory { needed: usize, free: usize },
    #[error("invalid range [{start}, {end}): {reason}")]
    InvalidRange {
        start: usize,
        end: usize,
        reason: String,
    },
    #[error("allocation of zero bytes")]
    ZeroSized,
}

/// A run of pages owned by one tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRange {
    pub start_page: usize,
    pub length: usize,
    pub owner_tag: String,
    /// Bytes the caller asked for; `length * page_size - requested_bytes` is
    /// the internal fragmentation of this range.
    pub requested_bytes: u64,
}

impl PageRange {
    pub fn end_page(&self) -> usize {
        self.start_page + self.length
    }

    pub fn bytes(&self, page_size: u64) -> u64 {
        self.length as u64 * page_size
    }

    pub fn fragmentation(&self, page_size: u64) -> u64 {
        self.bytes(page_size).saturating_sub(self.requested_bytes)
    }

    /// Sub-range `[offset, offset + length)` in pages, relative to this range.
    pub fn sub_range(&self, offset: usize, length: usize) -> PageRange {
        assert!(
            offset + length <= self.length,
            "sub-range {offset}+{length} exceeds {}",
            self.length
        );
        PageRange {
            start_page: self.start_page + offset,
            length,
            owner_tag: self.owner_tag.clone(),
            requested_bytes: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryReport {
    pub mapped_weights: u64,
    pub mapped_kv: u64,
    pub reserved: u64,
    pub free: u64,
    pub high_water_mark: u64,
}

impl MemoryReport {
    pub fn occupied(&self) -> u64 {
        self.mapped_weights + self.mapped_kv + self.reserved
    }
}

/// One worker's device memory as an ordered set of fixed-size pages.
///
/// Allocation is first-fit over contiguous free runs, lowest index first.
/// The high-water mark tracks occupied (mapped or reserved) bytes.
#[derive(Debug, Clone)]
pub struct PageSpace {
    page_size: u64,
    states: Vec<PageState>,
    owners: Vec<Option<Arc<str>>>,
    weights_pages: usize,
    kv_pages: usize,
    reserved_pages: usize,
    high_water_pages: usize,
    fragmentation_bytes: u64,
}

impl PageSpace {
    /// A space of `capacity_bytes / page_size` pages (rounded down so that
    /// capacity is always a whole number of pages).
    pub fn new(capacity_bytes: u64, page_size: u64) -> Self {
        assert!(page_size > 0, "page size must be positive");
        let pages = (capacity_bytes / page_size) as usize;
        PageSpace {
            page_size,
            states: vec![PageState::Free; pages],
            owners: vec![None; pages],
            weights_pages: 0,
            kv_pages: 0,
            reserved_pages: 0,
            high_water_pages: 0,
            fragmentation_bytes: 0,
        }
    }

    pub fn with_default_pages(capacity_bytes: u64) -> Self {
        Self::new(capacity_bytes, DEFAULT_PAGE_SIZE)
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn page_count(&self) -> usize {
        self.states.len()
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.states.len() as u64 * self.page_size
    }

    pub fn pages_for(&self, bytes: u64) -> usize {
        bytes.div_ceil(self.page_size) as usize
    }

    pub fn occupied_pages(&self) -> usize {
        self.weights_pages + self.kv_pages + self.reserved_pages
    }

    pub fn occupied_bytes(&self) -> u64 {
        self.occupied_pages() as u64 * self.page_size
    }

    pub fn free_pages(&self) -> usize {
        self.states.len() - self.occupied_pages()
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_pages() as u64 * self.page_size
    }

    pub fn high_water_mark(&self) -> u64 {
        self.high_water_pages as u64 * self.page_size
    }

    /// Cumulative internal fragmentation recorded at allocation time.
    pub fn fragmentation_bytes(&self) -> u64 {
        self.fragmentation_bytes
    }

    pub fn state(&self, page: usize) -> PageState {
        self.states[page]
    }

    pub fn owner(&self, page: usize) -> Option<&str> {
        self.owners[page].as_deref()
    }

    /// Length of the longest contiguous free run.
    pub fn largest_free_run(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        for s in &self.states {
            if *s == PageState::Free {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
        best
    }

    fn find_run(&self, n: usize) -> Option<usize> {
        let mut run = 0;
        for (i, s) in self.states.iter().enumerate() {
            if *s == PageState::Free {
                run += 1;
                if run == n {
                    return Some(i + 1 - n);
                }
            } else {
                run = 0;
            }
        }
        None
    }

    fn counter(&mut self, state: PageState) -> Option<&mut usize> {
        match state {
            PageState::Free => None,
            PageState::MappedWeights => Some(&mut self.weights_pages),
            PageState::MappedKv => Some(&mut self.kv_pages),
            PageState::Reserved => Some(&mut self.reserved_pages),
        }
    }

    /// Map `ceil(bytes / page_size)` contiguous pages for `tag`.
    pub fn alloc(
        &mut self,
        bytes: u64,
        tag: impl Into<String>,
        usage: Usage,
    ) -> Result<PageRange, PageError> {
        if bytes == 0 {
            return Err(PageError::ZeroSized);
        }
        let n = self.pages_for(bytes);
        let start = self.find_run(n).ok_or(PageError::OutOfMemory {
            needed: n,
            free: self.free_pages(),
        })?;
        let tag: String = tag.into();
        let shared: Arc<str> = Arc::from(tag.as_str());
        let state = usage.state();
        for p in start..start + n {
            self.states[p] = state;
            self.owners[p] = Some(shared.clone());
        }
        *self.counter(state).expect("non-free state") += n;
        self.high_water_pages = self.high_water_pages.max(self.occupied_pages());
        let range = PageRange {
            start_page: start,
            length: n,
            owner_tag: tag,
            requested_bytes: bytes,
        };
        self.fragmentation_bytes += range.fragmentation(self.page_size);
        Ok(range)
    }

    pub fn reserve(&mut self, bytes: u64, tag: impl Into<String>) -> Result<PageRange, PageError> {
        self.alloc(bytes, tag, Usage::Reserved)
    }

    /// Return every page of `range` to the free list. All pages must be
    /// non-free and owned by `range.owner_tag`; nothing changes on error.
    pub fn unmap(&mut self, range: &PageRange) -> Result<usize, PageError> {
        let (start, end) = (range.start_page, range.end_page());
        let invalid = |reason: String| PageError::InvalidRange { start, end, reason };
        if range.length == 0 {
            return Err(invalid("empty range".into()));
        }
        if end > self.states.len() {
            return Err(invalid(format!("beyond {} pages", self.states.len())));
        }
        for p in start..end {
            if self.states[p] == PageState::Free {
                return Err(invalid(format!("page {p} is already free")));
            }
            if self.owners[p].as_deref() != Some(range.owner_tag.as_str()) {
                return Err(invalid(format!(
                    "page {p} owned by {:?}, not {:?}",
                    self.owners[p].as_deref(),
                    range.owner_tag
                )));
            }
        }
        for p in start..end {
            let state = self.states[p];
            *self.counter(state).expect("checked non-free") -= 1;
            self.states[p] = PageState::Free;
            self.owners[p] = None;
        }
        Ok(range.length)
    }

    pub fn memory_report(&self) -> MemoryReport {
        let ps = self.page_size;
        MemoryReport {
            mapped_weights: self.weights_pages as u64 * ps,
            mapped_kv: self.kv_pages as u64 * ps,
            reserved: self.reserved_pages as u64 * ps,
            free: self.free_pages() as u64 * ps,
            high_water_mark: self.high_water_mark(),
        }
    }

    /// Restart high-water tracking from the current occupancy.
    pub fn reset_high_water_mark(&mut self) {
        self.high_water_pages = self.occupied_pages();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space_96gb() -> PageSpace {
        PageSpace::with_default_pages(96 * GB)
    }

    #[test]
    fn one_byte_charges_a_full_page() {
        let mut s = space_96gb();
        let r = s.alloc(1, "t", Usage::Weights).unwrap();
        assert_eq!(r.length, 1);
        assert_eq!(s.memory_report().mapped_weights, 2 * MIB);
        assert_eq!(r.fragmentation(s.page_size()), 2 * MIB - 1);
        assert_eq!(s.fragmentation_bytes(), 2 * MIB - 1);
    }

    #[test]
    fn exact_fit_has_no_fragmentation() {
        let mut s = space_96gb();
        let r = s.alloc(2 * MIB, "t", Usage::Kv).unwrap();
        assert_eq!(r.length, 1);
        assert_eq!(r.fragmentation(s.page_size()), 0);
    }

    #[test]
    fn capacity_is_whole_pages() {
        let s = space_96gb();
        assert_eq!(s.page_count(), 45_776);
        assert_eq!(s.capacity_bytes() % s.page_size(), 0);
    }

    #[test]
    fn model_weights_take_their_share() {
        let mut s = space_96gb();
        let bytes = 62_340_000_000;
        let r = s.alloc(bytes, "weights", Usage::Weights).unwrap();
        assert_eq!(r.length, 29_727);
        let share = s.memory_report().mapped_weights as f64 / s.capacity_bytes() as f64;
        assert!((share * 100.0 - 64.9).abs() < 0.1, "{share}");
    }

    #[test]
    fn unmap_is_inverse_of_alloc() {
        let mut s = PageSpace::new(64 * KIB, 4 * KIB);
        let a = s.alloc(5 * KIB, "a", Usage::Weights).unwrap();
        let before = s.memory_report();
        let b = s.alloc(9 * KIB, "b", Usage::Kv).unwrap();
        assert_eq!(s.unmap(&b).unwrap(), 3);
        let after = s.memory_report();
        assert_eq!(before.mapped_weights, after.mapped_weights);
        assert_eq!(after.mapped_kv, 0);
        assert_eq!(s.unmap(&a).unwrap(), 2);
        assert_eq!(s.free_pages(), 16);
    }

    #[test]
    fn double_free_is_rejected() {
        let mut s = PageSpace::new(64 * KIB, 4 * KIB);
        let a = s.alloc(4 * KIB, "a", Usage::Weights).unwrap();
        s.unmap(&a).unwrap();
        assert!(matches!(s.unmap(&a), Err(PageError::InvalidRange { .. })));
    }

    #[test]
    fn tag_mismatch_is_rejected_without_side_effects() {
        let mut s = PageSpace::new(64 * KIB, 4 * KIB);
        let a = s.alloc(8 * KIB, "a", Usage::Weights).unwrap();
        let mut forged = a.clone();
        forged.owner_tag = "b".into();
        assert!(s.unmap(&forged).is_err());
        assert_eq!(s.occupied_pages(), 2);
    }

    #[test]
    fn sub_range_release() {
        let mut s = PageSpace::new(64 * KIB, 4 * KIB);
        let a = s.alloc(16 * KIB, "w", Usage::Weights).unwrap();
        s.unmap(&a.sub_range(1, 3)).unwrap();
        assert_eq!(s.occupied_pages(), 1);
        assert_eq!(s.state(0), PageState::MappedWeights);
        assert_eq!(s.state(1), PageState::Free);
    }

    #[test]
    fn out_of_memory_and_zero() {
        let mut s = PageSpace::new(16 * KIB, 4 * KIB);
        assert_eq!(s.alloc(0, "z", Usage::Kv), Err(PageError::ZeroSized));
        s.alloc(12 * KIB, "a", Usage::Kv).unwrap();
        assert!(matches!(
            s.alloc(8 * KIB, "b", Usage::Kv),
            Err(PageError::OutOfMemory { needed: 2, free: 1 })
        ));
    }

    #[test]
    fn fresh_space_is_all_free() {
        let s = PageSpace::new(64 * KIB, 4 * KIB);
        let r = s.memory_report();
        assert_eq!(r.free, 64 * KIB);
        assert_eq!(r.occupied(), 0);
        assert_eq!(r.high_water_mark, 0);
    }

    #[test]
    fn first_fit_lowest_index() {
        let mut s = PageSpace::new(64 * KIB, 4 * KIB);
        let a = s.alloc(8 * KIB, "a", Usage::Kv).unwrap();
        let _b = s.alloc(4 * KIB, "b", Usage::Kv).unwrap();
        s.unmap(&a).unwrap();
        let c = s.alloc(4 * KIB, "c", Usage::Kv).unwrap();
        assert_eq!(c.start_page, 0);
        let d = s.alloc(8 * KIB, "d", Usage::Kv).unwrap();
        assert_eq!(d.start_page, 3);
    }

    #[test]
    fn reserved_counts_against_capacity() {
        let mut s = PageSpace::new(16 * KIB, 4 * KIB);
        s.reserve(8 * KIB, "headroom").unwrap();
        let r = s.memory_report();
        assert_eq!(r.reserved, 8 * KIB);
        assert_eq!(r.free, 8 * KIB);
        assert_eq!(r.high_water_mark, 8 * KIB);
    }
}
