//! KV-cache layouts, per-worker KV stores and head-partitioned migration.
//!
//! KV contents are tracked symbolically: a store knows which request, token
//! range and header range each of its fragments holds, and where that fragment
//! sits in the store's page-backed region. Byte counts come from the layout.

mod migration;
mod store;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::page_store::PageError;

pub use migration::{
    apply_migration, plan_migration, plan_migration_inplace, plan_migration_trim,
    plan_migration_trim_with, ChunkMove, MigrationKind, MigrationPlan, MigrationSpec, Stage,
    Transfer,
};
pub use store::{AppendResult, BlockKey, Cell, Fragment, KvStore, Placed};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("layouts differ in shape: {0}")]
    IncompatibleLayouts(String),
    #[error("{heads} headers cannot be split across tp {tp}")]
    IndivisibleHeads { heads: u32, tp: usize },
    #[error("worker index {index} outside 1..={tp}")]
    BadWorkerIndex { index: usize, tp: usize },
    #[error("block holds at most {max} tokens, got {got}")]
    BlockOverflow { max: u32, got: u32 },
    #[error("in-place migration needs the header-centric layout")]
    NotHeaderCentric,
    #[error("stage count must be at least 1")]
    NoStages,
    #[error("expected {expected} worker stores, got {got}")]
    GroupSize { expected: usize, got: usize },
    #[error("worker {worker} needs {needed} bytes of stage buffer, {free} free")]
    InsufficientStageBuffer {
        worker: usize,
        needed: u64,
        free: u64,
    },
    #[error("plan does not match stores: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Page(#[from] PageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    Block,
    Kv,
    Token,
    Header,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Block => "Block",
            Axis::Kv => "K/V",
            Axis::Token => "Token",
            Axis::Header => "Header",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLayout {
    pub axis_order: [Axis; 4],
    pub tokens_per_block: u32,
    pub num_headers: u32,
    pub head_dim: u32,
    pub element_bytes: u32,
}

impl KvLayout {
    pub fn with_order(
        axis_order: [Axis; 4],
        tokens_per_block: u32,
        num_headers: u32,
        head_dim: u32,
        element_bytes: u32,
    ) -> Self {
        KvLayout {
            axis_order,
            tokens_per_block,
            num_headers,
            head_dim,
            element_bytes,
        }
    }

    /// `[K/V, Block, Token, Header]`: K of every block, then V of every block.
    pub fn raw(tokens_per_block: u32, num_headers: u32, head_dim: u32, element_bytes: u32) -> Self {
        Self::with_order(
            [Axis::Kv, Axis::Block, Axis::Token, Axis::Header],
            tokens_per_block,
            num_headers,
            head_dim,
            element_bytes,
        )
    }

    /// `[Block, K/V, Token, Header]`
    pub fn page_friendly(
        tokens_per_block: u32,
        num_headers: u32,
        head_dim: u32,
        element_bytes: u32,
    ) -> Self {
        Self::with_order(
            [Axis::Block, Axis::Kv, Axis::Token, Axis::Header],
            tokens_per_block,
            num_headers,
            head_dim,
            element_bytes,
        )
    }

    /// `[Block, Header, K/V, Token]`
    pub fn header_centric(
        tokens_per_block: u32,
        num_headers: u32,
        head_dim: u32,
        element_bytes: u32,
    ) -> Self {
        Self::with_order(
            [Axis::Block, Axis::Header, Axis::Kv, Axis::Token],
            tokens_per_block,
            num_headers,
            head_dim,
            element_bytes,
        )
    }

    pub fn with_headers(self, num_headers: u32) -> Self {
        KvLayout {
            num_headers,
            ..self
        }
    }

    pub fn is_valid(&self) -> bool {
        let mut axes = self.axis_order;
        axes.sort();
        axes == [Axis::Block, Axis::Kv, Axis::Token, Axis::Header]
            && self.tokens_per_block > 0
            && self.num_headers > 0
            && self.head_dim > 0
            && self.element_bytes > 0
    }

    /// Blocks occupy contiguous bytes, so a new block never moves old ones.
    pub fn is_page_friendly(&self) -> bool {
        self.axis_order[0] == Axis::Block
    }

    /// Each header's K and V of a block are contiguous.
    pub fn is_header_centric(&self) -> bool {
        self.axis_order[0] == Axis::Block && self.axis_order[1] == Axis::Header
    }

    /// Bytes of one header of one token (K or V).
    pub fn vector_bytes(&self) -> u64 {
        self.head_dim as u64 * self.element_bytes as u64
    }

    /// Bytes of one block covering `headers` headers.
    pub fn bytes_for_headers(&self, headers: u32) -> u64 {
        2 * self.tokens_per_block as u64 * headers as u64 * self.vector_bytes()
    }

    pub fn block_bytes(&self) -> u64 {
        self.bytes_for_headers(self.num_headers)
    }

    /// KV bytes per token (all headers, K and V).
    pub fn token_bytes(&self) -> u64 {
        2 * self.num_headers as u64 * self.vector_bytes()
    }

    fn axis_len(&self, axis: Axis, blocks: usize) -> usize {
        match axis {
            Axis::Block => blocks,
            Axis::Kv => 2,
            Axis::Token => self.tokens_per_block as usize,
            Axis::Header => self.num_headers as usize,
        }
    }

    /// Extents of a `blocks`-block tensor in this layout's axis order.
    pub fn dims(&self, blocks: usize) -> [usize; 4] {
        self.axis_order.map(|a| self.axis_len(a, blocks))
    }
}

/// Permutation `p` with `stored.axis_order[p[i]] == expected.axis_order[i]`.
///
/// Reading a stored tensor with strides permuted by `p` presents it in the
/// kernel's expected order without moving data.
pub fn stride_order(stored: &KvLayout, expected: &KvLayout) -> Result<[usize; 4], KvError> {
    if !stored.is_valid() || !expected.is_valid() {
        return Err(KvError::IncompatibleLayouts(
            "axis order is not a permutation".into(),
        ));
    }
    if (stored.tokens_per_block, stored.num_headers, stored.head_dim)
        != (
            expected.tokens_per_block,
            expected.num_headers,
            expected.head_dim,
        )
    {
        return Err(KvError::IncompatibleLayouts(format!(
            "stored tpb={} H={} d={} vs expected tpb={} H={} d={}",
            stored.tokens_per_block,
            stored.num_headers,
            stored.head_dim,
            expected.tokens_per_block,
            expected.num_headers,
            expected.head_dim
        )));
    }
    let mut p = [0; 4];
    for (i, axis) in expected.axis_order.iter().enumerate() {
        p[i] = stored
            .axis_order
            .iter()
            .position(|a| a == axis)
            .expect("validated permutation");
    }
    Ok(p)
}

/// Row-major strides for `dims`.
pub fn strides(dims: [usize; 4]) -> [usize; 4] {
    let mut s = [1; 4];
    for i in (0..3).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Materialize `data` (row-major with `dims`) in the axis order given by `perm`.
pub fn permute<T: Clone>(data: &[T], dims: [usize; 4], perm: [usize; 4]) -> Vec<T> {
    assert_eq!(
        data.len(),
        dims.iter().product::<usize>(),
        "data does not match dims"
    );
    let src = strides(dims);
    let out_dims = perm.map(|p| dims[p]);
    let view = perm.map(|p| src[p]);
    let mut out = Vec::with_capacity(data.len());
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                for d in 0..out_dims[3] {
                    out.push(data[a * view[0] + b * view[1] + c * view[2] + d * view[3]].clone());
                }
            }
        }
    }
    out
}

/// Half-open range of 0-based header indices. Displays 1-based, e.g. `H3-H4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeaderRange {
    pub start: u32,
    pub end: u32,
}

impl HeaderRange {
    pub fn new(start: u32, end: u32) -> Self {
        debug_assert!(start < end);
        HeaderRange { start, end }
    }

    pub fn all(h: u32) -> Self {
        HeaderRange { start: 0, end: h }
    }

    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &HeaderRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn iter(&self) -> std::ops::Range<u32> {
        self.start..self.end
    }

    /// Split into consecutive pieces of `width` headers.
    pub fn chunks(&self, width: u32) -> impl Iterator<Item = HeaderRange> + '_ {
        (self.start..self.end)
            .step_by(width as usize)
            .map(move |s| HeaderRange::new(s, (s + width).min(self.end)))
    }
}

impl fmt::Display for HeaderRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() == 1 {
            write!(f, "H{}", self.start + 1)
        } else {
            write!(f, "H{}-H{}", self.start + 1, self.end)
        }
    }
}

/// Headers worker `index` (1-based) keeps when `h` headers are split over `tp`.
pub fn retained_headers(index: usize, h: u32, tp: usize) -> Result<HeaderRange, KvError> {
    if tp == 0 || !h.is_multiple_of(tp as u32) {
        return Err(KvError::IndivisibleHeads { heads: h, tp });
    }
    if index == 0 || index > tp {
        return Err(KvError::BadWorkerIndex { index, tp });
    }
    let per = h / tp as u32;
    let i = index as u32 - 1;
    Ok(HeaderRange::new(per * i, per * (i + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lay(order: [Axis; 4]) -> KvLayout {
        KvLayout::with_order(order, 3, 2, 1, 2)
    }

    #[test]
    fn identity_stride_order() {
        let l = KvLayout::raw(16, 8, 128, 2);
        assert_eq!(stride_order(&l, &l).unwrap(), [0, 1, 2, 3]);
    }

    #[test]
    fn page_friendly_to_raw_swaps_first_two() {
        let s = KvLayout::page_friendly(16, 8, 128, 2);
        let e = KvLayout::raw(16, 8, 128, 2);
        assert_eq!(stride_order(&s, &e).unwrap(), [1, 0, 2, 3]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let s = KvLayout::raw(16, 8, 128, 2);
        let e = KvLayout::raw(16, 4, 128, 2);
        assert!(matches!(
            stride_order(&s, &e),
            Err(KvError::IncompatibleLayouts(_))
        ));
        let bad = KvLayout::with_order([Axis::Block; 4], 16, 8, 128, 2);
        assert!(stride_order(&bad, &e).is_err());
    }

    /// Lay out every (block, kv, token, header) coordinate directly in `l`'s order.
    fn materialize(l: &KvLayout, blocks: usize) -> Vec<(usize, usize, usize, usize)> {
        let dims = l.dims(blocks);
        let mut out = Vec::new();
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        let idx = [a, b, c, d];
                        let get =
                            |axis: Axis| idx[l.axis_order.iter().position(|x| *x == axis).unwrap()];
                        out.push((
                            get(Axis::Block),
                            get(Axis::Kv),
                            get(Axis::Token),
                            get(Axis::Header),
                        ));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn stride_order_matches_direct_relayout() {
        let orders = [
            [Axis::Kv, Axis::Block, Axis::Token, Axis::Header],
            [Axis::Block, Axis::Kv, Axis::Token, Axis::Header],
            [Axis::Block, Axis::Header, Axis::Kv, Axis::Token],
            [Axis::Token, Axis::Header, Axis::Block, Axis::Kv],
        ];
        for s in orders {
            for e in orders {
                let (ls, le) = (lay(s), lay(e));
                let stored = materialize(&ls, 2);
                let p = stride_order(&ls, &le).unwrap();
                assert_eq!(
                    permute(&stored, ls.dims(2), p),
                    materialize(&le, 2),
                    "{s:?} -> {e:?}"
                );
            }
        }
    }

    #[test]
    fn block_bytes_equal_across_layouts() {
        let a = KvLayout::raw(16, 8, 128, 2);
        let b = KvLayout::page_friendly(16, 8, 128, 2);
        let c = KvLayout::header_centric(16, 8, 128, 2);
        assert_eq!(a.block_bytes(), b.block_bytes());
        assert_eq!(b.block_bytes(), c.block_bytes());
        assert_eq!(a.block_bytes(), 2 * 16 * 8 * 128 * 2);
    }

    #[test]
    fn retained_header_examples() {
        assert_eq!(retained_headers(2, 8, 4).unwrap(), HeaderRange::new(2, 4));
        assert_eq!(retained_headers(2, 8, 4).unwrap().to_string(), "H3-H4");
        assert_eq!(retained_headers(4, 8, 4).unwrap().to_string(), "H7-H8");
        assert_eq!(retained_headers(1, 32, 1).unwrap(), HeaderRange::all(32));
        assert!(matches!(
            retained_headers(1, 6, 4),
            Err(KvError::IndivisibleHeads { .. })
        ));
        assert!(retained_headers(5, 8, 4).is_err());
    }

    #[test]
    fn layout_predicates() {
        assert!(!KvLayout::raw(1, 1, 1, 1).is_page_friendly());
        assert!(KvLayout::page_friendly(1, 1, 1, 1).is_page_friendly());
        assert!(!KvLayout::page_friendly(1, 1, 1, 1).is_header_centric());
        assert!(KvLayout::header_centric(1, 1, 1, 1).is_header_centric());
    }
}
