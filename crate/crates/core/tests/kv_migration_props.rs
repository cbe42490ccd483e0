use proptest::prelude::*;
use tpshift::kv_layout::{
    apply_migration, plan_migration, plan_migration_trim, retained_headers, Cell, HeaderRange,
    KvLayout, KvStore, MigrationSpec,
};
use tpshift::page_store::{PageSpace, KIB};

const PAGE: u64 = 4 * KIB;

fn stores(h: u32, per_worker: &[Vec<u64>]) -> (Vec<KvStore>, Vec<PageSpace>) {
    let layout = KvLayout::header_centric(4, h, 8, 2);
    let mut stores = Vec::new();
    let mut spaces = Vec::new();
    for (w, reqs) in per_worker.iter().enumerate() {
        let mut sp = PageSpace::new(32 * 1024 * KIB, PAGE);
        let mut s = KvStore::new(w, layout, HeaderRange::all(h), PAGE);
        for (r, &t) in reqs.iter().enumerate() {
            if t > 0 {
                s.append_tokens(&mut sp, (w * 10 + r) as u64, t).unwrap();
            }
        }
        stores.push(s);
        spaces.push(sp);
    }
    (stores, spaces)
}

fn cells(stores: &[KvStore]) -> Vec<Cell> {
    let mut c: Vec<Cell> = stores.iter().flat_map(|s| s.cells()).collect();
    c.sort();
    c
}

fn config() -> impl Strategy<Value = (u32, usize, usize, Vec<Vec<u64>>)> {
    (
        prop_oneof![Just(4u32), Just(8), Just(16), Just(32)],
        prop_oneof![Just(2usize), Just(4)],
        1usize..=8,
    )
        .prop_flat_map(|(h, tp, s)| {
            let reqs = prop::collection::vec(prop::collection::vec(0u64..40, 1..4), tp);
            (Just(h), Just(tp), Just(s), reqs)
        })
}

proptest! {
    #[test]
    fn scale_up_conserves_cells((h, tp, s, reqs) in config()) {
        let (mut st, mut sp) = stores(h, &reqs);
        let before = cells(&st);
        let plan = plan_migration(&st, &MigrationSpec::new(1, tp, s)).unwrap();
        prop_assert_eq!(plan.trim_copies_total(), 0);
        apply_migration(&plan, &mut st, &mut sp).unwrap();
        prop_assert_eq!(cells(&st), before);
        for (w, store) in st.iter().enumerate() {
            prop_assert_eq!(store.held(), retained_headers(w + 1, h, tp).unwrap());
        }
    }

    #[test]
    fn trim_conserves_cells((h, tp, _s, reqs) in config()) {
        let (mut st, mut sp) = stores(h, &reqs);
        let before = cells(&st);
        let plan = plan_migration_trim(&st, 1, tp).unwrap();
        apply_migration(&plan, &mut st, &mut sp).unwrap();
        prop_assert_eq!(cells(&st), before);
    }

    #[test]
    fn page_friendly_appends_never_shift(tokens in prop::collection::vec(1u32..=8, 1..20)) {
        let mut sp = PageSpace::new(4 * 1024 * KIB, PAGE);
        for layout in [KvLayout::page_friendly(8, 8, 8, 2), KvLayout::header_centric(8, 8, 8, 2)] {
            let mut s = KvStore::new(0, layout, HeaderRange::all(8), PAGE);
            for (r, &t) in tokens.iter().enumerate() {
                prop_assert_eq!(s.append_block(&mut sp, r as u64, t).unwrap().shift_bytes, 0);
            }
        }
    }
}

#[test]
fn raw_layout_shifts_existing_blocks() {
    let mut sp = PageSpace::new(1024 * KIB, PAGE);
    let mut s = KvStore::new(0, KvLayout::raw(4, 8, 8, 2), HeaderRange::all(8), PAGE);
    assert_eq!(s.append_block(&mut sp, 0, 4).unwrap().shift_bytes, 0);
    assert!(s.append_block(&mut sp, 0, 4).unwrap().shift_bytes > 0);
}

#[test]
fn balanced_peak_falls_with_stages() {
    let reqs = vec![vec![64, 64]; 4];
    let peak = |s| {
        let (st, _) = stores(8, &reqs);
        plan_migration(&st, &MigrationSpec::new(1, 4, s))
            .unwrap()
            .peak_extra_max()
    };
    let (one, eight) = (peak(1), peak(8));
    assert!(eight * 5 <= one, "{eight} vs {one}");
}
