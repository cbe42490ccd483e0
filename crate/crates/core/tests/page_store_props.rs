use proptest::prelude::*;
use tpshift::page_store::{PageError, PageSpace, Usage};

const PAGE: u64 = 4096;
const PAGES: usize = 64;

#[derive(Debug, Clone)]
enum Op {
    Alloc(u64),
    Free(usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            (1u64..12 * PAGE).prop_map(Op::Alloc),
            any::<usize>().prop_map(Op::Free),
        ],
        1..80,
    )
}

/// Plain occupancy vector; first-fit takes the lowest-index free run.
fn oracle_alloc(used: &mut [bool], n: usize) -> Option<usize> {
    let start = (0..=used.len().checked_sub(n)?).find(|&s| used[s..s + n].iter().all(|u| !u))?;
    used[start..start + n].iter_mut().for_each(|u| *u = true);
    Some(start)
}

proptest! {
    #[test]
    fn replay_matches_first_fit(ops in ops()) {
        let mut space = PageSpace::new(PAGES as u64 * PAGE, PAGE);
        let mut used = vec![false; PAGES];
        let mut live = Vec::new();
        let mut high = 0usize;
        for (i, op) in ops.into_iter().enumerate() {
            match op {
                Op::Alloc(bytes) => {
                    let n = bytes.div_ceil(PAGE) as usize;
                    let want = oracle_alloc(&mut used, n);
                    match space.alloc(bytes, format!("t{i}"), Usage::Kv) {
                        Ok(r) => {
                            prop_assert_eq!(Some(r.start_page), want);
                            prop_assert_eq!(r.length, n);
                            live.push(r);
                        }
                        Err(PageError::OutOfMemory { needed, .. }) => {
                            prop_assert_eq!(want, None);
                            prop_assert_eq!(needed, n);
                        }
                        Err(e) => prop_assert!(false, "{e}"),
                    }
                }
                Op::Free(k) if !live.is_empty() => {
                    let r = live.swap_remove(k % live.len());
                    prop_assert_eq!(space.unmap(&r).unwrap(), r.length);
                    used[r.start_page..r.end_page()].iter_mut().for_each(|u| *u = false);
                }
                Op::Free(_) => {}
            }
            let occupied = used.iter().filter(|&&u| u).count();
            high = high.max(occupied);
            prop_assert_eq!(space.occupied_pages(), occupied);
            prop_assert_eq!(space.high_water_mark(), high as u64 * PAGE);
            let rep = space.memory_report();
            prop_assert_eq!(rep.occupied() + rep.free, PAGES as u64 * PAGE);
        }
    }
}

#[test]
fn double_free_rejected() {
    let mut space = PageSpace::new(8 * PAGE, PAGE);
    let r = space.alloc(PAGE, "a", Usage::Weights).unwrap();
    space.unmap(&r).unwrap();
    assert!(space.unmap(&r).is_err());
}
