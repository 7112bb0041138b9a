use lpstream::hashing::TAG_HEAVY_HITTERS;
use lpstream::{SeedSet, SketchConfig, SketchState, TurnstileUpdate};
use proptest::prelude::*;

fn updates(n: u64, d: usize) -> impl Strategy<Value = Vec<TurnstileUpdate>> {
    prop::collection::vec((0..n, 0..d, -1e3f64..1e3), 0..200)
        .prop_map(|v| v.into_iter().map(|(i, c, x)| TurnstileUpdate::new(i, c, x)).collect())
}

fn sketch(cfg: SketchConfig, seed: u64, ups: &[TurnstileUpdate]) -> SketchState {
    let mut s = SketchState::new(cfg, SeedSet::new(seed, TAG_HEAVY_HITTERS)).unwrap();
    for u in ups {
        s.update(u).unwrap();
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_order_free(ups in updates(40, 3), cut in 0usize..200, seed in any::<u64>(), r in 1usize..30, s in 1usize..8) {
        let cfg = SketchConfig::new(40, 3, r, s, 1.5, 0.25).unwrap();
        let cut = cut.min(ups.len());
        let whole = sketch(cfg, seed, &ups);
        let a = sketch(cfg, seed, &ups[..cut]);
        let b = sketch(cfg, seed, &ups[cut..]);
        let ab = SketchState::merged(&a, &b).unwrap();
        let ba = SketchState::merged(&b, &a).unwrap();
        let bits = |s: &SketchState| s.bucket_values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&ab), bits(&whole));
        prop_assert_eq!(bits(&ba), bits(&whole));
    }

    #[test]
    fn cancelled_stream_is_empty(ups in updates(30, 2), seed in any::<u64>()) {
        let cfg = SketchConfig::new(30, 2, 16, 5, 1.0, 0.25).unwrap();
        let mut all = ups.clone();
        all.extend(ups.iter().rev().map(|u| TurnstileUpdate::new(u.row, u.col, -u.value)));
        let s = sketch(cfg, seed, &all);
        prop_assert!(s.bucket_values().iter().all(|&v| v == 0.0));
        prop_assert!(s.extract_heavy().is_empty());
    }

    #[test]
    fn snapshot_round_trip(ups in updates(50, 4), seed in any::<u64>()) {
        let cfg = SketchConfig::new(50, 4, 9, 3, 2.0, 0.25).unwrap();
        let s = sketch(cfg, seed, &ups);
        let mut buf = Vec::new();
        s.write_snapshot(&mut buf).unwrap();
        let back = SketchState::read_snapshot(&buf[..]).unwrap();
        prop_assert_eq!(back.bucket_values(), s.bucket_values());
        prop_assert_eq!(back.extract_heavy(), s.extract_heavy());
    }

    #[test]
    fn lone_row_is_recovered_exactly(row in 0u64..100, x in prop::collection::vec(-1e3f64..1e3, 3), seed in any::<u64>()) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
        // unit factor: the row is its own M0 whenever it sits in bucket 0 often
        let cfg = SketchConfig::new(100, 3, 8, 5, 1.0, 0.25).unwrap().with_threshold_factor(1.0).unwrap();
        let mut s = SketchState::new(cfg, SeedSet::new(seed, TAG_HEAVY_HITTERS)).unwrap();
        s.update_row(row, &x).unwrap();
        let list = s.extract_heavy();
        prop_assert_eq!(list.len(), 1);
        prop_assert_eq!(&list.get(row).unwrap().row, &x);
    }
}

#[test]
fn mismatched_configs_refuse_to_merge() {
    let a = SketchState::new(SketchConfig::new(10, 2, 4, 3, 1.0, 0.25).unwrap(), SeedSet::new(1, TAG_HEAVY_HITTERS)).unwrap();
    let mut b = SketchState::new(SketchConfig::new(10, 2, 4, 3, 1.0, 0.25).unwrap(), SeedSet::new(2, TAG_HEAVY_HITTERS)).unwrap();
    let mut c = SketchState::new(SketchConfig::new(10, 2, 5, 3, 1.0, 0.25).unwrap(), SeedSet::new(1, TAG_HEAVY_HITTERS)).unwrap();
    assert!(b.merge(&a).is_err());
    assert!(c.merge(&a).is_err());
}
