use std::collections::BTreeSet;

use demandmap_core::labeling::{
    assign_bin, make_fold_plan, make_split, quantile_edges, Closeness, FoldMode, Site, SplitKind, SplitMember,
    NUM_BINS,
};
use proptest::prelude::*;

/// Span-rule oracle written against raw bounds.
fn oracle(value: f64, min: f64, e: [f64; 3], max: f64) -> (usize, Closeness) {
    if value < min {
        return (0, Closeness::None);
    }
    if value > max {
        return (3, Closeness::None);
    }
    let bounds = [min, e[0], e[1], e[2], max];
    let mut bin = 0;
    for (i, edge) in e.iter().enumerate() {
        if value >= *edge {
            bin = i + 1;
        }
    }
    let (a, b) = (bounds[bin], bounds[bin + 1]);
    let near_top = bin < 3 && value > b - 0.1 * (b - a);
    let near_bottom = bin > 0 && value < a + 0.1 * (b - a);
    let c = if near_top {
        Closeness::Upper
    } else if near_bottom {
        Closeness::Lower
    } else {
        Closeness::None
    };
    (bin, c)
}

fn distinct_values() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::btree_set(-1_000_000i64..1_000_000, 8..300)
        .prop_map(|s| s.into_iter().map(|v| v as f64 / 997.0).collect())
        .prop_shuffle()
}

proptest! {
    #[test]
    fn occupancy_within_one(values in distinct_values()) {
        let edges = quantile_edges("m", &values).unwrap();
        let mut counts = [0usize; NUM_BINS];
        for v in &values {
            counts[assign_bin("x", *v, &edges).bin] += 1;
        }
        let quarter = values.len() as f64 / 4.0;
        for c in counts {
            prop_assert!((c as f64 - quarter).abs() <= 1.0 + 1e-9, "{counts:?} for n={}", values.len());
        }
    }

    #[test]
    fn assignment_is_monotone(values in distinct_values(), a in -2000.0f64..2000.0, b in -2000.0f64..2000.0) {
        let edges = quantile_edges("m", &values).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(assign_bin("x", lo, &edges).bin <= assign_bin("x", hi, &edges).bin);
    }

    #[test]
    fn closeness_matches_oracle(values in distinct_values(), probes in proptest::collection::vec(-1100.0f64..1100.0, 50)) {
        let edges = quantile_edges("m", &values).unwrap();
        for v in values.iter().chain(&probes) {
            let got = assign_bin("x", *v, &edges);
            prop_assert_eq!((got.bin, got.closeness), oracle(*v, edges.min, edges.edges, edges.max));
        }
    }
}

#[test]
fn split_sizes_follow_percentages() {
    let members: Vec<SplitMember> = (0..780)
        .map(|i| SplitMember {
            id: format!("c{i:04}"),
            country: if i < 530 { "ethiopia" } else { "malawi" }.into(),
        })
        .collect();
    let s = make_split(&members, SplitKind::random30(), 1).unwrap();
    assert_eq!((s.validation.len(), s.train.len()), (234, 546));
    let t = make_split(
        &members,
        SplitKind::CountryHoldout {
            country: "ethiopia".into(),
        },
        1,
    )
    .unwrap();
    assert_eq!((t.validation.len(), t.train.len()), (530, 250));
}

fn blobs(per_blob: usize, spread: f64) -> Vec<Site> {
    let centres = [(-15.0, 30.0), (-15.0, 36.0), (-9.0, 30.0), (-9.0, 36.0), (-12.0, 33.0)];
    let mut sites = Vec::new();
    for (b, (lat, lon)) in centres.iter().enumerate() {
        for i in 0..per_blob {
            let a = i as f64 * 2.4;
            sites.push(Site {
                id: format!("b{b}_{i}"),
                lat: lat + spread * a.sin(),
                lon: lon + spread * a.cos(),
            });
        }
    }
    sites
}

#[test]
fn spatial_folds_recover_blobs() {
    for seed in 0..20 {
        let plan = make_fold_plan(&blobs(5, 0.05), FoldMode::Spatial, 5, seed).unwrap();
        for fold in &plan.folds {
            let tags: BTreeSet<&str> = fold.iter().map(|id| &id[..2]).collect();
            assert_eq!((tags.len(), fold.len()), (1, 5), "seed {seed}: {fold:?}");
        }
    }
}

proptest! {
    #[test]
    fn folds_partition(n in 5usize..80, k in 2usize..6, seed in any::<u64>(), spatial in any::<bool>()) {
        prop_assume!(n >= k);
        let sites: Vec<Site> = (0..n)
            .map(|i| Site { id: format!("s{i}"), lat: (i as f64 * 0.37).sin() * 5.0, lon: (i as f64 * 0.73).cos() * 5.0 })
            .collect();
        let mode = if spatial { FoldMode::Spatial } else { FoldMode::Random };
        let plan = make_fold_plan(&sites, mode, k, seed).unwrap();
        let all: Vec<&String> = plan.folds.iter().flatten().collect();
        let uniq: BTreeSet<&String> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(uniq.len(), n);
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(plan.clone(), make_fold_plan(&sites, mode, k, seed).unwrap());
    }
}
