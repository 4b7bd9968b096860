use std::collections::BTreeMap;

use demandmap_core::geo::LatLon;
use demandmap_core::survey::{aggregate_clusters, parse_households, HouseholdRow, SurveyManifest};
use demandmap_core::kv::KvMap;
use proptest::prelude::*;

fn row() -> impl Strategy<Value = HouseholdRow> {
    (
        0usize..6,
        proptest::option::of(any::<bool>()),
        proptest::option::of(0.0f64..500.0),
        proptest::option::of(1u32..12),
    )
        .prop_map(|(c, has_phone, phone_spend, household_size)| HouseholdRow {
            cluster_id: format!("c{c}"),
            has_phone,
            phone_spend,
            household_size,
        })
}

fn coords() -> BTreeMap<String, LatLon> {
    (0..6).map(|c| (format!("c{c}"), LatLon::new(-13.0 + c as f64 * 0.1, 34.0))).collect()
}

proptest! {
    #[test]
    fn aggregation_is_permutation_invariant(rows in proptest::collection::vec(row(), 1..80).prop_shuffle(), seed in any::<u64>()) {
        let (a, _) = aggregate_clusters(&rows, &coords()).unwrap();
        let mut shuffled = rows.clone();
        // deterministic Fisher-Yates driven by the seed
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (b, _) = aggregate_clusters(&shuffled, &coords()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn penetration_bounds_and_household_conservation(rows in proptest::collection::vec(row(), 1..80)) {
        let (records, _) = aggregate_clusters(&rows, &coords()).unwrap();
        for r in &records {
            prop_assert!((0.0..=1.0).contains(&r.phone_penetration));
            prop_assert!(r.spend_per_capita >= 0.0);
            let answers: Vec<bool> = rows.iter().filter(|h| h.cluster_id == r.cluster_id).filter_map(|h| h.has_phone).collect();
            prop_assert_eq!(r.n_households, answers.len());
            if answers.iter().all(|&p| p) { prop_assert_eq!(r.phone_penetration, 1.0); }
            if answers.iter().all(|&p| !p) { prop_assert_eq!(r.phone_penetration, 0.0); }
        }
        let answered = rows.iter().filter(|h| h.has_phone.is_some()).count();
        prop_assert_eq!(records.iter().map(|r| r.n_households).sum::<usize>(), answered);
    }
}

#[test]
fn spec_examples() {
    let h = |c: &str, p: Option<bool>, s: Option<f64>, n: Option<u32>| HouseholdRow {
        cluster_id: c.into(),
        has_phone: p,
        phone_spend: s,
        household_size: n,
    };
    let rows = vec![
        h("c0", Some(true), Some(30.0), Some(3)),
        h("c0", Some(false), None, Some(2)),
        h("c1", Some(true), Some(30.0), Some(3)),
    ];
    let (rec, _) = aggregate_clusters(&rows, &coords()).unwrap();
    assert_eq!(rec[0].phone_penetration, 0.5);
    assert_eq!(rec[0].spend_per_capita, 5.0);
    assert_eq!(rec[1].spend_per_capita, 10.0);
}

#[test]
fn parses_mapped_columns_from_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("hh.csv"),
        "hhid,ea,owns_phone,phone_exp,hhsize\n1,A,yes,12.5,4\n2,A,no,n/a,3\n3,B,1,40,\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("geo.csv"), "ea,lat_dd,lon_dd\nA,-13.1,34.2\nB,-12.9,33.8\n").unwrap();
    let kv: KvMap = [
        ("country", "malawi"),
        ("households_csv", "hh.csv"),
        ("coords_csv", "geo.csv"),
        ("col.cluster_id", "ea"),
        ("col.has_phone", "owns_phone"),
        ("col.spend", "phone_exp"),
        ("col.household_size", "hhsize"),
        ("col.lat", "lat_dd"),
        ("col.lon", "lon_dd"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = SurveyManifest::from_kv(&kv, dir.path()).unwrap();
    let (rows, report) = parse_households(&manifest).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].phone_spend, None);
    assert_eq!(rows[2].household_size, None);
    assert!(report.warnings.iter().all(|w| w.column != "ea"));
}
