use std::collections::BTreeSet;

use chrono::{DateTime, TimeDelta, Utc};
use daycast_core::active_learning::{select_queries, theta_sweep};
use daycast_core::forecaster::{ForecastRecord, ForecastStep};
use proptest::prelude::*;

fn origin() -> DateTime<Utc> {
    "2023-02-01T00:00:00Z".parse().unwrap()
}

/// Records on random days; days may repeat, so a timestamp can be forecast
/// more than once.
fn archive() -> impl Strategy<Value = Vec<ForecastRecord>> {
    prop::collection::vec((0i64..6, prop::collection::vec(0.0f64..100.0, 24)), 0..8).prop_map(
        |recs| {
            recs.into_iter()
                .enumerate()
                .map(|(k, (day, sig))| {
                    let start = origin() + TimeDelta::days(day);
                    ForecastRecord {
                        model_id: format!("m{k}"),
                        issue_time: start,
                        target_start: start,
                        level: 0.95,
                        steps: sig
                            .iter()
                            .enumerate()
                            .map(|(h, &s)| ForecastStep {
                                timestamp: start + TimeDelta::hours(h as i64),
                                mu: 0.0,
                                sigma: s,
                                lower: -s,
                                upper: s,
                            })
                            .collect(),
                    }
                })
                .collect()
        },
    )
}

fn brute(
    archive: &[ForecastRecord],
    theta: f64,
    exclude: &BTreeSet<DateTime<Utc>>,
) -> BTreeSet<DateTime<Utc>> {
    let mut out = BTreeSet::new();
    for r in archive {
        for s in &r.steps {
            if s.sigma > theta && !exclude.contains(&s.timestamp) {
                out.insert(s.timestamp);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn selection_equals_brute_force_filter(a in archive(), theta in 0.0f64..110.0, ex in prop::collection::btree_set(0i64..144, 0..20)) {
        let exclude: BTreeSet<_> = ex.into_iter().map(|h| origin() + TimeDelta::hours(h)).collect();
        let q = select_queries(&a, theta, &exclude);
        let got: BTreeSet<_> = q.timestamps().into_iter().collect();
        prop_assert_eq!(got.len(), q.len());
        prop_assert_eq!(got, brute(&a, theta, &exclude));
        prop_assert!(q.points.iter().all(|p| p.sigma > theta));
    }

    #[test]
    fn raising_theta_nests_query_sets(a in archive(), t1 in 0.0f64..100.0, dt in 0.0f64..50.0) {
        let none = BTreeSet::new();
        let low: BTreeSet<_> = select_queries(&a, t1, &none).timestamps().into_iter().collect();
        let high: BTreeSet<_> = select_queries(&a, t1 + dt, &none).timestamps().into_iter().collect();
        prop_assert!(high.is_subset(&low));
        let rows = theta_sweep(&a, &[t1.max(1e-9), t1 + dt + 1e-9], &none).unwrap();
        prop_assert!(rows[1].queried_points <= rows[0].queried_points);
    }
}
