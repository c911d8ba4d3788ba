use std::collections::BTreeMap;

use jomi::harness::metrics::Summary;
use jomi::report::{Check, MethodSummary, ResultDocument, Status};
use jomi::{Interval, IntervalUnion, Method, PredictionSet, SetKind};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e9f64..1e9,
        -1.0f64..1.0,
        (-1_000_000i64..1_000_000).prop_map(|v| v as f64),
        any::<f64>().prop_filter("finite", |v| v.is_finite())
    ]
}

fn interval() -> impl Strategy<Value = Interval> {
    (
        prop_oneof![1 => Just(f64::NEG_INFINITY), 6 => finite()],
        prop_oneof![1 => Just(f64::INFINITY), 6 => finite()],
        any::<bool>(),
        any::<bool>(),
    )
        .prop_filter_map("empty", |(a, b, lc, hc)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            Interval::new(lo, hi, lc, hc)
        })
}

fn set() -> impl Strategy<Value = PredictionSet> {
    prop_oneof![
        proptest::collection::vec(interval(), 0..8)
            .prop_map(|v| PredictionSet::Intervals(IntervalUnion::from_intervals(v))),
        proptest::collection::vec(0usize..50, 0..10).prop_map(PredictionSet::labels),
    ]
}

fn opt(s: impl Strategy<Value = f64>) -> impl Strategy<Value = Option<f64>> {
    proptest::option::of(s)
}

fn summary() -> impl Strategy<Value = Summary> {
    (
        (
            0usize..10_000,
            0usize..1_000_000,
            opt(0.0f64..1.0),
            opt(0.0f64..1.0),
            opt(0.0f64..0.1),
        ),
        (0.0f64..1.0, opt(0.0f64..0.1), opt(finite()), 0usize..100),
        (opt(0.0f64..1e4), opt(0.0f64..1.0), opt(1.0f64..5.0)),
        proptest::collection::btree_map(0usize..500, 1usize..1000, 0..6),
    )
        .prop_map(
            |(a, b, c, sizes): (_, _, _, BTreeMap<usize, usize>)| Summary {
                trials: a.0,
                selections: a.1,
                miscov: a.2,
                miscov_per_index: a.3,
                miscov_se: a.4,
                fcr: b.0,
                fcr_se: b.1,
                mean_size: b.2,
                infinite_sets: b.3,
                mean_ref_size: c.0,
                mean_inv_ref: c.1,
                mean_segments: c.2,
                selection_sizes: sizes,
            },
        )
}

fn document() -> impl Strategy<Value = ResultDocument> {
    let method = prop_oneof![
        Just(Method::Vanilla),
        Just(Method::Jomi),
        Just(Method::JomiRand),
        Just(Method::Ps)
    ];
    let ms =
        (method, 0.001f64..0.999, summary()).prop_map(|(method, alpha, summary)| MethodSummary {
            method,
            alpha,
            summary,
        });
    let check =
        ("[a-z_:=.0-9]{1,20}", any::<bool>(), "\\PC{0,30}").prop_map(|(name, passed, detail)| {
            Check {
                name,
                passed,
                detail,
            }
        });
    (
        proptest::collection::vec(ms, 0..5),
        proptest::collection::vec(check, 0..4),
        opt(0.0f64..1.0),
        0usize..100,
        0usize..5000,
        prop_oneof![
            Just(Status::Ok),
            Just(Status::NoTrials),
            Just(Status::ChecksFailed)
        ],
        finite(),
    )
        .prop_map(|(summaries, checks, fdr, floored, trials, status, seed)| {
            let mut d = ResultDocument::new(
                "evaluate",
                serde_json::json!({ "alphas": [seed], "trials": trials }),
            );
            d.summaries = summaries;
            d.checks = checks;
            d.selection_fdr = fdr;
            d.floored_costs = floored;
            d.trials = trials;
            d.status = status;
            d
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn prediction_sets_survive_text(s in set()) {
        let kind = s.kind();
        let text = s.to_string();
        let back = PredictionSet::parse(&text, kind).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_string(), text.as_str());
        if kind == SetKind::Labels {
            prop_assert!(!text.contains(' '));
        }
    }

    #[test]
    fn result_documents_survive_json(d in document()) {
        let text = d.to_json();
        let back = ResultDocument::from_json(&text).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(back.to_json(), text.as_str());
    }
}
