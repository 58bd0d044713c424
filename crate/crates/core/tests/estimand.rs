use std::collections::BTreeMap;

use canova_core::estimand::anchored_decomposition_check;
use canova_core::estimators::estimate_with_fits;
use canova_core::nuisance::fit_all_folds;
use canova_core::{
    expand_estimand, make_fold_plan, BuildingBlock, Dataset, EstimandSpec, Factor, FactorSet,
    LearnerConfig, Method,
};
use proptest::prelude::*;

fn set(ix: &[usize]) -> FactorSet {
    ix.iter().copied().collect()
}

#[test]
fn full_exclusion_total_has_two_blocks() {
    let k = 4;
    let combo = expand_estimand(&EstimandSpec::TotalUnion(FactorSet::full(k)));
    assert_eq!(
        combo.terms(),
        &[
            (1, BuildingBlock::new(FactorSet::empty())),
            (-1, BuildingBlock::new(FactorSet::full(k)))
        ]
    );
}

#[test]
fn labels_are_one_based() {
    let spec: EstimandSpec = "total:1,3".parse().unwrap();
    assert_eq!(spec, EstimandSpec::total([0, 2]));
    assert_eq!(spec.to_string(), "total:1,3");
    let inter: EstimandSpec = "interaction:1,3".parse().unwrap();
    assert_eq!(inter, EstimandSpec::interaction(0, 2));
    assert!("interaction:2,2".parse::<EstimandSpec>().is_err());
    assert!("total:0".parse::<EstimandSpec>().is_err());
    assert!("mean:1".parse::<EstimandSpec>().is_err());
    assert!(EstimandSpec::total([5]).validate(3).is_err());
}

#[test]
fn decomposition_residual_examples() {
    let (a, b, c) = (0.3, 0.2, 0.05);
    let mut totals = BTreeMap::new();
    totals.insert(set(&[0]), a);
    totals.insert(set(&[1]), b);
    totals.insert(set(&[0, 1]), a + b - c);
    let mut inter = BTreeMap::new();
    inter.insert(set(&[0, 1]), c);
    let s = set(&[0, 1]);
    assert!(anchored_decomposition_check(&totals, &inter, s).unwrap() < 1e-15);
    totals.insert(set(&[0, 1]), a + b - c + 0.1);
    assert!((anchored_decomposition_check(&totals, &inter, s).unwrap() - 0.1).abs() < 1e-12);
    assert!(anchored_decomposition_check(&totals, &BTreeMap::new(), s).is_err());
}

#[test]
fn decomposition_holds_on_plugin_outputs() {
    let codes = |m: usize, off: usize| -> Vec<usize> {
        (0..90).map(|i| (i * 7 + off + i / m) % m).collect()
    };
    let (a, b, c) = (codes(2, 0), codes(3, 1), codes(2, 5));
    let y: Vec<f64> = (0..90)
        .map(|i| {
            a[i] as f64 + 2.0 * (a[i] * b[i]) as f64 - c[i] as f64 + ((i * 13) % 7) as f64 * 0.1
        })
        .collect();
    let data = Dataset::new(
        "y",
        y,
        vec![
            Factor::discrete_codes("a", 2, &a),
            Factor::discrete_codes("b", 3, &b),
            Factor::discrete_codes("c", 2, &c),
        ],
    )
    .unwrap();
    let plan = make_fold_plan(90, 3, 11).unwrap();
    let fits = fit_all_folds(&data, &plan, &LearnerConfig::cellmean()).unwrap();
    let est = |spec: EstimandSpec| {
        estimate_with_fits(&data, &plan, &fits, &spec, Method::PlugIn, 0.05)
            .unwrap()
            .report
            .point
    };
    let mut totals = BTreeMap::new();
    let mut inter = BTreeMap::new();
    for s in [set(&[0]), set(&[1]), set(&[0, 1])] {
        totals.insert(s, est(EstimandSpec::TotalUnion(s)));
    }
    inter.insert(set(&[0, 1]), est(EstimandSpec::interaction(0, 1)));
    assert!(anchored_decomposition_check(&totals, &inter, set(&[0, 1])).unwrap() < 1e-12);
}

fn arb_spec() -> impl Strategy<Value = EstimandSpec> {
    prop_oneof![
        (1u64..(1 << 10)).prop_map(|bits| EstimandSpec::TotalUnion(FactorSet::from_bits(bits))),
        (0usize..10, 0usize..9).prop_map(|(a, b)| {
            let b = if b >= a { b + 1 } else { b };
            EstimandSpec::interaction(a, b)
        }),
    ]
}

proptest! {
    #[test]
    fn label_round_trip(spec in arb_spec()) {
        let back: EstimandSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(back, spec);
        let json = serde_json::to_string(&spec).unwrap();
        prop_assert_eq!(serde_json::from_str::<EstimandSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn signs_cancel_on_constant_blocks(spec in arb_spec(), c in -5.0f64..5.0) {
        let combo = expand_estimand(&spec);
        let values = vec![c; combo.terms().len()];
        prop_assert!(combo.combine(&values).abs() < 1e-12);
    }

    #[test]
    fn interaction_is_inclusion_exclusion_of_totals(
        a in 0usize..6,
        b in 0usize..5,
        table in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let b = if b >= a { b + 1 } else { b };
        let value = |s: FactorSet| table[s.bits() as usize % 64];
        let eval = |spec: EstimandSpec| {
            let combo = expand_estimand(&spec);
            let v: Vec<f64> = combo.blocks().map(|blk| value(blk.excluded)).collect();
            combo.combine(&v)
        };
        let lhs = eval(EstimandSpec::interaction(a, b));
        let rhs = eval(EstimandSpec::total([a])) + eval(EstimandSpec::total([b])) - eval(EstimandSpec::total([a, b]));
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn subsets_enumerate_powerset(bits in 1u64..(1 << 8)) {
        let s = FactorSet::from_bits(bits);
        let subs = s.nonempty_subsets();
        prop_assert_eq!(subs.len(), (1usize << s.len()) - 1);
        prop_assert!(subs.iter().all(|t| t.is_subset(s) && !t.is_empty()));
    }
}
