mod common;

use std::collections::BTreeSet;

use common::{bits, emb, random_unit, rng};
use nes::suppression::{
    apply_suppression, negative_attention, score_negative_attention, select_tokens, suppress, DEFAULT_LAMBDA,
};
use nes::{Error, PrefixFeatures, Selection, SuppressionConfig, SuppressionReport};
use proptest::prelude::*;
use rand::Rng;

fn idx(items: &[usize]) -> BTreeSet<usize> {
    items.iter().copied().collect()
}

fn basis_prefix(l: usize) -> PrefixFeatures {
    PrefixFeatures::new(
        (0..l)
            .map(|i| (0..l).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
    )
    .unwrap()
}

fn prefix_strategy() -> impl Strategy<Value = PrefixFeatures> {
    (1usize..12, 1usize..10).prop_flat_map(|(l, d)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), l).prop_map(|t| PrefixFeatures::new(t).unwrap())
    })
}

#[test]
fn no_negatives_means_zero_scores() {
    let p = basis_prefix(3);
    assert_eq!(score_negative_attention(&p, &[]).unwrap(), [0.0; 3]);
}

#[test]
fn single_token_gets_full_weight() {
    let p = PrefixFeatures::single(&emb(&[0.3, -0.2]));
    assert_eq!(score_negative_attention(&p, &[emb(&[1.0, 0.0])]).unwrap(), [1.0]);
}

#[test]
fn aligned_token_has_strict_maximum() {
    let p = basis_prefix(4);
    let scores = score_negative_attention(&p, &[emb(&[0.0, 0.0, 1.0, 0.0])]).unwrap();
    // logits [0, 0, 1/2, 0]: weights e^½/(3+e^½) and 1/(3+e^½)
    let e = 0.5f64.exp();
    let expected = [1.0 / (3.0 + e), 1.0 / (3.0 + e), e / (3.0 + e), 1.0 / (3.0 + e)];
    for (s, x) in scores.iter().zip(expected) {
        assert!((s - x).abs() < 1e-12);
    }
    assert!(scores.iter().enumerate().all(|(i, &s)| i == 2 || s < scores[2]));
}

#[test]
fn multiple_negatives_aggregate_by_max() {
    let p = basis_prefix(4);
    let a = emb(&[1.0, 0.0, 0.0, 0.0]);
    let b = emb(&[0.0, 0.0, 0.0, 1.0]);
    let att = negative_attention(&p, &[a, b]).unwrap();
    assert_eq!(att.rows.len(), 2);
    for (i, s) in att.scores.iter().enumerate() {
        assert_eq!(*s, att.rows[0][i].max(att.rows[1][i]));
    }
    assert!(negative_attention(&p, &[emb(&[1.0, 0.0])]).is_err());
}

#[test]
fn selection_examples() {
    let scores = [0.1, 0.4, 0.3, 0.2];
    assert!(select_tokens(&scores, 2, &Selection::FixedThreshold { tau_neg: 0.4 }).is_empty());
    assert_eq!(
        select_tokens(&scores, 2, &Selection::FixedThreshold { tau_neg: 0.25 }),
        idx(&[1, 2])
    );
    assert_eq!(select_tokens(&scores, 4, &Selection::TopK), idx(&[0, 1, 2, 3]));
    assert_eq!(select_tokens(&scores, 2, &Selection::TopK), idx(&[1, 2]));
    assert_eq!(select_tokens(&scores, 2, &Selection::TopKMinusOne), idx(&[1]));
    assert!(select_tokens(&scores, 0, &Selection::TopK).is_empty());
    assert!(select_tokens(&scores, 0, &Selection::TopKMinusOne).is_empty());
    assert_eq!(
        select_tokens(&scores, 1, &Selection::Proportional { proportion: 0.01 }),
        idx(&[1])
    );
    assert_eq!(
        select_tokens(&scores, 1, &Selection::Proportional { proportion: 0.5 }),
        idx(&[1, 2])
    );
    // ties break towards the lower index
    assert_eq!(select_tokens(&[0.5, 0.5, 0.5], 2, &Selection::TopK), idx(&[0, 1]));
}

#[test]
fn suppress_examples() {
    let p = PrefixFeatures::new(vec![vec![1.0, -2.0], vec![0.5, 4.0], vec![3.0, 3.0]]).unwrap();
    assert_eq!(suppress(&p, &idx(&[0, 2]), 1.0).unwrap(), p);
    let zero = suppress(&p, &idx(&[1]), 0.0).unwrap();
    assert_eq!(zero.token(1), &[0.0, 0.0]);
    assert_eq!(zero.token(0), p.token(0));
    let d = suppress(&p, &idx(&[1]), DEFAULT_LAMBDA).unwrap();
    assert_eq!(d.token(1), &[0.5 * 0.3, 4.0 * 0.3]);
    assert_eq!(d.token(2), p.token(2));
    assert!(matches!(
        suppress(&p, &idx(&[3]), 0.5),
        Err(Error::IndexOutOfRange { index: 3, len: 3 })
    ));
    assert!(matches!(suppress(&p, &idx(&[0]), 1.5), Err(Error::Config(_))));
}

#[test]
fn config_and_report_json() {
    let cfg: SuppressionConfig = serde_json::from_str(r#"{"strategy":"fixed-threshold","tau_neg":0.3}"#).unwrap();
    assert_eq!(cfg.selection, Selection::FixedThreshold { tau_neg: 0.3 });
    assert_eq!(cfg.lambda, 0.3);
    assert!(serde_json::from_str::<SuppressionConfig>(r#"{"strategy":"fixed-threshold"}"#).is_err());
    assert!(serde_json::from_str::<SuppressionConfig>(r#"{"strategy":"proportional"}"#).is_err());
    let cfg: SuppressionConfig = serde_json::from_str(r#"{"strategy":"top-k-minus-one","lambda":0.1}"#).unwrap();
    assert_eq!(cfg.selection, Selection::TopKMinusOne);

    let p = basis_prefix(3);
    let (_, report) =
        apply_suppression(&p, &[emb(&[0.0, 1.0, 0.0])], &SuppressionConfig::new(Selection::TopK)).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["selected"], serde_json::json!([1]));
    assert_eq!(json["lambda"], serde_json::json!(0.3));
    assert_eq!(json["scores"].as_array().unwrap().len(), 3);
    let back: SuppressionReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);
}

proptest! {
    #[test]
    fn lambda_one_is_identity(p in prefix_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let s: BTreeSet<usize> = (0..p.len()).filter(|_| r.gen_bool(0.5)).collect();
        let out = suppress(&p, &s, 1.0).unwrap();
        prop_assert_eq!(bits(&out.flatten()), bits(&p.flatten()));
    }

    #[test]
    fn lambda_zero_annihilates_only_selected(p in prefix_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let s: BTreeSet<usize> = (0..p.len()).filter(|_| r.gen_bool(0.5)).collect();
        let out = suppress(&p, &s, 0.0).unwrap();
        for i in 0..p.len() {
            if s.contains(&i) {
                prop_assert!(out.token(i).iter().all(|&x| x == 0.0));
            } else {
                prop_assert_eq!(bits(out.token(i)), bits(p.token(i)));
            }
        }
    }

    #[test]
    fn suppression_composes(p in prefix_strategy(), seed in any::<u64>(), l1 in 0.0f64..=1.0, l2 in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let s: BTreeSet<usize> = (0..p.len()).filter(|_| r.gen_bool(0.5)).collect();
        let twice = suppress(&suppress(&p, &s, l1).unwrap(), &s, l2).unwrap();
        let once = suppress(&p, &s, l1 * l2).unwrap();
        for (a, b) in twice.flatten().iter().zip(once.flatten()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn cardinality_contracts(scores in prop::collection::vec(0.0f64..1.0, 1..40), k in 0usize..50, tau in 0.0f64..1.0, prop in 0.001f64..=1.0) {
        let l = scores.len();
        let fixed = select_tokens(&scores, k, &Selection::FixedThreshold { tau_neg: tau });
        prop_assert_eq!(fixed.len(), scores.iter().filter(|&&s| s > tau).count());
        let top = select_tokens(&scores, k, &Selection::TopK);
        prop_assert_eq!(top.len(), k.min(l));
        let top1 = select_tokens(&scores, k, &Selection::TopKMinusOne);
        prop_assert_eq!(top1.len(), k.saturating_sub(1).min(l));
        prop_assert!(top1.is_subset(&top));
        let proportional = select_tokens(&scores, k, &Selection::Proportional { proportion: prop });
        prop_assert_eq!(proportional.len(), ((prop * l as f64).ceil() as usize).min(l));
        // every selected token scores at least as high as every unselected one
        for set in [&top, &top1, &proportional] {
            if let Some(min_in) = set.iter().map(|&i| scores[i]).reduce(f64::min) {
                prop_assert!((0..l).filter(|i| !set.contains(i)).all(|i| scores[i] <= min_in));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one(p in prefix_strategy(), seed in any::<u64>(), n in 0usize..5) {
        let mut r = rng(seed);
        let negs: Vec<_> = (0..n).map(|_| random_unit(&mut r, p.dim())).collect();
        let att = negative_attention(&p, &negs).unwrap();
        for row in &att.rows {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        prop_assert!(att.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let cfg = SuppressionConfig::new(Selection::TopK);
        let (out, report) = apply_suppression(&p, &negs, &cfg).unwrap();
        report.check(p.len()).unwrap();
        prop_assert_eq!(report.selected.len(), n.min(p.len()));
        prop_assert_eq!(out.len(), p.len());
    }
}
