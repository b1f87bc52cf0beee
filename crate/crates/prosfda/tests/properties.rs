//! Property tests for the numeric invariants the pipeline leans on.

use proptest::prelude::*;

use prosfda::losses::{confidence_maps, supervised_ce, weighted_st_ce};
use prosfda::model::LabelMap;
use prosfda::numerics::{argmax_lastaxis, softmax, top2_lastaxis, RealArray};
use prosfda::prototypes::{cosine_weights, prototype_labels, BatchPrototypes, PrototypeBank, WeightMap};

fn finite_vec(len: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-bound..bound, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalize_and_shift_invariant(
        data in finite_vec(24, 30.0),
        shift in -50.0f64..50.0,
        temp in 0.05f64..5.0,
    ) {
        let a = RealArray::from_vec(vec![4, 6], data.clone()).unwrap();
        let s = softmax(&a, temp).unwrap();
        for row in s.rows() {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
        }
        let shifted = RealArray::from_vec(
            vec![4, 6],
            data.iter().map(|v| v + shift).collect(),
        ).unwrap();
        let s2 = softmax(&shifted, temp).unwrap();
        for (a, b) in s.as_slice().iter().zip(s2.as_slice()) {
            prop_assert!((a - b).abs() < 1e-12, "shift changed softmax: {a} vs {b}");
        }
    }

    #[test]
    fn argmax_commutes_with_softmax(data in finite_vec(30, 20.0)) {
        let a = RealArray::from_vec(vec![6, 5], data).unwrap();
        let s = softmax(&a, 1.0).unwrap();
        prop_assert_eq!(argmax_lastaxis(&a).unwrap(), argmax_lastaxis(&s).unwrap());
    }

    #[test]
    fn top2_ordering_holds(data in finite_vec(28, 10.0)) {
        let a = RealArray::from_vec(vec![7, 4], data).unwrap();
        let (v1, v2) = top2_lastaxis(&a).unwrap();
        for (row, (&top1, &top2)) in a.rows().zip(v1.iter().zip(&v2)) {
            prop_assert!(top1 >= top2);
            prop_assert!(row.iter().all(|&x| x <= top1));
            prop_assert_eq!(row.iter().filter(|&&x| x > top2).count() <= 1, true);
        }
    }

    #[test]
    fn cosine_weights_bounded_for_random_banks(
        protos in finite_vec(12, 5.0),
        feats in finite_vec(36, 5.0),
    ) {
        let mut bank = PrototypeBank::new_empty(3, 4, 0.9).unwrap();
        bank.ema_refresh(&BatchPrototypes { means: protos, counts: vec![1, 1, 1] }).unwrap();
        let features = RealArray::from_vec(vec![3, 3, 4], feats).unwrap();
        let wm = cosine_weights(&features, &bank).unwrap();
        for &v in wm.values.as_slice() {
            prop_assert!(v.abs() <= 1.0 + 1e-12);
            prop_assert!(v.is_finite());
        }
        // Labels exist and are invariant to positive rescaling of weights.
        let labels = prototype_labels(&wm).unwrap();
        let scaled = WeightMap {
            values: RealArray::from_vec(
                vec![3, 3, 3],
                wm.values.as_slice().iter().map(|v| v * 2.5).collect(),
            ).unwrap(),
            valid: wm.valid.clone(),
        };
        prop_assert_eq!(labels, prototype_labels(&scaled).unwrap());
    }

    #[test]
    fn weighted_st_bounded_by_plain_ce(
        logits_data in finite_vec(27, 8.0),
        weights_data in finite_vec(27, 1.0),
        labels in proptest::collection::vec(0usize..3, 9),
    ) {
        let logits = RealArray::from_vec(vec![3, 3, 3], logits_data).unwrap();
        let pseudo = LabelMap::new(3, 3, labels).unwrap();
        let wm = WeightMap {
            values: RealArray::from_vec(vec![3, 3, 3], weights_data).unwrap(),
            valid: vec![true; 3],
        };
        let weighted = weighted_st_ce(&logits, &pseudo, &wm, true).unwrap();
        let plain = supervised_ce(&logits, &pseudo).unwrap();
        // Clamped weights never exceed 1 here, so the weighted loss cannot.
        prop_assert!(weighted.value <= plain.value + 1e-12);
        prop_assert!(weighted.value >= -1e-12);
    }

    #[test]
    fn confidence_ratios_at_least_one(
        logit_data in finite_vec(24, 10.0),
        weight_data in finite_vec(24, 1.0),
    ) {
        let probs = softmax(&RealArray::from_vec(vec![2, 4, 3], logit_data).unwrap(), 1.0).unwrap();
        let wm = WeightMap {
            values: RealArray::from_vec(vec![2, 4, 3], weight_data).unwrap(),
            valid: vec![true; 3],
        };
        let conf = confidence_maps(&probs, &wm, 0.1).unwrap();
        for v in conf.teacher.iter().chain(&conf.proto) {
            prop_assert!(*v >= 1.0 && v.is_finite());
        }
    }
}
