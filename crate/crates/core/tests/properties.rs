//! Property tests over the fusion algebra, the softmax family, ranking
//! metrics, splits and dataset serialization.

use cfn_core::data::{load_dataset, save_dataset, split, Dataset, Sample, SplitSpec};
use cfn_core::fusion::{compute_q, fuse, pool, Collapse, FusionRule};
use cfn_core::loss::{approximation_log_gap, tempered_softmax};
use cfn_core::metrics::{average_precision, roc_auc};
use cfn_core::tensor::Tensor;
use cfn_core::{N_CONTINUOUS, N_DISCRETE, N_TARGETS};
use proptest::prelude::*;

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

fn two_rows() -> impl Strategy<Value = Tensor> {
    unit_vec(2 * N_DISCRETE).prop_map(|d| Tensor::matrix(2, N_DISCRETE, d).unwrap())
}

fn collapse() -> impl Strategy<Value = Collapse> {
    prop_oneof![Just(Collapse::Mean), Just(Collapse::Max)]
}

proptest! {
    #[test]
    fn q_is_the_columnwise_max(plus in two_rows()) {
        let q = compute_q(&plus).unwrap();
        for i in 0..N_DISCRETE {
            prop_assert_eq!(q[i], plus.get2(0, i).max(plus.get2(1, i)));
        }
    }

    #[test]
    fn pooling_with_certain_presence_returns_p_plus(plus in two_rows(), minus in two_rows(), c in collapse()) {
        let (p_hat, _) = pool(&[1.0; N_DISCRETE], &plus, &minus, c).unwrap();
        prop_assert_eq!(p_hat, plus);
    }

    #[test]
    fn pooling_equal_tables_returns_p_plus(plus in two_rows(), q in unit_vec(N_DISCRETE), c in collapse()) {
        let (p_hat, _) = pool(&q, &plus, &plus, c).unwrap();
        for (a, b) in p_hat.data().iter().zip(plus.data()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn convex_fusion_stays_in_the_unit_interval(
        plus in two_rows(),
        minus in two_rows(),
        y in unit_vec(N_TARGETS),
        lambda in 0.0..=1.0f64,
        c in collapse(),
        q_only in any::<bool>(),
    ) {
        let q = compute_q(&plus).unwrap();
        let (p_hat, context) = if q_only {
            let zeros = Tensor::zeros(&[2, N_DISCRETE]);
            pool(&q, &plus, &zeros, c).unwrap()
        } else {
            pool(&q, &plus, &minus, c).unwrap()
        };
        let rule = if q_only { FusionRule::QPlusOnly } else { FusionRule::Convex };
        let fused = fuse(&y, &context, lambda, rule).unwrap();
        for v in p_hat.data().iter().chain(&context).chain(&fused) {
            prop_assert!((0.0..=1.0).contains(v), "{v}");
        }
    }

    #[test]
    fn fusion_off_returns_the_emotion_stream(y in prop::collection::vec(-5.0..5.0f64, N_TARGETS), ctx in unit_vec(N_DISCRETE)) {
        let fused = fuse(&y, &ctx, 0.0, FusionRule::Convex).unwrap();
        prop_assert_eq!(
            fused.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tempered_softmax_is_a_distribution(h in prop::collection::vec(-20.0..20.0f64, 1..40), sigma in 0.2..5.0f64) {
        let p = tempered_softmax(&h, sigma).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn tempered_softmax_is_shift_invariant(h in prop::collection::vec(-5.0..5.0f64, 2..20), shift in -50.0..50.0f64, sigma in 0.5..2.0f64) {
        let a = tempered_softmax(&h, sigma).unwrap();
        let shifted: Vec<f64> = h.iter().map(|v| v + shift).collect();
        let b = tempered_softmax(&shifted, sigma).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn approximation_gap_vanishes_only_at_one(h in prop::collection::vec(-3.0..3.0f64, 2..10), sigma in 0.3..3.0f64) {
        prop_assert_eq!(approximation_log_gap(&h, 1.0).unwrap(), 0.0);
        let distinct = h.iter().any(|v| (v - h[0]).abs() > 1e-6);
        if (sigma - 1.0f64).abs() > 1e-3 && distinct {
            prop_assert!(approximation_log_gap(&h, sigma).unwrap().abs() > 0.0);
        }
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms(
        pairs in prop::collection::vec((-3.0..3.0f64, any::<bool>()), 2..60)
    ) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!((ap - average_precision(&mapped, &labels).unwrap()).abs() < 1e-12);
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - roc_auc(&mapped, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&auc));
    }

    #[test]
    fn auc_flips_under_score_negation(
        pairs in prop::collection::vec((-3.0..3.0f64, any::<bool>()), 2..60)
    ) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}

fn sample_strategy(d_x: usize) -> impl Strategy<Value = Sample> {
    (
        prop::collection::vec(-10.0..10.0f64, d_x),
        unit_vec(N_DISCRETE),
        prop::collection::vec(1.0..=10.0f64, N_CONTINUOUS),
        unit_vec(4),
        unit_vec(2),
    )
        .prop_map(|(features, emotions_discrete, emotions_continuous, place_attrs, object_attrs)| Sample {
            id: String::new(),
            features,
            emotions_discrete,
            emotions_continuous,
            place_attrs,
            object_attrs,
        })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(sample_strategy(3), 1..80).prop_map(|mut samples| {
        for (k, s) in samples.iter_mut().enumerate() {
            s.id = format!("id-{k}");
        }
        Dataset::new(samples).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_every_index(ds in dataset_strategy(), seed in any::<u64>()) {
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let parts = split(&ds, &spec).unwrap();
        let mut all: Vec<usize> = parts.train.iter().chain(&parts.test).chain(&parts.val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        prop_assert_eq!(split(&ds, &spec).unwrap(), parts);
    }

    #[test]
    fn jsonl_round_trip_is_exact(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(back.samples(), ds.samples());
        prop_assert_eq!(back.targets(), ds.targets());
    }
}
