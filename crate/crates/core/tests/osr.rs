use owr_core::classify::{fit_labeled, ClassifierSpec};
use owr_core::ingest::{generate_blobs, BlobSpec};
use owr_core::osr::{decade_grid, predict_open_set, score_open_set};
use owr_core::{argmax, UNKNOWN};
use proptest::prelude::*;

fn prob_vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, 1..8).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn augmented_distribution_is_consistent(p in prob_vector(), e in -10i32..=10) {
        let alpha = 10f64.powi(e);
        let classes: Vec<u32> = (1..=p.len() as u32).collect();
        let s = score_open_set(&p, alpha, &classes).unwrap();
        prop_assert_eq!(s.augmented_probs.len(), p.len() + 1);
        prop_assert!((s.augmented_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = argmax(&s.augmented_probs).unwrap();
        if s.augmented_probs[0] != s.augmented_probs[1 + argmax(&p).unwrap()] {
            prop_assert_eq!(top == 0, s.decision == UNKNOWN);
        }
    }

    #[test]
    fn rejection_grows_with_alpha(p in prob_vector(), e in -10i32..10) {
        let classes: Vec<u32> = (1..=p.len() as u32).collect();
        let lo = score_open_set(&p, 10f64.powi(e), &classes).unwrap();
        let hi = score_open_set(&p, 10f64.powi(e + 1), &classes).unwrap();
        prop_assert!(!lo.is_rejected() || hi.is_rejected());
    }
}

#[test]
fn rejected_rows_keep_their_ids() {
    let fs = generate_blobs(&BlobSpec { num_classes: 5, dim: 6, per_class: 20, centroid_scale: 10.0, noise_sigma: 1.0, seed: 3 })
        .unwrap();
    let labels = fs.labels().unwrap().to_vec();
    let train = fs.filter(|i| labels[i] <= 3);
    let clf = fit_labeled(&train, &[1, 2, 3], &ClassifierSpec::ncm(2.0)).unwrap();
    let mut last = 0;
    for alpha in decade_grid(-2, 6) {
        let out = predict_open_set(&clf, &fs, alpha).unwrap();
        assert!(out.rejected.len() >= last);
        last = out.rejected.len();
        for (k, &row) in out.rejected_rows.iter().enumerate() {
            assert_eq!(out.rejected.ids()[k], fs.ids()[row]);
        }
    }
    let out = predict_open_set(&clf, &fs, 1e3).unwrap();
    let novel_rejected = out.rejected_rows.iter().filter(|&&r| labels[r] > 3).count();
    assert!(novel_rejected >= 38, "{novel_rejected}");
}
