use std::collections::{BTreeMap, BTreeSet};

use owr_core::discover::{
    discover_categories, estimate_class_count, ss_kmeans_pp, EstimationConfig, SsKmeansConfig,
};
use owr_core::exemplar::ExemplarBuffer;
use owr_core::ingest::{generate_blobs, BlobSpec};
use owr_core::metrics::clustering_accuracy;
use owr_core::{ClassId, FeatureSet, Rng};
use proptest::prelude::*;

fn blobs(classes: usize, dim: usize, per_class: usize, sep: f64, seed: u64) -> FeatureSet {
    generate_blobs(&BlobSpec {
        num_classes: classes,
        dim,
        per_class,
        centroid_scale: sep,
        noise_sigma: 1.0,
        seed,
    })
    .unwrap()
}

fn split(fs: &FeatureSet, known: usize) -> (FeatureSet, FeatureSet) {
    let labels = fs.require_labels().unwrap().to_vec();
    (
        fs.filter(|i| labels[i] as usize <= known),
        fs.filter(|i| labels[i] as usize > known),
    )
}

fn buffer_of(fs: FeatureSet) -> ExemplarBuffer {
    let quota: BTreeMap<ClassId, usize> =
        fs.class_indices().into_iter().map(|(c, r)| (c, r.len())).collect();
    ExemplarBuffer::new(fs.len(), fs, quota).unwrap()
}

/// Known blobs become the buffer (first `per_buffer` rows per class), the
/// remaining known rows plus all novel rows form the rejected set.
fn scenario(known: usize, novel: usize, seed: u64) -> (ExemplarBuffer, FeatureSet) {
    let fs = blobs(known + novel, 16, 40, 10.0, seed);
    let (k, n) = split(&fs, known);
    let idx = k.class_indices();
    let keep: BTreeSet<usize> = idx.values().flat_map(|r| r[..20].iter().copied()).collect();
    let buffer = buffer_of(k.filter(|i| keep.contains(&i)));
    let extra = k.filter(|i| !keep.contains(&i) && i % 10 == 0);
    (buffer, FeatureSet::concat(&[&extra, &n]).unwrap())
}

#[test]
fn novel_blobs_are_recovered() {
    let fs = blobs(5, 8, 30, 20.0, 3);
    let (sup, unl) = split(&fs, 3);
    let truth = unl.require_labels().unwrap().to_vec();
    let res = ss_kmeans_pp(&sup, &unl.clone().without_labels(), &SsKmeansConfig { k: 5, seed: 1, ..Default::default() })
        .unwrap();
    let (acc, _) = clustering_accuracy(&truth, res.unlabeled_assignments()).unwrap();
    assert_eq!(acc, 1.0);
    assert!(res.forced_labels_held);
    assert_eq!(res.partition.novel_labels, [4, 5].into());
}

#[test]
fn estimate_lands_near_true_total() {
    for seed in 0..12 {
        let (buffer, rejected) = scenario(6, 2, seed);
        let cfg = EstimationConfig { seed, ..Default::default() };
        let est = estimate_class_count(&buffer, &rejected, &cfg, &mut Rng::new(seed)).unwrap();
        assert!((7..=9).contains(&est.k), "seed {seed}: {}", est.k);
        assert_eq!(est.anchor.len(), 4);
        assert_eq!(est.validation.len(), 2);
        assert!(est.evaluations() <= cfg.max_evals + 4);
    }
}

#[test]
fn estimate_memoizes_and_is_deterministic() {
    let (buffer, rejected) = scenario(6, 2, 11);
    let cfg = EstimationConfig { seed: 4, ..Default::default() };
    let a = estimate_class_count(&buffer, &rejected, &cfg, &mut Rng::new(9)).unwrap();
    let b = estimate_class_count(&buffer, &rejected, &cfg, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    let distinct: BTreeSet<usize> = a.trace.iter().copied().collect();
    assert_eq!(distinct.len(), a.trace.len());
    assert!(a.trace.iter().all(|&k| k > a.lower && k <= a.upper));
}

#[test]
fn small_k_max_clamps_estimate() {
    let (buffer, rejected) = scenario(6, 3, 2);
    let cfg = EstimationConfig { k_max: 7, ..Default::default() };
    let est = estimate_class_count(&buffer, &rejected, &cfg, &mut Rng::new(0)).unwrap();
    assert_eq!(est.upper, 7);
    assert!(est.k <= 7);
}

#[test]
fn estimation_needs_three_classes() {
    let (buffer, rejected) = scenario(2, 1, 0);
    assert!(estimate_class_count(&buffer, &rejected, &EstimationConfig::default(), &mut Rng::new(0)).is_err());
    let (buffer, _) = scenario(4, 1, 0);
    assert!(estimate_class_count(&buffer, &FeatureSet::empty(16), &EstimationConfig::default(), &mut Rng::new(0))
        .is_err());
}

#[test]
fn discovery_collects_novel_rows() {
    for seed in 0..3 {
        let (buffer, rejected) = scenario(4, 2, seed);
        let truth = rejected.require_labels().unwrap().to_vec();
        let novel_ids: BTreeSet<u64> =
            (0..rejected.len()).filter(|&i| truth[i] > 4).map(|i| rejected.ids()[i]).collect();
        let d = discover_categories(
            &buffer,
            &rejected,
            &EstimationConfig { seed, ..Default::default() },
            &SsKmeansConfig { seed, ..Default::default() },
            &mut Rng::new(seed),
        )
        .unwrap();
        let found = d.novel.ids().iter().filter(|id| novel_ids.contains(id)).count();
        assert!(found as f64 >= 0.95 * novel_ids.len() as f64, "seed {seed}: {found}/{}", novel_ids.len());
        assert_eq!(d.novel.len() + d.returned_to_known.len(), rejected.len());
        let back = d.returned_to_known.labels().unwrap();
        assert!(back.iter().all(|l| *l <= 4));
        assert!(d.novel.labels().unwrap().iter().all(|l| *l > 4));
    }
}

#[test]
fn discovery_without_novel_rows() {
    let fs = blobs(4, 16, 30, 10.0, 5);
    let buffer = buffer_of(fs.filter(|i| i % 30 < 20));
    let rejected = fs.filter(|i| i % 30 >= 28);
    let d = discover_categories(
        &buffer,
        &rejected,
        &EstimationConfig::default(),
        &SsKmeansConfig::default(),
        &mut Rng::new(1),
    )
    .unwrap();
    assert!(d.k >= 4);
    assert!(d.novel.len() <= 1);
}

fn random_instance() -> impl Strategy<Value = (FeatureSet, FeatureSet, usize, u64)> {
    (2usize..5, 0usize..3, 1usize..4, any::<u64>()).prop_map(|(known, extra, dim, seed)| {
        let mut rng = Rng::new(seed);
        let n_sup = known * 3;
        let sup_rows: Vec<Vec<f64>> =
            (0..n_sup).map(|_| (0..dim).map(|_| rng.uniform() * 10.0).collect()).collect();
        let labels: Vec<ClassId> = (0..n_sup).map(|i| (i % known) as ClassId + 1).collect();
        let unl_rows: Vec<Vec<f64>> =
            (0..12).map(|_| (0..dim).map(|_| rng.uniform() * 10.0).collect()).collect();
        (
            FeatureSet::labeled(&sup_rows, &labels).unwrap(),
            FeatureSet::from_rows(&unl_rows).unwrap(),
            known + extra,
            seed,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forced_labels_and_descent((sup, unl, k, seed) in random_instance()) {
        let res = ss_kmeans_pp(&sup, &unl, &SsKmeansConfig { k, seed, restarts: 2, ..Default::default() }).unwrap();
        prop_assert!(res.forced_labels_held);
        prop_assert_eq!(&res.partition.assignments[..sup.len()], sup.labels().unwrap());
        let mut prev = res.initial_inertia;
        for &v in &res.inertia_history {
            prop_assert!(v <= prev + 1e-8);
            prev = v;
        }
        prop_assert!(res.partition.inertia <= prev + 1e-8);
        prop_assert!(res.partition.validate().is_ok());
    }
}

#[test]
fn partition_file_round_trip() {
    use owr_core::discover::PartitionFile;
    use owr_core::ingest::{write_archive, Dtype};
    let (buffer, rejected) = scenario(4, 2, 5);
    let found = discover_categories(&buffer, &rejected, &EstimationConfig::default(), &SsKmeansConfig::default(), &mut Rng::new(1))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_archive(&rejected, &dir.path().join("rejected.owr"), Dtype::F64).unwrap();
    let pf = PartitionFile::from_discovery(
        &found,
        &rejected,
        &dir.path().join("rejected.owr"),
        &dir.path().join("centroids.owr"),
    )
    .unwrap();
    pf.save(&dir.path().join("part.json")).unwrap();
    let back = PartitionFile::load(&dir.path().join("part.json")).unwrap();
    assert_eq!(pf, back);
    let zhat = back.zhat().unwrap();
    assert_eq!(zhat, found.novel);
    let cents = owr_core::ingest::read_archive(&back.centroids).unwrap();
    assert_eq!(cents.len(), found.k);
}
