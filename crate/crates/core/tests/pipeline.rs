use std::collections::BTreeSet;

use owr_core::annotate::Edit;
use owr_core::pipeline::{
    bootstrap, merge_and_advance, run_experiment, run_experiment_with, run_gcd_stage, run_osr_stage, run_seed,
    run_sweep, ExperimentPlan, OracleAnnotator, PlanData, ScriptedAnnotator, SweepAxis, SyntheticPlanSpec, Variant,
};
use owr_core::{annotate::truth_by_id, ClassId, FeatureSet, Rng};

fn small() -> SyntheticPlanSpec {
    SyntheticPlanSpec { train_per_class: 40, test_per_class: 15, capacity: 80, seeds: vec![0, 1], ..Default::default() }
}

fn setup(spec: &SyntheticPlanSpec) -> (ExperimentPlan, PlanData) {
    (spec.plan(std::path::Path::new("unused")), spec.data().unwrap())
}

#[test]
fn bootstrap_contract() {
    let (plan, data) = setup(&small());
    let state = bootstrap(&plan, &data, &mut Rng::new(3)).unwrap();
    assert_eq!(state.registry.known, (1..=4).collect());
    assert_eq!(state.buffer.len(), 80);
    assert_eq!(state.classifier.classes, vec![1, 2, 3, 4]);
    assert!(state.calibration.is_some());
    let again = bootstrap(&plan, &data, &mut Rng::new(3)).unwrap();
    assert_eq!(state, again);

    let mut roomy = plan.clone();
    roomy.capacity = 10_000;
    let state = bootstrap(&roomy, &data, &mut Rng::new(3)).unwrap();
    assert_eq!(state.buffer.len(), data.phases[0].train.len());
}

#[test]
fn bootstrap_rejects_mismatched_initial_classes() {
    let (mut plan, data) = setup(&small());
    plan.initial_known = vec![1, 2, 3];
    assert!(bootstrap(&plan, &data, &mut Rng::new(0)).is_err());
}

#[test]
fn merge_contract() {
    let spec = SyntheticPlanSpec { capacity: 600, train_per_class: 150, ..small() };
    let (plan, data) = setup(&spec);
    let state = bootstrap(&plan, &data, &mut Rng::new(0)).unwrap();
    let same = merge_and_advance(state.clone(), &FeatureSet::empty(16).with_labels(vec![]).unwrap(), &plan.ds3, &plan.classifier)
        .unwrap();
    assert_eq!(same.registry.known, state.registry.known);
    assert_eq!(same.registry.phase, 1);
    assert_eq!(same.buffer.capacity(), 600);

    let z_n = data.phases[1].train.clone();
    let next = merge_and_advance(state.clone(), &z_n, &plan.ds3, &plan.classifier).unwrap();
    assert_eq!(next.classifier.classes.len(), 6);
    assert!(next.buffer.per_class_quota().values().all(|&q| q == 100));
    assert_eq!(next.buffer.capacity(), 600);

    let clash = data.phases[0].train.filter(|i| i < 5);
    assert!(merge_and_advance(state, &clash, &plan.ds3, &plan.classifier).is_err());
}

#[test]
fn osr_stage_guards() {
    let (plan, data) = setup(&small());
    let state = bootstrap(&plan, &data, &mut Rng::new(0)).unwrap();
    let empty = run_osr_stage(&state, &FeatureSet::empty(16).with_labels(vec![]).unwrap()).unwrap();
    assert!(empty.output.predictions.is_empty() && empty.output.rejected.is_empty());
    let known_only = run_osr_stage(&state, &data.phases[0].tests[0]).unwrap();
    assert!(known_only.report.is_none());
    let mixed = FeatureSet::concat(&[&data.phases[0].tests[0], &data.phases[0].stream]).unwrap();
    let report = run_osr_stage(&state, &mixed).unwrap().report.unwrap();
    assert!(report.hna.unwrap() > 0.9);
}

#[test]
fn gcd_stage_discovers_two_classes() {
    let (plan, data) = setup(&small());
    let mut rng = Rng::new(0);
    let state = bootstrap(&plan, &data, &mut rng).unwrap();
    let stream = FeatureSet::concat(&[&data.phases[0].tests[0], &data.phases[0].stream]).unwrap();
    let osr = run_osr_stage(&state, &stream).unwrap();
    let mut oracle = OracleAnnotator { truth: truth_by_id(&stream).unwrap(), config: Default::default() };
    let gcd = run_gcd_stage(&plan, &state, &stream, &osr, &mut oracle, &mut rng).unwrap();
    assert_eq!(gcd.z_n.classes(), [5, 6].into());
    assert_eq!(gcd.true_k, Some(6));
    assert!(gcd.estimated_k.is_some());
    assert!(gcd.report.unwrap().hca.unwrap() > 0.9);

    // Known-only stream: anything rejected is returned to the known pool.
    let known = &data.phases[0].tests[0];
    let osr = run_osr_stage(&state, known).unwrap();
    let mut oracle = OracleAnnotator { truth: truth_by_id(known).unwrap(), config: Default::default() };
    let gcd = run_gcd_stage(&plan, &state, known, &osr, &mut oracle, &mut rng).unwrap();
    assert!(gcd.z_n.is_empty());
    assert!(gcd.report.is_none());
}

#[test]
fn scripted_annotator_commits_session() {
    let (plan, data) = setup(&small());
    let mut rng = Rng::new(0);
    let state = bootstrap(&plan, &data, &mut rng).unwrap();
    let stream = data.phases[0].stream.clone();
    let osr = run_osr_stage(&state, &stream).unwrap();
    let clusters: BTreeSet<ClassId> = {
        let mut probe = OracleAnnotator { truth: truth_by_id(&stream).unwrap(), config: Default::default() };
        let gcd = run_gcd_stage(&plan, &state, &stream, &osr, &mut probe, &mut rng.clone()).unwrap();
        gcd.discovery.unwrap().novel.classes()
    };
    let edits: Vec<Edit> = clusters
        .iter()
        .enumerate()
        .map(|(i, &c)| Edit::Label { cluster: c, class_id: None, name: Some(format!("new-{i}")) })
        .collect();
    let mut scripted = ScriptedAnnotator { edits };
    let gcd = run_gcd_stage(&plan, &state, &stream, &osr, &mut scripted, &mut rng).unwrap();
    assert_eq!(gcd.z_n.classes().len(), clusters.len());
    assert!(gcd.z_n.classes().iter().all(|c| *c > 4));
}

#[test]
fn experiment_grows_known_set_and_is_deterministic() {
    let (plan, data) = setup(&small());
    let a = run_experiment_with(&plan, &data).unwrap();
    let sizes: Vec<usize> = a.runs[0].phases.iter().map(|p| p.known_classes.len()).collect();
    assert_eq!(sizes, vec![4, 6, 8, 10]);
    let b = run_experiment_with(&plan, &data).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.aggregate.len(), 4);
    assert_eq!(a.aggregate[0].acc.as_ref().unwrap().n, 2);
    for run in &a.runs {
        let ts1: Vec<f64> = run.phases.iter().map(|p| p.acc_per_test[0]).collect();
        assert!(ts1.windows(2).all(|w| w[1] <= w[0] + 0.02), "{ts1:?}");
        assert!(run.phases.iter().all(|p| p.buffer_rows <= 80));
    }
}

#[test]
fn plan_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticPlanSpec { seeds: vec![4], ..small() };
    let plan = spec.write(dir.path()).unwrap();
    let loaded = ExperimentPlan::load(&dir.path().join("plan.json")).unwrap();
    assert_eq!(plan, loaded);
    let from_files = run_experiment(&loaded).unwrap();
    let in_memory = run_experiment_with(&spec.plan(dir.path()), &spec.data().unwrap()).unwrap();
    assert_eq!(from_files.runs, in_memory.runs);
}

#[test]
fn ablation_variants() {
    let (mut plan, data) = setup(&small());
    plan.variant = Variant::IlE;
    let run = run_seed(&plan, &data, 0).unwrap();
    for p in &run.phases[..3] {
        assert_eq!(p.hna, Some(0.0));
        assert_eq!(p.hca, Some(0.0));
        assert_eq!(p.rejected_rows, 0);
        assert_eq!(p.new_classes.len(), 2);
    }
    plan.variant = Variant::OwrUe;
    plan.alpha = None;
    let run = run_seed(&plan, &data, 0).unwrap();
    assert_eq!(run.phases.last().unwrap().known_classes.len(), 10);
    assert!(run.phases[0].hca.unwrap() < 0.9);
}

#[test]
fn sweep_rows_cover_values_and_seeds() {
    let (plan, data) = setup(&small());
    let table = run_sweep(&plan, &data, SweepAxis::Capacity, &[40.0, 80.0, 160.0]).unwrap();
    assert_eq!(table.rows.len(), 3 * plan.seeds.len());
    let accs: Vec<f64> = table.summary.iter().map(|s| s.final_acc.unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[1] >= w[0] - 0.02), "{accs:?}");
    let dir = tempfile::tempdir().unwrap();
    table.write_csv(&dir.path().join("sweep.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + table.rows.len());
    assert!(run_sweep(&plan, &data, SweepAxis::Capacity, &[2.5]).is_err());
}
