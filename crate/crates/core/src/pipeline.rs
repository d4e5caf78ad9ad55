//! Phase orchestration: bootstrap, open-set recognition, category discovery,
//! annotation and exemplar-replay merging, plus experiment and sweep runners.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{oracle_annotate, truth_by_id, AnnotationSession, Edit, OracleConfig};
use crate::classify::{fit, ClassifierSpec, FittedClassifier};
use crate::discover::{discover_categories, Discovery, EstimationConfig, SsKmeansConfig};
use crate::error::{invalid, Error, Result};
use crate::exemplar::{select_exemplars, Ds3Config, ExemplarBuffer};
use crate::ingest::{generate_blobs, read_archive, write_archive_with, BlobSpec, Dtype};
use crate::metrics::{classification_accuracy, hca, hna, MetricReport};
use crate::osr::{calibrate_alpha, predict_open_set, Calibration, OpenSetOutput, OsrConfig};
use crate::rng::Rng;
use crate::types::{ClassId, ClassRegistry, FeatureSet, UNKNOWN};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Alpha used when open-set rejection is switched off.
pub const DISABLED_ALPHA: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub train: PathBuf,
    #[serde(default)]
    pub tests: Vec<PathBuf>,
    /// Extra rows appended to the recognition stream, typically the next
    /// phase's training set.
    #[serde(default)]
    pub streams: Vec<PathBuf>,
}

/// Which stages run. `OwrUe` labels every rejected row without clustering;
/// `IlE` disables rejection and labels the whole stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    OwrUe,
    IlE,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(default = "default_name")]
    pub name: String,
    pub phases: Vec<PhasePlan>,
    pub initial_known: Vec<ClassId>,
    pub capacity: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub kmeans: SsKmeansConfig,
    #[serde(default)]
    pub osr: OsrConfig,
    #[serde(default)]
    pub ds3: Ds3Config,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Fixed alpha; calibrated on the phase-0 buffer when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub recalibrate_alpha: bool,
    #[serde(default)]
    pub variant: Variant,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return invalid("plan has no phases");
        }
        if self.initial_known.is_empty() || self.initial_known.contains(&UNKNOWN) {
            return invalid("initial_known must be non-empty and exclude class 0");
        }
        if self.capacity < self.initial_known.len() {
            return invalid("capacity is smaller than the number of initial classes");
        }
        if self.seeds.is_empty() {
            return invalid("plan has no seeds");
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return invalid(format!("alpha must be positive, got {a}"));
            }
        }
        self.classifier.validate()?;
        self.ds3.validate()
    }

    /// Read a plan; relative archive paths resolve against the plan's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let mut plan: Self = serde_json::from_slice(&fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut plan.phases {
            for f in std::iter::once(&mut p.train).chain(&mut p.tests).chain(&mut p.streams) {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn effective_alpha(&self) -> Option<f64> {
        match (self.variant, self.alpha) {
            (Variant::IlE, None) => Some(DISABLED_ALPHA),
            (_, a) => a,
        }
    }
}

/// In-memory archives of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseData {
    pub train: FeatureSet,
    pub tests: Vec<FeatureSet>,
    pub stream: FeatureSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanData {
    pub phases: Vec<PhaseData>,
}

impl PlanData {
    pub fn load(plan: &ExperimentPlan) -> Result<Self> {
        let read = |p: &PathBuf| {
            read_archive(p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        };
        let mut phases = Vec::new();
        for p in &plan.phases {
            let train = read(&p.train)?;
            let tests = p.tests.iter().map(read).collect::<Result<Vec<_>>>()?;
            let streams = p.streams.iter().map(read).collect::<Result<Vec<_>>>()?;
            let stream = FeatureSet::concat(&streams.iter().collect::<Vec<_>>())?;
            phases.push(PhaseData { train, tests, stream });
        }
        Ok(Self { phases })
    }

    fn check(&self, plan: &ExperimentPlan) -> Result<()> {
        if self.phases.len() != plan.phases.len() {
            return invalid("plan and data disagree on the number of phases");
        }
        let first = &self.phases[0].train;
        let classes = first.require_labels().map(|_| first.classes())?;
        let initial: BTreeSet<ClassId> = plan.initial_known.iter().copied().collect();
        if classes != initial {
            return invalid(format!("phase-0 training classes {classes:?} differ from initial_known {initial:?}"));
        }
        for (t, p) in self.phases.iter().enumerate() {
            for fs in p.tests.iter().chain(std::iter::once(&p.stream)) {
                if !fs.is_empty() {
                    fs.require_labels()
                        .map_err(|_| Error::InvalidArgument(format!("phase {t}: evaluation rows need ground truth")))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub registry: ClassRegistry,
    pub buffer: ExemplarBuffer,
    pub classifier: FittedClassifier,
    pub osr_config: OsrConfig,
    pub calibration: Option<Calibration>,
    pub history: Vec<PhaseReport>,
}

impl PhaseState {
    pub fn phase(&self) -> u32 {
        self.registry.phase
    }

    pub fn alpha(&self) -> f64 {
        self.osr_config.alpha
    }
}

fn choose_alpha(
    plan: &ExperimentPlan,
    buffer: &ExemplarBuffer,
    rng: &mut Rng,
) -> Result<(OsrConfig, Option<Calibration>)> {
    let mut cfg = plan.osr.clone();
    match plan.effective_alpha() {
        Some(a) => {
            cfg.alpha = a;
            Ok((cfg, None))
        }
        None => {
            let cal = calibrate_alpha(buffer, &plan.classifier, &plan.osr, rng)?;
            cfg.alpha = cal.alpha;
            Ok((cfg, Some(cal)))
        }
    }
}

/// Select exemplars on the phase-0 data, fit, and settle alpha.
pub fn bootstrap(plan: &ExperimentPlan, data: &PlanData, rng: &mut Rng) -> Result<PhaseState> {
    plan.validate()?;
    data.check(plan)?;
    let registry = ClassRegistry::new(plan.initial_known.iter().copied(), plan.estimation.k_max)?;
    let buffer = select_exemplars(&data.phases[0].train, &registry, plan.capacity, &plan.ds3)?;
    let classifier = fit(&buffer, &plan.classifier)?;
    let (osr_config, calibration) = choose_alpha(plan, &buffer, rng)?;
    Ok(PhaseState { registry, buffer, classifier, osr_config, calibration, history: Vec::new() })
}

/// Ground truth with classes outside `known` mapped to 0.
pub fn mark_unknowns(labels: &[ClassId], known: &BTreeSet<ClassId>) -> Vec<ClassId> {
    labels.iter().map(|l| if known.contains(l) { *l } else { UNKNOWN }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsrStage {
    pub output: OpenSetOutput,
    /// HNA terms, present when the stream has both known and unknown rows.
    pub report: Option<MetricReport>,
}

pub fn run_osr_stage(state: &PhaseState, stream: &FeatureSet) -> Result<OsrStage> {
    let output = predict_open_set(&state.classifier, stream, state.alpha())?;
    let report = match stream.labels() {
        Some(labels) => {
            let truth = mark_unknowns(labels, &state.registry.known);
            let has_known = truth.iter().any(|&l| l != UNKNOWN);
            let has_unknown = truth.contains(&UNKNOWN);
            if has_known && has_unknown {
                Some(hna(&truth, &output.decisions())?)
            } else {
                None
            }
        }
        None => None,
    };
    Ok(OsrStage { output, report })
}

/// Turns discovered groups into labeled rows of novel classes.
pub trait Annotator {
    fn annotate(&mut self, zhat: &FeatureSet, known: &BTreeSet<ClassId>) -> Result<FeatureSet>;
}

/// Ground-truth annotator for automated runs.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    pub truth: BTreeMap<u64, ClassId>,
    pub config: OracleConfig,
}

impl Annotator for OracleAnnotator {
    fn annotate(&mut self, zhat: &FeatureSet, known: &BTreeSet<ClassId>) -> Result<FeatureSet> {
        oracle_annotate(zhat, &self.truth, known, &self.config)
    }
}

/// Applies a fixed edit script through an annotation session.
#[derive(Debug, Clone)]
pub struct ScriptedAnnotator {
    pub edits: Vec<Edit>,
}

impl Annotator for ScriptedAnnotator {
    fn annotate(&mut self, zhat: &FeatureSet, known: &BTreeSet<ClassId>) -> Result<FeatureSet> {
        if zhat.is_empty() {
            return Ok(zhat.clone());
        }
        let mut session = AnnotationSession::replay("scripted", zhat, known.clone(), &self.edits)?;
        Ok(session.commit()?.z_n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcdStage {
    pub z_n: FeatureSet,
    pub discovery: Option<Discovery>,
    /// HCA terms, present when the stream has both known and novel rows.
    pub report: Option<MetricReport>,
    pub estimated_k: Option<usize>,
    pub estimate_evaluations: Option<usize>,
    pub true_k: Option<usize>,
}

/// Discover and annotate the rejected rows of `osr`, then score HCA on the
/// whole stream.
pub fn run_gcd_stage(
    plan: &ExperimentPlan,
    state: &PhaseState,
    stream: &FeatureSet,
    osr: &OsrStage,
    annotator: &mut dyn Annotator,
    rng: &mut Rng,
) -> Result<GcdStage> {
    let known = &state.registry.known;
    let rejected = osr.output.rejected.clone().without_labels();
    let mut pred = osr.output.decisions();
    let mut discovery = None;
    let z_n = match plan.variant {
        Variant::Full if !rejected.is_empty() => {
            let km = SsKmeansConfig { seed: rng.next_u64(), ..plan.kmeans.clone() };
            let est = EstimationConfig { seed: rng.next_u64(), ..plan.estimation.clone() };
            let d = discover_categories(&state.buffer, &rejected, &est, &km, rng)?;
            for (&row, &c) in osr.output.rejected_rows.iter().zip(&d.rejected_assignments) {
                pred[row] = c;
            }
            let z = annotator.annotate(&d.novel, known)?;
            discovery = Some(d);
            z
        }
        Variant::Full => FeatureSet::empty(stream.dim()).with_labels(Vec::new())?,
        Variant::OwrUe => {
            // Every rejected row sits in one pseudo-cluster.
            let pseudo = state.registry.max_id() + 1;
            for &row in &osr.output.rejected_rows {
                pred[row] = pseudo;
            }
            annotator.annotate(&rejected.with_labels(vec![pseudo; osr.output.rejected_rows.len()])?, known)?
        }
        Variant::IlE => {
            let pseudo = state.registry.max_id() + 1;
            let all = stream.clone().without_labels();
            let n = all.len();
            annotator.annotate(&all.with_labels(vec![pseudo; n])?, known)?
        }
    };
    if let Some(l) = z_n.labels() {
        if let Some(c) = l.iter().find(|c| known.contains(c) || **c == UNKNOWN) {
            return invalid(format!("annotation produced class {c}, which is not novel"));
        }
    }
    let (report, true_k) = match stream.labels() {
        Some(labels) => {
            let has_known = labels.iter().any(|l| known.contains(l));
            let has_novel = labels.iter().any(|l| !known.contains(l));
            let report = if has_known && has_novel { Some(hca(labels, &pred, known)?) } else { None };
            let total: BTreeSet<ClassId> = known.iter().chain(labels).copied().collect();
            (report, Some(total.len()))
        }
        None => (None, None),
    };
    Ok(GcdStage {
        z_n,
        estimated_k: discovery.as_ref().map(|d| d.estimate.k),
        estimate_evaluations: discovery.as_ref().map(|d| d.estimate.evaluations()),
        discovery,
        report,
        true_k,
    })
}

/// Merge Z_t^n into the buffer contents, re-select exemplars at unchanged
/// capacity and refit from scratch.
pub fn merge_and_advance(
    state: PhaseState,
    z_n: &FeatureSet,
    ds3: &Ds3Config,
    spec: &ClassifierSpec,
) -> Result<PhaseState> {
    let new: BTreeSet<ClassId> = if z_n.is_empty() { BTreeSet::new() } else { z_n.require_labels().map(|_| z_n.classes())? };
    if let Some(c) = new.iter().find(|c| state.registry.known.contains(c)) {
        return invalid(format!("class {c} is already known"));
    }
    let merged = if z_n.is_empty() {
        state.buffer.entries().clone()
    } else {
        FeatureSet::concat(&[state.buffer.entries(), z_n])?
    };
    let mut registry = state.registry.clone();
    registry.discovered_this_phase = BTreeSet::new();
    registry.known.extend(new.iter().copied());
    registry.phase += 1;
    registry.validate()?;
    let buffer = select_exemplars(&merged, &registry, state.buffer.capacity(), ds3)?;
    let classifier = fit(&buffer, spec)?;
    Ok(PhaseState { registry, buffer, classifier, ..state })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u32,
    pub known_classes: Vec<ClassId>,
    pub alpha: f64,
    /// Closed-set accuracy over the union of test sets seen so far.
    pub acc: Option<f64>,
    pub acc_per_test: Vec<f64>,
    pub aks: Option<f64>,
    pub aus: Option<f64>,
    pub hna: Option<f64>,
    pub hca_aks: Option<f64>,
    pub ans: Option<f64>,
    pub hca: Option<f64>,
    pub stream_rows: usize,
    pub rejected_rows: usize,
    pub estimated_k: Option<usize>,
    pub estimate_evaluations: Option<usize>,
    pub true_k: Option<usize>,
    pub new_classes: Vec<ClassId>,
    pub labeled_rows: usize,
    pub buffer_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub alpha: f64,
    pub phases: Vec<PhaseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseAggregate {
    pub phase: u32,
    pub acc: Option<Stat>,
    pub acc_first_test: Option<Stat>,
    pub hna: Option<Stat>,
    pub hca: Option<Stat>,
    pub estimated_k: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub variant: Variant,
    pub runs: Vec<RunReport>,
    pub aggregate: Vec<PhaseAggregate>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn aggregate(runs: &[RunReport]) -> Vec<PhaseAggregate> {
    let phases = runs.iter().map(|r| r.phases.len()).max().unwrap_or(0);
    (0..phases)
        .map(|t| {
            let pick = |f: &dyn Fn(&PhaseReport) -> Option<f64>| {
                let v: Vec<f64> = runs.iter().filter_map(|r| r.phases.get(t).and_then(f)).collect();
                Stat::of(&v)
            };
            PhaseAggregate {
                phase: t as u32,
                acc: pick(&|p| p.acc),
                acc_first_test: pick(&|p| p.acc_per_test.first().copied()),
                hna: pick(&|p| p.hna),
                hca: pick(&|p| p.hca),
                estimated_k: pick(&|p| p.estimated_k.map(|k| k as f64)),
            }
        })
        .collect()
}

fn closed_set_accuracy(clf: &FittedClassifier, fs: &FeatureSet) -> Result<Option<f64>> {
    if fs.is_empty() {
        return Ok(None);
    }
    let truth = fs.require_labels()?;
    Ok(Some(classification_accuracy(truth, &clf.predict(fs)?)?))
}

/// One full run under a single seed.
pub fn run_seed(plan: &ExperimentPlan, data: &PlanData, seed: u64) -> Result<RunReport> {
    let mut rng = Rng::new(seed);
    let mut state = bootstrap(plan, data, &mut rng.split())?;
    let alpha0 = state.alpha();
    let last = data.phases.len() - 1;
    for t in 0..data.phases.len() {
        let ctx = |e: Error| Error::InvalidArgument(format!("phase {t}: {e}"));
        let seen: Vec<&FeatureSet> = data.phases[..=t].iter().flat_map(|p| p.tests.iter()).collect();
        let tests = FeatureSet::concat(&seen).map_err(ctx)?;
        let acc = closed_set_accuracy(&state.classifier, &tests).map_err(ctx)?;
        let acc_per_test = data.phases[..=t]
            .iter()
            .flat_map(|p| p.tests.iter())
            .filter_map(|ts| closed_set_accuracy(&state.classifier, ts).transpose())
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?;
        let stream = FeatureSet::concat(&[&tests, &data.phases[t].stream]).map_err(ctx)?;

        let mut report = PhaseReport {
            phase: state.phase(),
            known_classes: state.registry.known.iter().copied().collect(),
            alpha: state.alpha(),
            acc,
            acc_per_test,
            aks: None,
            aus: None,
            hna: None,
            hca_aks: None,
            ans: None,
            hca: None,
            stream_rows: stream.len(),
            rejected_rows: 0,
            estimated_k: None,
            estimate_evaluations: None,
            true_k: None,
            new_classes: Vec::new(),
            labeled_rows: 0,
            buffer_rows: state.buffer.len(),
        };
        if stream.is_empty() {
            state.history.push(report);
            continue;
        }
        let osr = run_osr_stage(&state, &stream).map_err(ctx)?;
        report.rejected_rows = osr.output.rejected_rows.len();
        if let Some(m) = &osr.report {
            (report.aks, report.aus, report.hna) = (m.aks, m.aus, m.hna);
        }
        let oracle_seed = Rng::stream(plan.oracle.seed ^ seed, t as u64).next_u64();
        let mut annotator = OracleAnnotator {
            truth: truth_by_id(&stream).map_err(ctx)?,
            config: OracleConfig { seed: oracle_seed, ..plan.oracle.clone() },
        };
        let gcd = run_gcd_stage(plan, &state, &stream, &osr, &mut annotator, &mut rng).map_err(ctx)?;
        if let Some(m) = &gcd.report {
            (report.hca_aks, report.ans, report.hca) = (m.aks, m.ans, m.hca);
        }
        report.estimated_k = gcd.estimated_k;
        report.estimate_evaluations = gcd.estimate_evaluations;
        report.true_k = gcd.true_k;
        report.new_classes = gcd.z_n.labels().map_or_else(Vec::new, |_| gcd.z_n.classes().into_iter().collect());
        report.labeled_rows = gcd.z_n.len();
        tracing::info!(
            seed,
            phase = t,
            estimated_k = ?report.estimated_k,
            true_k = ?report.true_k,
            hna = ?report.hna,
            hca = ?report.hca,
            "phase finished"
        );
        state.history.push(report);
        if t < last {
            state.registry.discovered_this_phase = gcd.z_n.labels().map_or_else(BTreeSet::new, |_| gcd.z_n.classes());
            state.registry.estimated_total = gcd.estimated_k;
            state = merge_and_advance(state, &gcd.z_n, &plan.ds3, &plan.classifier).map_err(ctx)?;
            if plan.recalibrate_alpha && plan.effective_alpha().is_none() {
                let (cfg, cal) = choose_alpha(plan, &state.buffer, &mut rng).map_err(ctx)?;
                state.osr_config = cfg;
                state.calibration = cal;
            }
        }
    }
    Ok(RunReport { seed, alpha: alpha0, phases: state.history })
}

/// Run every seed of the plan (in parallel) and aggregate.
pub fn run_experiment_with(plan: &ExperimentPlan, data: &PlanData) -> Result<ExperimentReport> {
    plan.validate()?;
    data.check(plan)?;
    let runs = plan
        .seeds
        .par_iter()
        .map(|&s| run_seed(plan, data, s).map_err(|e| Error::InvalidArgument(format!("seed {s}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: plan.name.clone(),
        variant: plan.variant,
        aggregate: aggregate(&runs),
        runs,
    })
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    run_experiment_with(plan, &PlanData::load(plan)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Capacity,
    Alpha,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capacity" => Ok(Self::Capacity),
            "alpha" => Ok(Self::Alpha),
            other => invalid(format!("unknown sweep axis {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub final_acc: Option<f64>,
    pub final_acc_first_test: Option<f64>,
    pub mean_hna: Option<f64>,
    pub mean_hca: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub final_acc: Option<f64>,
    pub mean_hna: Option<f64>,
    pub mean_hca: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    Stat::of(&v.collect::<Vec<_>>()).map(|s| s.mean)
}

impl SweepTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        w.write_record(["axis", "value", "seed", "final_acc", "final_acc_first_test", "mean_hna", "mean_hca"])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let axis = match self.axis {
            SweepAxis::Capacity => "capacity",
            SweepAxis::Alpha => "alpha",
        };
        for r in &self.rows {
            w.write_record([
                axis.to_string(),
                format!("{:?}", r.value),
                r.seed.to_string(),
                opt(r.final_acc),
                opt(r.final_acc_first_test),
                opt(r.mean_hna),
                opt(r.mean_hca),
            ])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Repeat the experiment for every value on one axis; cells run in parallel.
pub fn run_sweep(plan: &ExperimentPlan, data: &PlanData, axis: SweepAxis, values: &[f64]) -> Result<SweepTable> {
    if values.is_empty() {
        return invalid("sweep needs at least one value");
    }
    let cells: Vec<(f64, u64)> = values.iter().flat_map(|&v| plan.seeds.iter().map(move |&s| (v, s))).collect();
    let rows = cells
        .par_iter()
        .map(|&(value, seed)| {
            let mut p = plan.clone();
            match axis {
                SweepAxis::Capacity => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return invalid(format!("capacity must be a positive integer, got {value}"));
                    }
                    p.capacity = value as usize;
                }
                SweepAxis::Alpha => {
                    p.alpha = Some(value);
                    p.recalibrate_alpha = false;
                }
            }
            p.validate()?;
            let run = run_seed(&p, data, seed)?;
            let last = run.phases.last();
            Ok(SweepRow {
                value,
                seed,
                final_acc: last.and_then(|l| l.acc),
                final_acc_first_test: last.and_then(|l| l.acc_per_test.first().copied()),
                mean_hna: mean(run.phases.iter().filter_map(|p| p.hna)),
                mean_hca: mean(run.phases.iter().filter_map(|p| p.hca)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = values
        .iter()
        .map(|&v| {
            let cell = || rows.iter().filter(move |r| r.value == v);
            SweepSummary {
                value: v,
                final_acc: mean(cell().filter_map(|r| r.final_acc)),
                mean_hna: mean(cell().filter_map(|r| r.mean_hna)),
                mean_hca: mean(cell().filter_map(|r| r.mean_hca)),
            }
        })
        .collect();
    Ok(SweepTable { axis, rows, summary })
}

/// Blob-based plan: `initial` classes, then `step` new classes per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPlanSpec {
    pub initial: usize,
    pub step: usize,
    pub steps: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub centroid_scale: f64,
    pub noise_sigma: f64,
    pub data_seed: u64,
    pub capacity: usize,
    pub seeds: Vec<u64>,
    pub classifier: ClassifierSpec,
}

impl Default for SyntheticPlanSpec {
    fn default() -> Self {
        Self {
            initial: 4,
            step: 2,
            steps: 3,
            dim: 16,
            train_per_class: 100,
            test_per_class: 40,
            centroid_scale: 10.0,
            noise_sigma: 1.0,
            data_seed: 0,
            capacity: 200,
            seeds: (0..5).collect(),
            classifier: ClassifierSpec::ncm(2.0),
        }
    }
}

impl SyntheticPlanSpec {
    fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            num_classes: self.initial + self.step * self.steps,
            dim: self.dim,
            per_class: self.train_per_class + self.test_per_class,
            centroid_scale: self.centroid_scale,
            noise_sigma: self.noise_sigma,
            seed: self.data_seed,
        }
    }

    /// Classes introduced at each phase.
    fn schedule(&self) -> Vec<Vec<ClassId>> {
        let mut next = 1 as ClassId;
        let mut take = |n: usize| {
            let v: Vec<ClassId> = (next..next + n as ClassId).collect();
            next += n as ClassId;
            v
        };
        let mut out = vec![take(self.initial)];
        for _ in 0..self.steps {
            out.push(take(self.step));
        }
        out
    }

    pub fn plan(&self, dir: &Path) -> ExperimentPlan {
        let n = self.steps + 1;
        let phases = (0..n)
            .map(|t| PhasePlan {
                train: dir.join(format!("train_{t}.owr")),
                tests: vec![dir.join(format!("test_{t}.owr"))],
                streams: if t + 1 < n { vec![dir.join(format!("train_{}.owr", t + 1))] } else { Vec::new() },
            })
            .collect();
        ExperimentPlan {
            name: "synthetic-blobs".into(),
            phases,
            initial_known: self.schedule()[0].clone(),
            capacity: self.capacity,
            seeds: self.seeds.clone(),
            classifier: self.classifier.clone(),
            estimation: EstimationConfig::default(),
            kmeans: SsKmeansConfig::default(),
            osr: OsrConfig::default(),
            ds3: Ds3Config::default(),
            oracle: OracleConfig::default(),
            alpha: None,
            recalibrate_alpha: false,
            variant: Variant::Full,
        }
    }

    pub fn data(&self) -> Result<PlanData> {
        if self.initial < 3 || self.train_per_class == 0 || self.test_per_class == 0 {
            return invalid("synthetic plans need at least 3 initial classes and non-empty splits");
        }
        let all = generate_blobs(&self.blob_spec())?;
        let labels = all.require_labels()?.to_vec();
        let per = self.train_per_class + self.test_per_class;
        let schedule = self.schedule();
        let part = |classes: &[ClassId], train: bool| {
            all.filter(|i| classes.contains(&labels[i]) && ((i % per) < self.train_per_class) == train)
        };
        let trains: Vec<FeatureSet> = schedule.iter().map(|c| part(c, true)).collect();
        let phases = (0..schedule.len())
            .map(|t| PhaseData {
                train: trains[t].clone(),
                tests: vec![part(&schedule[t], false)],
                stream: trains.get(t + 1).cloned().unwrap_or_else(|| {
                    FeatureSet::empty(self.dim).with_labels(Vec::new()).expect("empty")
                }),
            })
            .collect();
        Ok(PlanData { phases })
    }

    /// Write the archives and `plan.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<ExperimentPlan> {
        fs::create_dir_all(dir)?;
        let data = self.data()?;
        let meta = self.blob_spec().metadata();
        for (t, p) in data.phases.iter().enumerate() {
            write_archive_with(&p.train, &dir.join(format!("train_{t}.owr")), Dtype::F64, None, meta.clone())?;
            write_archive_with(&p.tests[0], &dir.join(format!("test_{t}.owr")), Dtype::F64, None, meta.clone())?;
        }
        let mut plan = self.plan(Path::new(""));
        for p in &mut plan.phases {
            for f in std::iter::once(&mut p.train).chain(&mut p.tests).chain(&mut p.streams) {
                *f = PathBuf::from(f.file_name().expect("file name"));
            }
        }
        plan.save(&dir.join("plan.json"))?;
        ExperimentPlan::load(&dir.join("plan.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn unknown_marking() {
        assert_eq!(mark_unknowns(&[1, 5, 2, 9], &[1, 2].into()), vec![1, 0, 2, 0]);
    }

    #[test]
    fn synthetic_schedule() {
        let spec = SyntheticPlanSpec { train_per_class: 5, test_per_class: 2, ..Default::default() };
        let data = spec.data().unwrap();
        let classes: Vec<Vec<ClassId>> =
            data.phases.iter().map(|p| p.train.classes().into_iter().collect()).collect();
        assert_eq!(classes, vec![vec![1, 2, 3, 4], vec![5, 6], vec![7, 8], vec![9, 10]]);
        assert_eq!(data.phases[0].train.len(), 20);
        assert_eq!(data.phases[0].tests[0].len(), 8);
        assert_eq!(data.phases[0].stream, data.phases[1].train);
        assert!(data.phases[3].stream.is_empty());
    }

    #[test]
    fn sweep_axis_parses() {
        assert_eq!("alpha".parse::<SweepAxis>().unwrap(), SweepAxis::Alpha);
        assert!("beta".parse::<SweepAxis>().is_err());
    }
}
